#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "xar/config.hpp"
#include "xar/data.hpp"
#include "xar/denoiser.hpp"
#include "xar/entities.hpp"

namespace xar {

// Unit directions uniformly distributed on the sphere in R^dim.
std::vector<std::vector<double>> random_projections(std::size_t dim, std::size_t count, Rng& rng);

// Exact 2-Wasserstein distance between two 1-D empirical distributions of any sizes.
double wasserstein2_1d(std::vector<double> a, std::vector<double> b);

// Mean over random unit projections of the 1-D W2 distance between projected samples.
double sliced_wasserstein(const std::vector<LatentGrid>& a, const std::vector<LatentGrid>& b,
                          std::size_t projections, Rng& rng);

struct ClassMetrics {
    int label = 0;
    std::size_t generated = 0;
    std::size_t reference = 0;
    double sliced_w2 = 0.0;
    double mean_err = 0.0;    // RMS over coordinates of the mean difference
    double mean_z_rms = 0.0;  // RMS over coordinates of (mean diff / combined standard error)
    double mean_z_max = 0.0;
};

struct MetricReport {
    double sliced_w2 = 0.0;
    double mean_err = 0.0;
    double cov_err = 0.0;  // Frobenius norm of the covariance difference divided by dim
    std::vector<ClassMetrics> per_class;
    std::string config_hash;
    std::uint64_t seed = 0;
    double wall_seconds = 0.0;

    nlohmann::json to_json() const;
};

MetricReport compare_samples(const std::vector<LatentGrid>& generated, const std::vector<int>& generated_labels,
                             const std::vector<LatentGrid>& reference, const std::vector<int>& reference_labels,
                             std::size_t projections, std::uint64_t projection_seed);

// Labels 0, 1, ..., num_classes - 1 repeated.
std::vector<int> balanced_labels(std::size_t count, std::size_t num_classes);

Dataset heldout_dataset(const RunConfig& config);

// Generates config.eval.samples class-balanced samples and compares them with `heldout`.
MetricReport evaluate_model(const DenoiserModel& model, const RunConfig& config, const Dataset& heldout);

// Trains on synth_dataset(config.train.data) and evaluates against the held-out split.
// A nonempty out_dir receives the checkpoint and training log.
MetricReport train_and_evaluate(const RunConfig& config, const std::string& out_dir = "",
                                std::ostream* train_log = nullptr);

// ---------------------------------------------------------------------------
// Ablation sweeps
// ---------------------------------------------------------------------------

enum class AblationAxis { CellSize, TimePolicy, EntityKind, Steps };

std::string_view to_string(AblationAxis axis);
AblationAxis parse_ablation_axis(std::string_view name);
std::vector<std::string> default_axis_values(AblationAxis axis);

// Entity-kind values are "token", "image", "cell:K", "subsample:D", "scale" or "scale:LEVELS".
RunConfig apply_axis(const RunConfig& base, AblationAxis axis, const std::string& value);

struct AblationRun {
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    MetricReport report;
};

struct AblationRow {
    std::string value;
    std::vector<AblationRun> runs;
    double mean_sliced_w2 = 0.0;  // over successful runs
    double std_sliced_w2 = 0.0;
    std::size_t rank = 0;         // 1 = best; failed rows rank last
};

struct AblationTable {
    AblationAxis axis = AblationAxis::TimePolicy;
    std::vector<AblationRow> rows;  // in sweep order

    std::string to_text() const;
};

struct AblateOptions {
    std::ostream* log = nullptr;  // one JSON line per finished run
    std::string out_dir;          // nonempty: one subdirectory per (value, seed)
};

AblationTable ablate(const RunConfig& base, AblationAxis axis, const std::vector<std::string>& values,
                     const std::vector<std::uint64_t>& seeds, const AblateOptions& options = {});

}  // namespace xar
