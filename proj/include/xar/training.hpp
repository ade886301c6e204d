#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "xar/data.hpp"
#include "xar/denoiser.hpp"
#include "xar/entities.hpp"
#include "xar/flow.hpp"

namespace xar {

struct TrainConfig {
    TimePolicy policy = TimePolicy::Random;
    std::size_t epochs = 100;
    std::size_t warmup_epochs = 10;
    std::size_t batch_size = 256;
    double peak_lr = 4e-4;
    double end_lr = 1e-5;
    double weight_decay = 0.02;
    double beta1 = 0.9;
    double beta2 = 0.96;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    std::size_t checkpoint_every = 0;  // epochs; 0 = final checkpoint only
    std::size_t log_every = 1;         // steps between metric lines
    LayoutSpec layout;
    DenoiserConfig model;
    DatasetSpec data;

    void validate() const;
};

// total = sum(per_entity); each entry is that entity's share of the mean squared error.
struct LossReport {
    double total = 0.0;
    std::vector<double> per_entity;
    double grad_norm = 0.0;
};

// One noisy-context training batch. Random uses a single stream; Clean,
// Increasing and Decreasing use a context stream (policy times) followed by a
// target stream (independent uniform times) and the loss reads the target stream.
struct NclBatch {
    bool dual = false;
    BatchInput input;
    Matrix target;  // [batch * T, c] velocities eps - X of the scored stream
    TimeVector context_times;  // [batch * N]
    TimeVector target_times;   // [batch * N]
};

NclBatch prepare_ncl_batch(const EntityLayout& layout, const Matrix& clean, const std::vector<int>& labels,
                           TimePolicy policy, Rng& rng);

// Rows of the scored stream from a forward output.
Matrix scored_rows(const EntityLayout& layout, const NclBatch& batch, const Matrix& output);

LossReport score_prediction(const EntityLayout& layout, const NclBatch& batch, const Matrix& prediction);

// Geometries reused across steps for one layout and width.
struct NclGeometry {
    SequenceGeometry single;
    SequenceGeometry dual;
    NclGeometry(const EntityLayout& layout, std::size_t width);
};

// Loss and parameter gradients (written to model.params().grads()) for a batch of clean sequences.
LossReport ncl_loss(DenoiserModel& model, const EntityLayout& layout, const NclGeometry& geom, const Matrix& clean,
                    const std::vector<int>& labels, TimePolicy policy, Rng& rng, bool train_mode = true);
LossReport ncl_loss(DenoiserModel& model, const EntitySequence& x, std::optional<int> label, TimePolicy policy,
                    Rng& rng, bool train_mode = true);

// Linear warmup 0 -> peak, then cosine decay peak -> end.
double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double peak_lr, double end_lr);

// Scales gradients so their global L2 norm is at most max_norm; returns the norm before clipping.
double clip_grad_norm(ParamSet& params, double max_norm);

class AdamW {
public:
    AdamW() = default;
    AdamW(std::size_t n, double beta1, double beta2, double eps, double weight_decay);
    void step(ParamSet& params, double lr);

    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.96;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct TrainState {
    DenoiserModel model;
    AdamW optimizer;
    Rng rng;
    std::size_t step = 0;
    std::size_t epoch = 0;
};

struct TrainMetrics {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
};

struct TrainOptions {
    std::string out_dir;         // empty: no files written
    std::string config_text;     // embedded in checkpoints
    std::ostream* log = nullptr; // JSON lines, one per logged step
};

struct TrainResult {
    TrainState state;
    std::vector<TrainMetrics> metrics;
    std::string checkpoint_path;
};

TrainState init_train_state(const TrainConfig& config);
TrainResult train(const TrainConfig& config, const Dataset& dataset, const TrainOptions& options = {});

}  // namespace xar
