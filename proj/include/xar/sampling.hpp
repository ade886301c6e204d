#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "xar/denoiser.hpp"
#include "xar/entities.hpp"
#include "xar/flow.hpp"
#include "xar/rng.hpp"

namespace xar {

struct SampleConfig {
    int steps = 50;
    SolverMode mode = SolverMode::SDE;
    double churn = 1.0;
    double guidance = 1.5;
    std::optional<int> label;  // nullopt = unconditional
    std::uint64_t seed = 0;
    bool prefix_cache = true;  // reuse prefix keys/values; off re-encodes the full prefix each step

    void validate() const;
};

// Velocity of the entity currently being generated given the clean entities
// committed so far. Rows are [batch * entity tokens, token_dim].
class EntityVelocityField {
public:
    virtual ~EntityVelocityField() = default;
    virtual void reset(std::size_t batch) = 0;
    virtual Matrix velocity(std::size_t entity, const Matrix& current, double t) = 0;
    virtual void commit(std::size_t entity, const Matrix& clean) = 0;
};

// Denoiser-backed field with optional classifier-free guidance.
class DenoiserField : public EntityVelocityField {
public:
    DenoiserField(const DenoiserModel& model, const EntityLayout& layout, std::vector<int> labels, double guidance,
                  bool prefix_cache);

    void reset(std::size_t batch) override;
    Matrix velocity(std::size_t entity, const Matrix& current, double t) override;
    void commit(std::size_t entity, const Matrix& clean) override;

private:
    Matrix predict(const std::vector<int>& labels, std::size_t entity, const Matrix& current, double t,
                   IncrementalDecoder* decoder) const;
    bool guided() const;

    const DenoiserModel& model_;
    EntityLayout layout_;
    std::vector<int> labels_;
    std::vector<int> null_labels_;
    double guidance_;
    bool prefix_cache_;
    SequenceGeometry geometry_;
    Matrix prefix_;  // [batch * committed tokens, c], uncached path
    std::unique_ptr<IncrementalDecoder> cond_;
    std::unique_ptr<IncrementalDecoder> uncond_;
};

// Runs the autoregressive loop over all entities. Sample b draws its starting
// noise (and SDE noise) from streams[b] only.
Matrix generate_tokens(EntityVelocityField& field, const EntityLayout& layout, const SolverOptions& opts,
                       std::vector<Rng>& streams);

// Same loop with every entity's starting noise supplied ([batch * count, c]
// each); SDE increments come from `noise`.
Matrix generate_tokens_from(EntityVelocityField& field, const EntityLayout& layout, const SolverOptions& opts,
                            const std::vector<Matrix>& start, const NoiseFn& noise);

LatentGrid generate(const DenoiserModel& model, const EntityLayout& layout, const SampleConfig& cfg, Rng& rng);

// Sample i uses stream Rng::derive(base, i) with base = rng.next_u64(), so it
// equals generate() under that stream regardless of batch composition.
std::vector<LatentGrid> batch_generate(const DenoiserModel& model, const EntityLayout& layout,
                                       const SampleConfig& cfg, std::size_t count, Rng& rng);
// Per-sample labels (kNullLabel for unconditional).
std::vector<LatentGrid> batch_generate(const DenoiserModel& model, const EntityLayout& layout,
                                       const SampleConfig& cfg, const std::vector<int>& labels, Rng& rng,
                                       std::size_t chunk = 256);

}  // namespace xar
