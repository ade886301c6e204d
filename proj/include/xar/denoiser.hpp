#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xar/entities.hpp"
#include "xar/flow.hpp"
#include "xar/matrix.hpp"
#include "xar/rng.hpp"

namespace xar {

struct DenoiserConfig {
    std::size_t depth = 4;
    std::size_t width = 128;
    std::size_t heads = 4;
    std::size_t token_dim = 4;
    std::size_t max_tokens = 256;  // also bounds the entity-index table
    std::size_t num_classes = 10;
    std::size_t mlp_ratio = 4;
    std::size_t time_freq_dim = 64;
    double dropout = 0.1;
    double attn_dropout = 0.1;
    double label_dropout = 0.1;

    void validate() const;
    std::size_t null_class() const { return num_classes; }
    bool operator==(const DenoiserConfig&) const = default;
};

struct ParamInfo {
    std::string name;
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    bool decay = false;  // receives decoupled weight decay
    std::size_t size() const { return rows * cols; }
};

// Named parameter tensors packed into one flat buffer, with a matching gradient buffer.
class ParamSet {
public:
    std::size_t add(std::string name, std::size_t rows, std::size_t cols, bool decay);

    std::span<double> value(std::size_t idx) { return {values_.data() + infos_[idx].offset, infos_[idx].size()}; }
    std::span<const double> value(std::size_t idx) const {
        return {values_.data() + infos_[idx].offset, infos_[idx].size()};
    }
    std::span<double> grad(std::size_t idx) { return {grads_.data() + infos_[idx].offset, infos_[idx].size()}; }

    const std::vector<ParamInfo>& infos() const { return infos_; }
    std::optional<std::size_t> find(const std::string& name) const;
    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }
    std::vector<double>& grads() { return grads_; }
    const std::vector<double>& grads() const { return grads_; }
    void zero_grad();
    std::size_t count() const { return values_.size(); }

private:
    std::vector<ParamInfo> infos_;
    std::vector<double> values_;
    std::vector<double> grads_;
};

struct AttentionMask {
    std::size_t size = 0;
    std::vector<std::uint8_t> allow;  // row-major [size, size], 1 = may attend

    bool operator()(std::size_t q, std::size_t k) const { return allow[q * size + k] != 0; }
    std::size_t count_true() const;
    bool operator==(const AttentionMask&) const = default;
};

// Every token of entity n attends to all tokens of entities 1..n.
AttentionMask build_block_causal_mask(const std::vector<TokenSpan>& spans);

// How tokens of one (possibly two-stream) sequence map onto conditioning blocks.
struct SequenceGeometry {
    std::size_t tokens = 0;
    std::vector<TokenSpan> blocks;           // contiguous token runs sharing one time
    std::vector<std::size_t> token_block;    // [tokens]
    std::vector<std::size_t> block_entity;   // [blocks] entity index for the learned embedding
    Matrix positions;                        // [tokens, width] fixed 2-D sinusoidal table
    AttentionMask mask;
    std::vector<std::vector<std::uint32_t>> keys;  // allowed keys per query, ascending

    void set_mask(AttentionMask m);
};

// One stream: blocks are the layout's entities, block-causal mask.
SequenceGeometry single_stream_geometry(const EntityLayout& layout, std::size_t width);
// Context stream followed by target stream. Context entity n sees context 1..n;
// target entity n sees context 1..n-1 and its own target tokens.
SequenceGeometry dual_stream_geometry(const EntityLayout& layout, std::size_t width);

Matrix sinusoidal_positions(const std::vector<std::pair<double, double>>& coords, std::size_t width);
std::vector<double> timestep_embedding(double t, std::size_t dim);

class DenoiserModel {
public:
    DenoiserModel(const DenoiserConfig& config, std::uint64_t seed);

    const DenoiserConfig& config() const { return config_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    struct LayerIndex {
        std::size_t mod_w, mod_b, qkv_w, qkv_b, proj_w, proj_b, fc1_w, fc1_b, fc2_w, fc2_b;
    };
    struct Index {
        std::size_t in_w, in_b, entity_emb, class_emb, t1_w, t1_b, t2_w, t2_b;
        std::vector<LayerIndex> layers;
        std::size_t final_mod_w, final_mod_b, out_w, out_b;
    };
    const Index& index() const { return index_; }

private:
    DenoiserConfig config_;
    ParamSet params_;
    Index index_;
};

// Labels use -1 (or num_classes) for the unconditional / null class.
constexpr int kNullLabel = -1;

struct BatchInput {
    Matrix tokens;               // [batch * geometry.tokens, token_dim]
    std::vector<double> times;   // [batch * geometry.blocks.size()]
    std::vector<int> labels;     // [batch]
    std::size_t batch = 0;
};

struct ForwardCache;  // intermediates kept for backward

struct ForwardOptions {
    bool train = false;
    Rng* rng = nullptr;  // required when train is set and any dropout rate is positive
};

Matrix forward_batch(const DenoiserModel& model, const SequenceGeometry& geom, const BatchInput& input,
                     const ForwardOptions& opts, ForwardCache* cache = nullptr);

// Accumulates parameter gradients of sum(d_out * output) into model.params().grads().
void backward(DenoiserModel& model, const ForwardCache& cache, const Matrix& d_out);

// Owning handle for ForwardCache so callers need not see its layout.
class ForwardTape {
public:
    ForwardTape();
    ~ForwardTape();
    ForwardTape(ForwardTape&&) noexcept;
    ForwardTape& operator=(ForwardTape&&) noexcept;
    ForwardCache* get() { return cache_; }
    const ForwardCache& operator*() const { return *cache_; }

private:
    ForwardCache* cache_;
};

// Single-sequence velocity prediction under an explicit mask.
EntitySequence forward(const DenoiserModel& model, const EntitySequence& noisy, const TimeVector& times,
                       std::optional<int> label, const AttentionMask& mask, bool train_mode, Rng& rng);

// v_uncond + w (v_cond - v_uncond)
Matrix cfg_combine(const Matrix& v_cond, const Matrix& v_uncond, double w);

// Autoregressive decoding state for a batch: the clean prefix's keys and values
// are computed once per entity and reused by every integration step.
class IncrementalDecoder {
public:
    IncrementalDecoder(const DenoiserModel& model, const EntityLayout& layout, std::vector<int> labels);

    std::size_t entities_done() const { return done_; }
    std::size_t batch() const { return labels_.size(); }
    // Velocity for the next entity; `current` is [batch * count, token_dim].
    Matrix velocity(const Matrix& current, double t) const;
    // Appends the clean estimate of the next entity (time 0) to the prefix.
    void append_clean(const Matrix& entity_tokens);

private:
    Matrix run(const Matrix& rows, double t, std::vector<Matrix>* kv_out) const;

    const DenoiserModel& model_;
    EntityLayout layout_;
    std::vector<int> labels_;
    Matrix positions_;                  // full-sequence table
    std::size_t done_ = 0;
    std::size_t prefix_tokens_ = 0;
    std::vector<Matrix> keys_;          // per layer [batch * prefix_tokens, width]
    std::vector<Matrix> values_;
};

}  // namespace xar
