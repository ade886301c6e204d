#include "xar/sampling.hpp"

#include <algorithm>
#include <functional>

#include "xar/errors.hpp"

namespace xar {

void SampleConfig::validate() const {
    if (steps < 1) {
        throw DomainError("sample: steps must be >= 1");
    }
    if (!(guidance >= 0.0)) {
        throw DomainError("sample: guidance must be >= 0");
    }
    if (!(churn >= 0.0)) {
        throw DomainError("sample: churn must be >= 0");
    }
}

namespace {

// Geometry of the first `entities` entities of a single-stream layout.
SequenceGeometry prefix_geometry(const SequenceGeometry& full, std::size_t entities) {
    SequenceGeometry g;
    g.blocks.assign(full.blocks.begin(), full.blocks.begin() + static_cast<std::ptrdiff_t>(entities));
    g.tokens = g.blocks.back().offset + g.blocks.back().count;
    g.token_block.assign(full.token_block.begin(), full.token_block.begin() + static_cast<std::ptrdiff_t>(g.tokens));
    g.block_entity.assign(full.block_entity.begin(),
                          full.block_entity.begin() + static_cast<std::ptrdiff_t>(entities));
    g.positions = rows_slice(full.positions, 0, g.tokens);
    g.set_mask(build_block_causal_mask(g.blocks));
    return g;
}

}  // namespace

DenoiserField::DenoiserField(const DenoiserModel& model, const EntityLayout& layout, std::vector<int> labels,
                             double guidance, bool prefix_cache)
    : model_(model),
      layout_(layout),
      labels_(std::move(labels)),
      null_labels_(labels_.size(), kNullLabel),
      guidance_(guidance),
      prefix_cache_(prefix_cache) {
    const DenoiserConfig& cfg = model.config();
    if (layout.grid().c != cfg.token_dim) {
        throw DomainError("model token_dim does not match layout channels");
    }
    if (layout.total_tokens() > cfg.max_tokens) {
        throw DomainError("layout has more tokens than the model's max_tokens");
    }
    for (int l : labels_) {
        if (l >= static_cast<int>(cfg.num_classes)) {
            throw DomainError("label " + std::to_string(l) + " >= num_classes");
        }
    }
    geometry_ = single_stream_geometry(layout, cfg.width);
    reset(labels_.size());
}

bool DenoiserField::guided() const {
    if (guidance_ == 1.0) {
        return false;
    }
    return std::any_of(labels_.begin(), labels_.end(), [](int l) { return l >= 0; });
}

void DenoiserField::reset(std::size_t batch) {
    if (batch != labels_.size()) {
        throw DomainError("velocity field batch does not match label count");
    }
    prefix_ = Matrix(0, model_.config().token_dim);
    if (prefix_cache_) {
        cond_ = std::make_unique<IncrementalDecoder>(model_, layout_, labels_);
        uncond_ = guided() ? std::make_unique<IncrementalDecoder>(model_, layout_, null_labels_) : nullptr;
    }
}

Matrix DenoiserField::predict(const std::vector<int>& labels, std::size_t entity, const Matrix& current, double t,
                              IncrementalDecoder* decoder) const {
    if (decoder) {
        return decoder->velocity(current, t);
    }
    const std::size_t B = labels.size();
    const TokenSpan span = layout_.spans()[entity];
    const SequenceGeometry g = prefix_geometry(geometry_, entity + 1);
    BatchInput in;
    in.batch = B;
    in.labels = labels;
    in.tokens = Matrix(B * g.tokens, current.cols);
    in.times.assign(B * (entity + 1), 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t p = 0; p < span.offset; ++p) {
            std::copy_n(prefix_.row(b * span.offset + p).begin(), current.cols, in.tokens.row(b * g.tokens + p).begin());
        }
        for (std::size_t p = 0; p < span.count; ++p) {
            std::copy_n(current.row(b * span.count + p).begin(), current.cols,
                        in.tokens.row(b * g.tokens + span.offset + p).begin());
        }
        in.times[b * (entity + 1) + entity] = t;
    }
    const Matrix out = forward_batch(model_, g, in, ForwardOptions{});
    Matrix v(B * span.count, current.cols);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t p = 0; p < span.count; ++p) {
            std::copy_n(out.row(b * g.tokens + span.offset + p).begin(), current.cols, v.row(b * span.count + p).begin());
        }
    }
    return v;
}

Matrix DenoiserField::velocity(std::size_t entity, const Matrix& current, double t) {
    Matrix v = predict(labels_, entity, current, t, cond_.get());
    if (!guided()) {
        return v;
    }
    const Matrix vu = predict(null_labels_, entity, current, t, uncond_.get());
    return cfg_combine(v, vu, guidance_);
}

void DenoiserField::commit(std::size_t entity, const Matrix& clean) {
    const std::size_t B = labels_.size();
    const TokenSpan span = layout_.spans()[entity];
    if (prefix_cache_) {
        cond_->append_clean(clean);
        if (uncond_) {
            uncond_->append_clean(clean);
        }
        return;
    }
    const std::size_t np = span.offset + span.count;
    Matrix grown(B * np, clean.cols);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t p = 0; p < span.offset; ++p) {
            std::copy_n(prefix_.row(b * span.offset + p).begin(), clean.cols, grown.row(b * np + p).begin());
        }
        for (std::size_t p = 0; p < span.count; ++p) {
            std::copy_n(clean.row(b * span.count + p).begin(), clean.cols, grown.row(b * np + span.offset + p).begin());
        }
    }
    prefix_ = std::move(grown);
}

namespace {

using StartFn = std::function<void(std::size_t entity, Matrix& out)>;

Matrix run_entities(EntityVelocityField& field, const EntityLayout& layout, const SolverOptions& opts,
                    std::size_t B, const StartFn& start_noise, const std::function<NoiseFn(std::size_t)>& step_noise) {
    const std::size_t c = layout.grid().c;
    const std::size_t T = layout.total_tokens();
    field.reset(B);
    Matrix out(B * T, c);
    for (std::size_t n = 0; n < layout.entity_count(); ++n) {
        const std::size_t count = layout.spans()[n].count;
        Matrix start(B * count, c);
        start_noise(n, start);
        const Matrix clean = integrate_from(
            std::move(start), [&](const Matrix& f, double t) { return field.velocity(n, f, t); }, opts,
            step_noise(count));
        field.commit(n, clean);
        for (std::size_t b = 0; b < B; ++b) {
            std::copy_n(clean.row(b * count).begin(), count * c,
                        out.row(b * T + layout.spans()[n].offset).begin());
        }
    }
    return out;
}

}  // namespace

Matrix generate_tokens(EntityVelocityField& field, const EntityLayout& layout, const SolverOptions& opts,
                       std::vector<Rng>& streams) {
    const std::size_t B = streams.size();
    const std::size_t c = layout.grid().c;
    auto per_sample = [&](std::size_t count) {
        return [&streams, B, c, count](Matrix& m) {
            for (std::size_t b = 0; b < B; ++b) {
                streams[b].fill_normal(std::span<double>(m.data.data() + b * count * c, count * c));
            }
        };
    };
    return run_entities(
        field, layout, opts, B, [&](std::size_t n, Matrix& m) { per_sample(layout.spans()[n].count)(m); },
        [&](std::size_t count) -> NoiseFn { return per_sample(count); });
}

Matrix generate_tokens_from(EntityVelocityField& field, const EntityLayout& layout, const SolverOptions& opts,
                            const std::vector<Matrix>& start, const NoiseFn& noise) {
    if (start.size() != layout.entity_count()) {
        throw DomainError("generate: need one starting noise per entity");
    }
    const std::size_t B = start.front().rows / layout.spans().front().count;
    for (std::size_t n = 0; n < start.size(); ++n) {
        if (start[n].rows != B * layout.spans()[n].count || start[n].cols != layout.grid().c) {
            throw DomainError("generate: starting noise shape does not match entity " + std::to_string(n));
        }
    }
    return run_entities(
        field, layout, opts, B, [&](std::size_t n, Matrix& m) { m = start[n]; },
        [&](std::size_t) { return noise; });
}

namespace {

std::vector<LatentGrid> run_batch(const DenoiserModel& model, const EntityLayout& layout, const SampleConfig& cfg,
                                  const std::vector<int>& labels, std::vector<Rng>& streams) {
    DenoiserField field(model, layout, labels, cfg.guidance, cfg.prefix_cache);
    const SolverOptions opts{cfg.steps, cfg.mode, cfg.churn};
    const Matrix tokens = generate_tokens(field, layout, opts, streams);
    const std::size_t T = layout.total_tokens();
    std::vector<LatentGrid> out;
    out.reserve(streams.size());
    for (std::size_t b = 0; b < streams.size(); ++b) {
        out.push_back(entities_to_latent(EntitySequence{rows_slice(tokens, b * T, T), layout}));
    }
    return out;
}

}  // namespace

LatentGrid generate(const DenoiserModel& model, const EntityLayout& layout, const SampleConfig& cfg, Rng& rng) {
    cfg.validate();
    std::vector<Rng> streams{rng};
    auto out = run_batch(model, layout, cfg, {cfg.label.value_or(kNullLabel)}, streams);
    rng = streams[0];
    return std::move(out[0]);
}

std::vector<LatentGrid> batch_generate(const DenoiserModel& model, const EntityLayout& layout,
                                       const SampleConfig& cfg, std::size_t count, Rng& rng) {
    if (count < 1) {
        throw DomainError("batch_generate: count must be >= 1");
    }
    return batch_generate(model, layout, cfg, std::vector<int>(count, cfg.label.value_or(kNullLabel)), rng);
}

std::vector<LatentGrid> batch_generate(const DenoiserModel& model, const EntityLayout& layout,
                                       const SampleConfig& cfg, const std::vector<int>& labels, Rng& rng,
                                       std::size_t chunk) {
    cfg.validate();
    if (labels.empty()) {
        throw DomainError("batch_generate: count must be >= 1");
    }
    const std::uint64_t base = rng.next_u64();
    std::vector<LatentGrid> out;
    out.reserve(labels.size());
    for (std::size_t first = 0; first < labels.size(); first += chunk) {
        const std::size_t n = std::min(chunk, labels.size() - first);
        std::vector<Rng> streams;
        for (std::size_t i = 0; i < n; ++i) {
            streams.push_back(Rng::derive(base, first + i));
        }
        const std::vector<int> sub(labels.begin() + static_cast<std::ptrdiff_t>(first),
                                   labels.begin() + static_cast<std::ptrdiff_t>(first + n));
        auto part = run_batch(model, layout, cfg, sub, streams);
        std::move(part.begin(), part.end(), std::back_inserter(out));
    }
    return out;
}

}  // namespace xar
