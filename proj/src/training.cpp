#include "xar/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "xar/checkpoint.hpp"
#include "xar/errors.hpp"

namespace xar {

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
    if (epochs < 1) {
        fail("epochs must be >= 1");
    }
    if (warmup_epochs >= epochs) {
        fail("warmup_epochs must be < epochs");
    }
    if (batch_size < 1) {
        fail("batch_size must be >= 1");
    }
    if (!(end_lr > 0.0 && end_lr <= peak_lr)) {
        fail("need 0 < end_lr <= peak_lr");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
        fail("betas must lie in [0, 1)");
    }
    if (!(weight_decay >= 0.0) || !(grad_clip > 0.0)) {
        fail("weight_decay must be >= 0 and grad_clip > 0");
    }
    model.validate();
    data.validate();
    if (data.grid.c != model.token_dim) {
        fail("data channels must equal model token_dim");
    }
}

NclGeometry::NclGeometry(const EntityLayout& layout, std::size_t width)
    : single(single_stream_geometry(layout, width)), dual(dual_stream_geometry(layout, width)) {}

NclBatch prepare_ncl_batch(const EntityLayout& layout, const Matrix& clean, const std::vector<int>& labels,
                           TimePolicy policy, Rng& rng) {
    const std::size_t B = labels.size();
    const std::size_t T = layout.total_tokens();
    const std::size_t N = layout.entity_count();
    const std::size_t c = layout.grid().c;
    if (clean.rows != B * T || clean.cols != c) {
        throw DomainError("ncl: clean batch does not match layout and label count");
    }
    const auto& spans = layout.spans();
    NclBatch out;
    out.dual = policy != TimePolicy::Random;
    out.input.batch = B;
    out.input.labels = labels;

    // Times for all samples first, then noise, in a fixed order.
    for (std::size_t b = 0; b < B; ++b) {
        const TimeVector tt = sample_times(TimePolicy::Random, N, rng);
        out.target_times.insert(out.target_times.end(), tt.begin(), tt.end());
        if (out.dual) {
            const TimeVector ct = sample_times(policy, N, rng);
            out.context_times.insert(out.context_times.end(), ct.begin(), ct.end());
        }
    }
    const Matrix eps = draw_noise(B * T, c, rng);
    const Matrix ctx_eps = out.dual ? draw_noise(B * T, c, rng) : Matrix();

    auto noised = [&](const Matrix& noise, const TimeVector& times, std::size_t b, Matrix& dst, std::size_t row0) {
        for (std::size_t n = 0; n < N; ++n) {
            const double t = times[b * N + n];
            for (std::size_t p = 0; p < spans[n].count; ++p) {
                const std::size_t src = b * T + spans[n].offset + p;
                auto x = clean.row(src);
                auto e = noise.row(src);
                auto o = dst.row(row0 + spans[n].offset + p);
                for (std::size_t j = 0; j < c; ++j) {
                    o[j] = (1.0 - t) * x[j] + t * e[j];
                }
            }
        }
    };

    out.target = Matrix(B * T, c);
    for (std::size_t i = 0; i < out.target.data.size(); ++i) {
        out.target.data[i] = eps.data[i] - clean.data[i];
    }
    if (!out.dual) {
        out.input.tokens = Matrix(B * T, c);
        out.input.times = out.target_times;
        for (std::size_t b = 0; b < B; ++b) {
            noised(eps, out.target_times, b, out.input.tokens, b * T);
        }
        out.context_times = out.target_times;
    } else {
        out.input.tokens = Matrix(2 * B * T, c);
        out.input.times.reserve(2 * B * N);
        for (std::size_t b = 0; b < B; ++b) {
            noised(ctx_eps, out.context_times, b, out.input.tokens, 2 * b * T);
            noised(eps, out.target_times, b, out.input.tokens, 2 * b * T + T);
            out.input.times.insert(out.input.times.end(), out.context_times.begin() + static_cast<std::ptrdiff_t>(b * N),
                                   out.context_times.begin() + static_cast<std::ptrdiff_t>((b + 1) * N));
            out.input.times.insert(out.input.times.end(), out.target_times.begin() + static_cast<std::ptrdiff_t>(b * N),
                                   out.target_times.begin() + static_cast<std::ptrdiff_t>((b + 1) * N));
        }
    }
    return out;
}

Matrix scored_rows(const EntityLayout& layout, const NclBatch& batch, const Matrix& output) {
    if (!batch.dual) {
        return output;
    }
    const std::size_t T = layout.total_tokens();
    Matrix out(batch.input.batch * T, output.cols);
    for (std::size_t b = 0; b < batch.input.batch; ++b) {
        set_rows(out, b * T, rows_slice(output, 2 * b * T + T, T));
    }
    return out;
}

LossReport score_prediction(const EntityLayout& layout, const NclBatch& batch, const Matrix& prediction) {
    if (!prediction.same_shape(batch.target)) {
        throw DomainError("ncl: prediction shape does not match target");
    }
    const std::size_t B = batch.input.batch;
    const std::size_t T = layout.total_tokens();
    const std::size_t c = layout.grid().c;
    const double denom = static_cast<double>(B * T * c);
    LossReport rep;
    rep.per_entity.assign(layout.entity_count(), 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t n = 0; n < layout.entity_count(); ++n) {
            const TokenSpan s = layout.spans()[n];
            double acc = 0.0;
            for (std::size_t p = 0; p < s.count; ++p) {
                auto pr = prediction.row(b * T + s.offset + p);
                auto tg = batch.target.row(b * T + s.offset + p);
                for (std::size_t j = 0; j < c; ++j) {
                    const double d = pr[j] - tg[j];
                    acc += d * d;
                }
            }
            rep.per_entity[n] += acc / denom;
        }
    }
    for (double v : rep.per_entity) {
        rep.total += v;
    }
    return rep;
}

LossReport ncl_loss(DenoiserModel& model, const EntityLayout& layout, const NclGeometry& geom, const Matrix& clean,
                    const std::vector<int>& labels, TimePolicy policy, Rng& rng, bool train_mode) {
    const NclBatch batch = prepare_ncl_batch(layout, clean, labels, policy, rng);
    const SequenceGeometry& g = batch.dual ? geom.dual : geom.single;
    ForwardTape tape;
    const Matrix out = forward_batch(model, g, batch.input, ForwardOptions{train_mode, &rng}, tape.get());
    const Matrix pred = scored_rows(layout, batch, out);
    LossReport rep = score_prediction(layout, batch, pred);
    if (!std::isfinite(rep.total)) {
        std::ostringstream os;
        os << "non-finite loss (" << rep.total << ") with policy " << to_string(policy) << ", batch "
           << labels.size() << ", per-entity:";
        for (double v : rep.per_entity) {
            os << " " << v;
        }
        throw TrainingError(os.str());
    }

    const std::size_t T = layout.total_tokens();
    const double scale = 2.0 / static_cast<double>(pred.size());
    Matrix d_out(out.rows, out.cols);
    for (std::size_t b = 0; b < labels.size(); ++b) {
        const std::size_t src0 = b * T;
        const std::size_t dst0 = batch.dual ? 2 * b * T + T : b * T;
        for (std::size_t p = 0; p < T; ++p) {
            auto pr = pred.row(src0 + p);
            auto tg = batch.target.row(src0 + p);
            auto d = d_out.row(dst0 + p);
            for (std::size_t j = 0; j < out.cols; ++j) {
                d[j] = scale * (pr[j] - tg[j]);
            }
        }
    }
    model.params().zero_grad();
    backward(model, *tape, d_out);
    double sq = 0.0;
    for (double v : model.params().grads()) {
        sq += v * v;
    }
    rep.grad_norm = std::sqrt(sq);
    return rep;
}

LossReport ncl_loss(DenoiserModel& model, const EntitySequence& x, std::optional<int> label, TimePolicy policy,
                    Rng& rng, bool train_mode) {
    const NclGeometry geom(x.layout, model.config().width);
    return ncl_loss(model, x.layout, geom, x.tokens, {label.value_or(kNullLabel)}, policy, rng, train_mode);
}

double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double peak_lr, double end_lr) {
    if (step > total_steps) {
        throw DomainError("lr_at: step beyond total_steps");
    }
    if (step < warmup_steps) {
        return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    if (total_steps <= warmup_steps) {
        return peak_lr;
    }
    const double progress =
        static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    return end_lr + (peak_lr - end_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double clip_grad_norm(ParamSet& params, double max_norm) {
    double sq = 0.0;
    for (double v : params.grads()) {
        sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (double& v : params.grads()) {
            v *= s;
        }
    }
    return norm;
}

AdamW::AdamW(std::size_t n, double b1, double b2, double e, double wd)
    : m(n, 0.0), v(n, 0.0), beta1(b1), beta2(b2), eps(e), weight_decay(wd) {}

void AdamW::step(ParamSet& params, double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    auto& p = params.values();
    const auto& g = params.grads();
    for (const ParamInfo& info : params.infos()) {
        const double decay = info.decay ? 1.0 - lr * weight_decay : 1.0;
        for (std::size_t i = info.offset; i < info.offset + info.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            p[i] = p[i] * decay - lr * mh / (std::sqrt(vh) + eps);
        }
    }
}

TrainState init_train_state(const TrainConfig& config) {
    config.validate();
    DenoiserModel model(config.model, splitmix64(config.seed));
    AdamW opt(model.params().count(), config.beta1, config.beta2, config.adam_eps, config.weight_decay);
    return TrainState{std::move(model), std::move(opt), Rng::derive(config.seed, 1), 0, 0};
}

TrainResult train(const TrainConfig& config, const Dataset& dataset, const TrainOptions& options) {
    if (dataset.empty()) {
        throw TrainingError("train: dataset is empty");
    }
    TrainResult result{init_train_state(config), {}, {}};
    TrainState& st = result.state;
    const EntityLayout layout = build_layout(config.layout, config.data.grid);
    if (layout.total_tokens() > config.model.max_tokens) {
        throw ConfigError("layout has more tokens than model.max_tokens");
    }
    const NclGeometry geom(layout, config.model.width);
    const std::size_t T = layout.total_tokens();
    const std::size_t c = layout.grid().c;

    std::vector<Matrix> sequences;
    sequences.reserve(dataset.size());
    for (const Sample& s : dataset) {
        if (!(s.latent.shape() == layout.grid())) {
            throw TrainingError("train: dataset sample shape does not match layout grid");
        }
        sequences.push_back(latent_to_entities(s.latent, layout).tokens);
    }

    const std::size_t steps_per_epoch = (dataset.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = steps_per_epoch * config.epochs;
    const std::size_t warmup_steps = steps_per_epoch * config.warmup_epochs;
    if (!options.out_dir.empty()) {
        std::filesystem::create_directories(options.out_dir);
    }

    double initial_loss = -1.0;
    std::size_t blowup_run = 0;
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[st.rng.below(i)]);
        }
        for (std::size_t first = 0; first < order.size(); first += config.batch_size) {
            const std::size_t B = std::min(config.batch_size, order.size() - first);
            Matrix clean(B * T, c);
            std::vector<int> labels(B);
            for (std::size_t b = 0; b < B; ++b) {
                const std::size_t idx = order[first + b];
                set_rows(clean, b * T, sequences[idx]);
                labels[b] = dataset[idx].label;
            }
            LossReport rep;
            try {
                rep = ncl_loss(st.model, layout, geom, clean, labels, config.policy, st.rng, true);
            } catch (const TrainingError& e) {
                throw TrainingError("step " + std::to_string(st.step) + ", epoch " + std::to_string(epoch) + ": " +
                                    e.what());
            }
            const double norm = clip_grad_norm(st.model.params(), config.grad_clip);
            const double lr = lr_at(st.step, total_steps, warmup_steps, config.peak_lr, config.end_lr);
            st.optimizer.step(st.model.params(), lr);
            ++st.step;

            if (initial_loss < 0.0) {
                initial_loss = rep.total;
            }
            blowup_run = rep.total > 10.0 * initial_loss ? blowup_run + 1 : 0;
            if (blowup_run >= 100) {
                std::ostringstream os;
                os << "training diverged: loss " << rep.total << " > 10x initial " << initial_loss
                   << " for 100 consecutive steps (step " << st.step << ", lr " << lr << ", grad norm " << norm
                   << ")";
                throw TrainingError(os.str());
            }
            const TrainMetrics m{st.step, epoch, rep.total, lr, norm};
            result.metrics.push_back(m);
            if (options.log && (st.step % config.log_every == 0 || st.step == total_steps)) {
                nlohmann::json j{{"step", m.step}, {"epoch", m.epoch}, {"loss", m.loss}, {"lr", m.lr},
                                 {"grad_norm", m.grad_norm}};
                *options.log << j.dump() << "\n" << std::flush;
            }
        }
        st.epoch = epoch + 1;
        if (!options.out_dir.empty() && config.checkpoint_every > 0 && st.epoch % config.checkpoint_every == 0 &&
            st.epoch < config.epochs) {
            save_checkpoint(options.out_dir + "/ck_epoch" + std::to_string(st.epoch), st, options.config_text);
        }
    }
    if (!options.out_dir.empty()) {
        result.checkpoint_path = options.out_dir + "/ck";
        save_checkpoint(result.checkpoint_path, st, options.config_text);
    }
    return result;
}

}  // namespace xar
