#include "xar/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>

#include "xar/errors.hpp"
#include "xar/sampling.hpp"

namespace xar {

std::vector<std::vector<double>> random_projections(std::size_t dim, std::size_t count, Rng& rng) {
    std::vector<std::vector<double>> out(count, std::vector<double>(dim));
    for (auto& p : out) {
        double norm = 0.0;
        do {
            rng.fill_normal(p);
            norm = 0.0;
            for (double v : p) {
                norm += v * v;
            }
        } while (norm == 0.0);
        norm = std::sqrt(norm);
        for (double& v : p) {
            v /= norm;
        }
    }
    return out;
}

double wasserstein2_1d(std::vector<double> a, std::vector<double> b) {
    if (a.empty() || b.empty()) {
        throw DomainError("wasserstein2_1d: empty sample");
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const std::size_t na = a.size();
    const std::size_t nb = b.size();
    // Integrate (Qa(u) - Qb(u))^2 over the merged quantile breakpoints i/na and j/nb.
    std::size_t i = 0;
    std::size_t j = 0;
    double u = 0.0;
    double acc = 0.0;
    while (i < na && j < nb) {
        const std::size_t ea = (i + 1) * nb;  // (i+1)/na scaled by na*nb
        const std::size_t eb = (j + 1) * na;
        const std::size_t e = std::min(ea, eb);
        const double next = static_cast<double>(e) / static_cast<double>(na * nb);
        const double d = a[i] - b[j];
        acc += (next - u) * d * d;
        u = next;
        if (ea == e) {
            ++i;
        }
        if (eb == e) {
            ++j;
        }
    }
    return std::sqrt(acc);
}

namespace {

std::vector<double> project(const std::vector<LatentGrid>& xs, const std::vector<double>& dir) {
    std::vector<double> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        double s = 0.0;
        const auto& v = xs[i].values();
        for (std::size_t k = 0; k < v.size(); ++k) {
            s += v[k] * dir[k];
        }
        out[i] = s;
    }
    return out;
}

std::vector<double> mean_of(const std::vector<const LatentGrid*>& xs, std::size_t dim) {
    std::vector<double> m(dim, 0.0);
    for (const LatentGrid* x : xs) {
        for (std::size_t k = 0; k < dim; ++k) {
            m[k] += x->values()[k];
        }
    }
    for (double& v : m) {
        v /= static_cast<double>(xs.size());
    }
    return m;
}

std::vector<double> variance_of(const std::vector<const LatentGrid*>& xs, const std::vector<double>& mean) {
    std::vector<double> var(mean.size(), 0.0);
    for (const LatentGrid* x : xs) {
        for (std::size_t k = 0; k < mean.size(); ++k) {
            const double d = x->values()[k] - mean[k];
            var[k] += d * d;
        }
    }
    for (double& v : var) {
        v /= static_cast<double>(std::max<std::size_t>(xs.size(), 2) - 1);
    }
    return var;
}

std::vector<double> covariance_of(const std::vector<const LatentGrid*>& xs, const std::vector<double>& mean) {
    const std::size_t d = mean.size();
    std::vector<double> cov(d * d, 0.0);
    for (const LatentGrid* x : xs) {
        for (std::size_t p = 0; p < d; ++p) {
            const double dp = x->values()[p] - mean[p];
            for (std::size_t q = 0; q < d; ++q) {
                cov[p * d + q] += dp * (x->values()[q] - mean[q]);
            }
        }
    }
    for (double& v : cov) {
        v /= static_cast<double>(std::max<std::size_t>(xs.size(), 2) - 1);
    }
    return cov;
}

std::vector<const LatentGrid*> pointers(const std::vector<LatentGrid>& xs) {
    std::vector<const LatentGrid*> out;
    for (const auto& x : xs) {
        out.push_back(&x);
    }
    return out;
}

}  // namespace

double sliced_wasserstein(const std::vector<LatentGrid>& a, const std::vector<LatentGrid>& b,
                          std::size_t projections, Rng& rng) {
    if (a.size() < 2 || b.size() < 2) {
        throw DomainError("sliced_wasserstein: need at least two samples per set");
    }
    const GridShape shape = a.front().shape();
    for (const auto* set : {&a, &b}) {
        for (const auto& x : *set) {
            if (!(x.shape() == shape)) {
                throw DomainError("sliced_wasserstein: grid shapes differ");
            }
        }
    }
    if (projections < 1) {
        throw DomainError("sliced_wasserstein: need at least one projection");
    }
    const auto dirs = random_projections(shape.numel(), projections, rng);
    double total = 0.0;
    for (const auto& dir : dirs) {
        total += wasserstein2_1d(project(a, dir), project(b, dir));
    }
    return total / static_cast<double>(projections);
}

nlohmann::json MetricReport::to_json() const {
    nlohmann::json classes = nlohmann::json::array();
    for (const ClassMetrics& c : per_class) {
        classes.push_back({{"label", c.label},
                           {"generated", c.generated},
                           {"reference", c.reference},
                           {"sliced_w2", c.sliced_w2},
                           {"mean_err", c.mean_err},
                           {"mean_z_rms", c.mean_z_rms},
                           {"mean_z_max", c.mean_z_max}});
    }
    return {{"sliced_w2", sliced_w2}, {"mean_err", mean_err},     {"cov_err", cov_err},
            {"per_class", classes},   {"config_hash", config_hash}, {"seed", seed},
            {"wall_seconds", wall_seconds}};
}

MetricReport compare_samples(const std::vector<LatentGrid>& generated, const std::vector<int>& generated_labels,
                             const std::vector<LatentGrid>& reference, const std::vector<int>& reference_labels,
                             std::size_t projections, std::uint64_t projection_seed) {
    if (generated.size() != generated_labels.size() || reference.size() != reference_labels.size()) {
        throw DomainError("compare_samples: label count mismatch");
    }
    MetricReport rep;
    {
        Rng rng(projection_seed);
        rep.sliced_w2 = sliced_wasserstein(generated, reference, projections, rng);
    }
    const std::size_t dim = generated.front().shape().numel();
    const auto gp = pointers(generated);
    const auto rp = pointers(reference);
    const auto mg = mean_of(gp, dim);
    const auto mr = mean_of(rp, dim);
    double sq = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
        sq += (mg[k] - mr[k]) * (mg[k] - mr[k]);
    }
    rep.mean_err = std::sqrt(sq / static_cast<double>(dim));
    const auto cg = covariance_of(gp, mg);
    const auto cr = covariance_of(rp, mr);
    double fro = 0.0;
    for (std::size_t k = 0; k < cg.size(); ++k) {
        fro += (cg[k] - cr[k]) * (cg[k] - cr[k]);
    }
    rep.cov_err = std::sqrt(fro) / static_cast<double>(dim);

    std::map<int, std::pair<std::vector<LatentGrid>, std::vector<LatentGrid>>> by_class;
    for (std::size_t i = 0; i < generated.size(); ++i) {
        by_class[generated_labels[i]].first.push_back(generated[i]);
    }
    for (std::size_t i = 0; i < reference.size(); ++i) {
        by_class[reference_labels[i]].second.push_back(reference[i]);
    }
    for (const auto& [label, sets] : by_class) {
        ClassMetrics cm;
        cm.label = label;
        cm.generated = sets.first.size();
        cm.reference = sets.second.size();
        if (cm.generated >= 2 && cm.reference >= 2) {
            Rng rng(projection_seed);
            cm.sliced_w2 = sliced_wasserstein(sets.first, sets.second, projections, rng);
            const auto g = pointers(sets.first);
            const auto r = pointers(sets.second);
            const auto m1 = mean_of(g, dim);
            const auto m2 = mean_of(r, dim);
            const auto v1 = variance_of(g, m1);
            const auto v2 = variance_of(r, m2);
            double e2 = 0.0;
            double z2 = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                const double d = m1[k] - m2[k];
                const double se = std::sqrt(v1[k] / static_cast<double>(cm.generated) +
                                            v2[k] / static_cast<double>(cm.reference));
                const double z = se > 0.0 ? d / se : (d == 0.0 ? 0.0 : INFINITY);
                e2 += d * d;
                z2 += z * z;
                cm.mean_z_max = std::max(cm.mean_z_max, std::abs(z));
            }
            cm.mean_err = std::sqrt(e2 / static_cast<double>(dim));
            cm.mean_z_rms = std::sqrt(z2 / static_cast<double>(dim));
        }
        rep.per_class.push_back(cm);
    }
    return rep;
}

std::vector<int> balanced_labels(std::size_t count, std::size_t num_classes) {
    std::vector<int> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        out[i] = static_cast<int>(i % num_classes);
    }
    return out;
}

Dataset heldout_dataset(const RunConfig& config) {
    DatasetSpec spec = config.train.data;
    spec.seed = spec.seed + config.eval.heldout_seed_offset;
    spec.size = config.eval.heldout_size;
    return synth_dataset(spec);
}

MetricReport evaluate_model(const DenoiserModel& model, const RunConfig& config, const Dataset& heldout) {
    const auto t0 = std::chrono::steady_clock::now();
    const EntityLayout layout = build_layout(config.train.layout, config.train.data.grid);
    const std::vector<int> labels = balanced_labels(config.eval.samples, config.train.data.num_classes);
    Rng rng(config.sample.seed);
    const auto generated = batch_generate(model, layout, config.sample, labels, rng);
    std::vector<LatentGrid> ref;
    std::vector<int> ref_labels;
    for (const Sample& s : heldout) {
        ref.push_back(s.latent);
        ref_labels.push_back(s.label);
    }
    MetricReport rep =
        compare_samples(generated, labels, ref, ref_labels, config.eval.projections, config.eval.projection_seed);
    rep.config_hash = config_hash(config);
    rep.seed = config.train.seed;
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

}  // namespace xar
