#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>

#include "xar/errors.hpp"
#include "xar/eval.hpp"

namespace xar {

namespace {

std::size_t parse_count(const std::string& s, const char* what) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
        v = std::stoul(s, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != s.size()) {
        throw ConfigError(std::string("bad ") + what + " value '" + s + "'");
    }
    return v;
}

std::vector<std::size_t> parse_list(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(parse_count(item, "scale"));
    }
    return out;
}

}  // namespace

std::string_view to_string(AblationAxis axis) {
    switch (axis) {
        case AblationAxis::CellSize: return "cell_size";
        case AblationAxis::TimePolicy: return "time_policy";
        case AblationAxis::EntityKind: return "entity_kind";
        case AblationAxis::Steps: return "steps";
    }
    return "?";
}

AblationAxis parse_ablation_axis(std::string_view name) {
    for (auto a : {AblationAxis::CellSize, AblationAxis::TimePolicy, AblationAxis::EntityKind, AblationAxis::Steps}) {
        if (to_string(a) == name) {
            return a;
        }
    }
    throw ConfigError("unknown ablation axis '" + std::string(name) + "'");
}

std::vector<std::string> default_axis_values(AblationAxis axis) {
    switch (axis) {
        case AblationAxis::CellSize: return {"1", "2", "4"};
        case AblationAxis::TimePolicy: return {"clean", "increasing", "decreasing", "random"};
        case AblationAxis::EntityKind: return {"token", "cell:2", "subsample:2", "scale", "image"};
        case AblationAxis::Steps: return {"1", "5", "25", "50"};
    }
    return {};
}

RunConfig apply_axis(const RunConfig& base, AblationAxis axis, const std::string& value) {
    RunConfig cfg = base;
    switch (axis) {
        case AblationAxis::CellSize:
            cfg.train.layout = LayoutSpec{};
            cfg.train.layout.kind = EntityKind::Cell;
            cfg.train.layout.cell_size = parse_count(value, "cell_size");
            break;
        case AblationAxis::TimePolicy:
            cfg.train.policy = parse_time_policy(value);
            break;
        case AblationAxis::EntityKind: {
            const auto colon = value.find(':');
            const std::string kind = value.substr(0, colon);
            const std::string arg = colon == std::string::npos ? "" : value.substr(colon + 1);
            LayoutSpec spec;
            spec.kind = parse_entity_kind(kind);
            switch (spec.kind) {
                case EntityKind::Cell:
                    spec.cell_size = arg.empty() ? 2 : parse_count(arg, "cell_size");
                    break;
                case EntityKind::Subsample:
                    spec.distance = arg.empty() ? 2 : parse_count(arg, "distance");
                    break;
                case EntityKind::Scale:
                    if (arg.find(',') != std::string::npos) {
                        spec.scales = parse_list(arg);
                    } else {
                        spec.scale_levels = arg.empty() ? 0 : parse_count(arg, "scale_levels");
                    }
                    if (spec.scales.empty() && spec.scale_levels == 0) {
                        // halve down to 1x1 or the first odd size
                        std::size_t h = cfg.train.data.grid.h;
                        spec.scale_levels = 1;
                        while (h % 2 == 0) {
                            h /= 2;
                            ++spec.scale_levels;
                        }
                    }
                    break;
                case EntityKind::Token:
                case EntityKind::Image:
                    if (!arg.empty()) {
                        throw ConfigError("entity kind '" + kind + "' takes no parameter");
                    }
                    break;
            }
            cfg.train.layout = spec;
            break;
        }
        case AblationAxis::Steps: {
            const std::size_t steps = parse_count(value, "steps");
            if (steps < 1) {
                throw ConfigError("steps must be >= 1");
            }
            cfg.sample.steps = static_cast<int>(steps);
            break;
        }
    }
    // Validates the value against the grid before any training starts.
    const EntityLayout layout = build_layout(cfg.train.layout, cfg.train.data.grid);
    cfg.train.model.max_tokens = std::max(cfg.train.model.max_tokens, layout.total_tokens());
    return cfg;
}

MetricReport train_and_evaluate(const RunConfig& config, const std::string& out_dir, std::ostream* train_log) {
    const Dataset data = synth_dataset(config.train.data);
    TrainOptions opts;
    opts.out_dir = out_dir;
    opts.config_text = to_config_text(config);
    opts.log = train_log;
    const TrainResult result = train(config.train, data, opts);
    return evaluate_model(result.state.model, config, heldout_dataset(config));
}

AblationTable ablate(const RunConfig& base, AblationAxis axis, const std::vector<std::string>& values,
                     const std::vector<std::uint64_t>& seeds, const AblateOptions& options) {
    if (values.empty() || seeds.empty()) {
        throw ConfigError("ablate: need at least one value and one seed");
    }
    AblationTable table;
    table.axis = axis;
    // Steps only changes sampling, so models are shared across values.
    std::map<std::string, std::shared_ptr<const DenoiserModel>> models;
    Dataset heldout;
    bool have_heldout = false;

    for (const std::string& value : values) {
        AblationRow row;
        row.value = value;
        for (const std::uint64_t seed : seeds) {
            AblationRun run;
            run.seed = seed;
            try {
                RunConfig cfg = apply_axis(base, axis, value);
                cfg.train.seed = seed;
                cfg.sample.seed = seed;
                if (!have_heldout) {
                    heldout = heldout_dataset(cfg);
                    have_heldout = true;
                }
                std::string dir;
                if (!options.out_dir.empty()) {
                    dir = (std::filesystem::path(options.out_dir) /
                           (std::string(to_string(axis)) + "_" + value + "_s" + std::to_string(seed)))
                              .string();
                    std::replace(dir.begin(), dir.end(), ':', '-');
                }
                RunConfig train_only = cfg;
                train_only.sample = SampleConfig{};
                train_only.eval = EvalConfig{};
                const std::string key = to_config_text(train_only);
                auto it = models.find(key);
                if (it == models.end()) {
                    const Dataset data = synth_dataset(cfg.train.data);
                    TrainOptions topts;
                    topts.out_dir = dir;
                    topts.config_text = to_config_text(cfg);
                    TrainResult result = train(cfg.train, data, topts);
                    it = models.emplace(key, std::make_shared<const DenoiserModel>(std::move(result.state.model)))
                             .first;
                }
                run.report = evaluate_model(*it->second, cfg, heldout);
                run.ok = std::isfinite(run.report.sliced_w2);
                if (!run.ok) {
                    run.error = "non-finite metric";
                }
            } catch (const std::exception& e) {
                run.ok = false;
                run.error = e.what();
            }
            if (options.log) {
                nlohmann::json line = {{"axis", to_string(axis)}, {"value", value}, {"seed", seed}, {"ok", run.ok}};
                if (run.ok) {
                    line["report"] = run.report.to_json();
                } else {
                    line["error"] = run.error;
                }
                *options.log << line.dump() << "\n" << std::flush;
            }
            row.runs.push_back(std::move(run));
        }
        std::vector<double> xs;
        for (const auto& r : row.runs) {
            if (r.ok) {
                xs.push_back(r.report.sliced_w2);
            }
        }
        if (!xs.empty()) {
            double m = 0.0;
            for (double x : xs) {
                m += x;
            }
            m /= static_cast<double>(xs.size());
            double v = 0.0;
            for (double x : xs) {
                v += (x - m) * (x - m);
            }
            row.mean_sliced_w2 = m;
            row.std_sliced_w2 = xs.size() > 1 ? std::sqrt(v / static_cast<double>(xs.size() - 1)) : 0.0;
        } else {
            row.mean_sliced_w2 = INFINITY;
        }
        table.rows.push_back(std::move(row));
    }

    std::vector<std::size_t> order(table.rows.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return table.rows[a].mean_sliced_w2 < table.rows[b].mean_sliced_w2;
    });
    for (std::size_t r = 0; r < order.size(); ++r) {
        table.rows[order[r]].rank = r + 1;
    }
    return table;
}

std::string AblationTable::to_text() const {
    std::ostringstream os;
    os << std::left << std::setw(16) << to_string(axis) << std::right << std::setw(6) << "rank" << std::setw(14)
       << "sliced_w2" << std::setw(12) << "std" << std::setw(8) << "ok" << "\n";
    for (const AblationRow& row : rows) {
        std::size_t ok = 0;
        for (const auto& r : row.runs) {
            ok += r.ok ? 1 : 0;
        }
        os << std::left << std::setw(16) << row.value << std::right << std::setw(6) << row.rank << std::setw(14)
           << std::fixed << std::setprecision(5) << row.mean_sliced_w2 << std::setw(12) << row.std_sliced_w2
           << std::setw(8) << (std::to_string(ok) + "/" + std::to_string(row.runs.size())) << "\n";
        for (const auto& r : row.runs) {
            if (!r.ok) {
                os << "  seed " << r.seed << " failed: " << r.error << "\n";
            }
        }
    }
    return os.str();
}

}  // namespace xar
