#include <malloc.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "xar/checkpoint.hpp"
#include "xar/config.hpp"
#include "xar/errors.hpp"
#include "xar/eval.hpp"
#include "xar/sampling.hpp"
#include "xar/selftest.hpp"
#include "xar/training.hpp"

namespace fs = std::filesystem;
using namespace xar;

namespace {

fs::path output_root() {
    const char* env = std::getenv("XAR_OUTPUT_ROOT");
    return env && *env ? fs::path(env) : fs::path();
}

fs::path resolve_out(const std::string& out, const std::string& fallback) {
    fs::path p = out.empty() ? fs::path("runs") / fallback : fs::path(out);
    if (p.is_relative() && !output_root().empty()) {
        p = output_root() / p;
    }
    fs::create_directories(p);
    return p;
}

fs::path resolve_in(const std::string& path) {
    fs::path p(path);
    if (!fs::exists(p) && p.is_relative() && !output_root().empty() && fs::exists(output_root() / p)) {
        return output_root() / p;
    }
    return p;
}

std::string timestamp() {
    const std::time_t now = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot write " + path.string());
    }
    f << text;
}

void write_provenance(const fs::path& dir, const std::string& command, const RunConfig& cfg,
                      const std::vector<std::string>& args) {
    write_text(dir / "config.cfg", to_config_text(cfg));
    nlohmann::json j = {{"command", command},          {"args", args},
                        {"git_hash", build_git_hash()}, {"config_hash", config_hash(cfg)},
                        {"config_file", "config.cfg"},  {"created", timestamp()}};
    write_text(dir / "provenance.json", j.dump(2) + "\n");
}

RunConfig config_or_default(const std::string& path) {
    return path.empty() ? RunConfig{} : load_run_config(path);
}

// Samples tiled row-major into one 8-bit greyscale image; channels sit side by side.
void write_pgm(const fs::path& path, const std::vector<LatentGrid>& samples) {
    const GridShape s = samples.front().shape();
    const std::size_t n = samples.size();
    const std::size_t cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
    const std::size_t rows = (n + cols - 1) / cols;
    const std::size_t zoom = std::max<std::size_t>(1, 32 / std::max(s.h, s.w * s.c));
    const std::size_t tile_w = s.w * s.c * zoom + 1;
    const std::size_t tile_h = s.h * zoom + 1;
    const std::size_t W = cols * tile_w + 1;
    const std::size_t H = rows * tile_h + 1;
    double lo = INFINITY;
    double hi = -INFINITY;
    for (const auto& g : samples) {
        for (double v : g.values()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    const double range = hi > lo ? hi - lo : 1.0;
    std::vector<unsigned char> img(W * H, 0);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t oy = (k / cols) * tile_h + 1;
        const std::size_t ox = (k % cols) * tile_w + 1;
        for (std::size_t y = 0; y < s.h * zoom; ++y) {
            for (std::size_t x = 0; x < s.w * s.c * zoom; ++x) {
                const std::size_t ch = x / (s.w * zoom);
                const std::size_t j = (x % (s.w * zoom)) / zoom;
                const double v = samples[k].at(y / zoom, j, ch);
                img[(oy + y) * W + ox + x] = static_cast<unsigned char>(std::lround(255.0 * (v - lo) / range));
            }
        }
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot write " + path.string());
    }
    f << "P5\n" << W << " " << H << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
}

std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

struct TrainArgs {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& args) {
    RunConfig cfg = config_or_default(a.config);
    if (a.seed) {
        cfg.train.seed = *a.seed;
    }
    if (a.epochs) {
        cfg.train.epochs = *a.epochs;
    }
    const fs::path dir = resolve_out(a.out, cfg.name);
    write_provenance(dir, "train", cfg, args);
    std::ofstream log(dir / "metrics.jsonl");
    TrainOptions opts;
    opts.out_dir = dir.string();
    opts.config_text = to_config_text(cfg);
    opts.log = &log;
    const TrainResult r = train(cfg.train, synth_dataset(cfg.train.data), opts);
    std::cout << "checkpoint " << r.checkpoint_path << "\n";
    if (!r.metrics.empty()) {
        std::cout << "final loss " << r.metrics.back().loss << "\n";
    }
    return 0;
}

struct SampleArgs {
    std::string checkpoint;
    std::optional<int> label;
    std::size_t count = 16;
    std::optional<int> steps;
    std::string mode;
    std::optional<double> churn;
    std::optional<double> guidance;
    std::optional<std::uint64_t> seed;
    std::string out;
};

RunConfig checkpoint_config(const LoadedCheckpoint& ck) {
    if (ck.config_text.empty()) {
        throw ConfigError("checkpoint carries no run config");
    }
    return parse_run_config(ck.config_text);
}

int cmd_sample(const SampleArgs& a, const std::vector<std::string>& args) {
    const LoadedCheckpoint ck = load_checkpoint(resolve_in(a.checkpoint).string());
    RunConfig cfg = checkpoint_config(ck);
    SampleConfig& sc = cfg.sample;
    if (a.label) {
        sc.label = *a.label < 0 ? std::nullopt : a.label;
    }
    if (a.steps) {
        sc.steps = *a.steps;
    }
    if (!a.mode.empty()) {
        sc.mode = parse_solver_mode(a.mode);
    }
    if (a.churn) {
        sc.churn = *a.churn;
    }
    if (a.guidance) {
        sc.guidance = *a.guidance;
    }
    if (a.seed) {
        sc.seed = *a.seed;
    }
    const fs::path dir = resolve_out(a.out, cfg.name + "/samples");
    write_provenance(dir, "sample", cfg, args);
    const EntityLayout layout = build_layout(cfg.train.layout, cfg.train.data.grid);
    Rng rng(sc.seed);
    const auto samples = batch_generate(ck.state.model, layout, sc, a.count, rng);
    write_pgm(dir / "samples.pgm", samples);
    Dataset ds;
    for (const auto& g : samples) {
        ds.push_back(Sample{g, sc.label.value_or(kNullLabel)});
    }
    save_dataset((dir / "samples.bin").string(), ds, sc.seed);
    std::cout << "wrote " << (dir / "samples.pgm").string() << " and samples.bin\n";
    return 0;
}

struct EvalArgs {
    std::string config;
    std::string checkpoint;
    std::string out;
    std::optional<std::size_t> samples;
};

int cmd_eval(const EvalArgs& a, const std::vector<std::string>& args) {
    std::optional<LoadedCheckpoint> ck;
    RunConfig cfg;
    if (!a.checkpoint.empty()) {
        ck = load_checkpoint(resolve_in(a.checkpoint).string());
        cfg = a.config.empty() ? checkpoint_config(*ck) : load_run_config(a.config);
    } else {
        cfg = config_or_default(a.config);
    }
    if (a.samples) {
        cfg.eval.samples = *a.samples;
    }
    const fs::path dir = resolve_out(a.out, cfg.name + "/eval");
    write_provenance(dir, "eval", cfg, args);
    MetricReport rep;
    if (ck) {
        rep = evaluate_model(ck->state.model, cfg, heldout_dataset(cfg));
    } else {
        std::ofstream log(dir / "train_metrics.jsonl");
        rep = train_and_evaluate(cfg, dir.string(), &log);
    }
    std::ofstream(dir / "metrics.jsonl", std::ios::app) << rep.to_json().dump() << "\n";
    std::cout << "sliced_w2 " << rep.sliced_w2 << "\nmean_err " << rep.mean_err << "\ncov_err " << rep.cov_err
              << "\n";
    return 0;
}

struct AblateArgs {
    std::string config;
    std::string axis;
    std::string values;
    std::string seeds = "0,1,2";
    std::string out;
};

int cmd_ablate(const AblateArgs& a, const std::vector<std::string>& args) {
    const RunConfig cfg = config_or_default(a.config);
    const AblationAxis axis = parse_ablation_axis(a.axis);
    const std::vector<std::string> values = a.values.empty() ? default_axis_values(axis) : split(a.values);
    std::vector<std::uint64_t> seeds;
    for (const auto& s : split(a.seeds)) {
        seeds.push_back(std::stoull(s));
    }
    const fs::path dir = resolve_out(a.out, cfg.name + "/ablate_" + a.axis);
    write_provenance(dir, "ablate", cfg, args);
    std::ofstream log(dir / "runs.jsonl");
    AblateOptions opts;
    opts.log = &log;
    opts.out_dir = dir.string();
    const AblationTable table = ablate(cfg, axis, values, seeds, opts);
    const std::string text = table.to_text();
    write_text(dir / "table.txt", text);
    std::cout << text;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    // keep large activation buffers on the heap between steps
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    std::vector<std::string> args(argv, argv + argc);
    CLI::App app{"Next-entity autoregressive flow-matching toolkit"};
    app.require_subcommand(1);

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "train a denoiser from a run config");
    train_cmd->add_option("--config", ta.config, "run config file");
    train_cmd->add_option("--out", ta.out, "output directory");
    train_cmd->add_option("--seed", ta.seed, "override train.seed");
    train_cmd->add_option("--epochs", ta.epochs, "override train.epochs");

    SampleArgs sa;
    auto* sample_cmd = app.add_subcommand("sample", "draw samples from a checkpoint");
    sample_cmd->add_option("--checkpoint", sa.checkpoint, "checkpoint file")->required();
    sample_cmd->add_option("--label", sa.label, "class label, -1 for unconditional");
    sample_cmd->add_option("--count", sa.count, "number of samples");
    sample_cmd->add_option("--steps", sa.steps, "integration steps per entity");
    sample_cmd->add_option("--mode", sa.mode, "ode or sde");
    sample_cmd->add_option("--churn", sa.churn, "SDE noise scale");
    sample_cmd->add_option("--guidance", sa.guidance, "classifier-free guidance scale");
    sample_cmd->add_option("--seed", sa.seed, "sampling seed");
    sample_cmd->add_option("--out", sa.out, "output directory");

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("eval", "sliced-W2 and moment metrics against held-out data");
    eval_cmd->add_option("--config", ea.config, "run config (trains first when no checkpoint is given)");
    eval_cmd->add_option("--checkpoint", ea.checkpoint, "checkpoint file");
    eval_cmd->add_option("--out", ea.out, "output directory");
    eval_cmd->add_option("--samples", ea.samples, "generated sample count");

    AblateArgs aa;
    auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate one model per axis value and seed");
    ablate_cmd->add_option("--config", aa.config, "base run config");
    ablate_cmd->add_option("--axis", aa.axis, "cell_size, time_policy, entity_kind or steps")->required();
    ablate_cmd->add_option("--values", aa.values, "comma-separated values (default: the axis's standard set)");
    ablate_cmd->add_option("--seeds", aa.seeds, "comma-separated seeds");
    ablate_cmd->add_option("--out", aa.out, "output directory");

    auto* selftest_cmd = app.add_subcommand("selftest", "run the invariant suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*train_cmd) {
            return cmd_train(ta, args);
        }
        if (*sample_cmd) {
            return cmd_sample(sa, args);
        }
        if (*eval_cmd) {
            return cmd_eval(ea, args);
        }
        if (*ablate_cmd) {
            return cmd_ablate(aa, args);
        }
        if (*selftest_cmd) {
            return run_selftest(std::cout) ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
