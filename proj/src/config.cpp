#include "xar/config.hpp"

#include <fstream>
#include <set>
#include <iomanip>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <openssl/evp.h>

#include "xar/errors.hpp"

#ifndef XAR_GIT_HASH
#define XAR_GIT_HASH "unknown"
#endif

namespace xar {

namespace pt = boost::property_tree;

namespace {

std::vector<std::size_t> parse_size_list(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            out.push_back(std::stoull(item));
        }
    }
    return out;
}

template <class T>
void read(const pt::ptree& tree, const std::string& key, T& dst) {
    if (auto v = tree.get_optional<T>(key)) {
        dst = *v;
    }
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
    pt::ptree tree;
    try {
        std::istringstream is(text);
        pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    static const std::set<std::string> known = {"run", "train", "layout", "model", "data", "sample", "eval"};
    for (const auto& [section, _] : tree) {
        if (!known.count(section)) {
            throw ConfigError("unknown config section [" + section + "]");
        }
    }

    RunConfig rc;
    try {
        read(tree, "run.name", rc.name);

        TrainConfig& t = rc.train;
        if (auto p = tree.get_optional<std::string>("train.policy")) {
            t.policy = parse_time_policy(*p);
        }
        read(tree, "train.epochs", t.epochs);
        read(tree, "train.warmup_epochs", t.warmup_epochs);
        read(tree, "train.batch_size", t.batch_size);
        read(tree, "train.peak_lr", t.peak_lr);
        read(tree, "train.end_lr", t.end_lr);
        read(tree, "train.weight_decay", t.weight_decay);
        read(tree, "train.beta1", t.beta1);
        read(tree, "train.beta2", t.beta2);
        read(tree, "train.grad_clip", t.grad_clip);
        read(tree, "train.seed", t.seed);
        read(tree, "train.checkpoint_every", t.checkpoint_every);
        read(tree, "train.log_every", t.log_every);

        LayoutSpec& l = t.layout;
        if (auto k = tree.get_optional<std::string>("layout.kind")) {
            l.kind = parse_entity_kind(*k);
        }
        read(tree, "layout.cell_size", l.cell_size);
        read(tree, "layout.distance", l.distance);
        read(tree, "layout.scale_levels", l.scale_levels);
        if (auto s = tree.get_optional<std::string>("layout.scales")) {
            l.scales = parse_size_list(*s);
        }

        DatasetSpec& d = t.data;
        if (auto k = tree.get_optional<std::string>("data.kind")) {
            d.kind = parse_dataset_kind(*k);
        }
        read(tree, "data.h", d.grid.h);
        read(tree, "data.w", d.grid.w);
        read(tree, "data.c", d.grid.c);
        read(tree, "data.num_classes", d.num_classes);
        read(tree, "data.size", d.size);
        read(tree, "data.mean_scale", d.mean_scale);
        read(tree, "data.sigma", d.sigma);
        read(tree, "data.patch", d.patch);
        read(tree, "data.component_seed", d.component_seed);
        read(tree, "data.seed", d.seed);

        DenoiserConfig& m = t.model;
        read(tree, "model.depth", m.depth);
        read(tree, "model.width", m.width);
        read(tree, "model.heads", m.heads);
        read(tree, "model.max_tokens", m.max_tokens);
        read(tree, "model.mlp_ratio", m.mlp_ratio);
        read(tree, "model.time_freq_dim", m.time_freq_dim);
        read(tree, "model.dropout", m.dropout);
        read(tree, "model.attn_dropout", m.attn_dropout);
        read(tree, "model.label_dropout", m.label_dropout);
        m.token_dim = d.grid.c;
        m.num_classes = d.num_classes;

        SampleConfig& s = rc.sample;
        read(tree, "sample.steps", s.steps);
        if (auto mode = tree.get_optional<std::string>("sample.mode")) {
            s.mode = parse_solver_mode(*mode);
        }
        read(tree, "sample.churn", s.churn);
        read(tree, "sample.guidance", s.guidance);
        if (auto lab = tree.get_optional<std::string>("sample.label")) {
            if (*lab == "none" || lab->empty()) {
                s.label.reset();
            } else {
                s.label = std::stoi(*lab);
            }
        }
        read(tree, "sample.seed", s.seed);
        read(tree, "sample.prefix_cache", s.prefix_cache);

        EvalConfig& e = rc.eval;
        read(tree, "eval.samples", e.samples);
        read(tree, "eval.heldout_size", e.heldout_size);
        read(tree, "eval.projections", e.projections);
        read(tree, "eval.projection_seed", e.projection_seed);
    } catch (const pt::ptree_bad_data& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }
    rc.train.validate();
    rc.sample.validate();
    return rc;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw IoError("cannot open config " + path);
    }
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_run_config(ss.str());
}

std::string to_config_text(const RunConfig& rc) {
    const TrainConfig& t = rc.train;
    const DenoiserConfig& m = t.model;
    const DatasetSpec& d = t.data;
    const SampleConfig& s = rc.sample;
    std::ostringstream os;
    os << "[run]\nname = " << rc.name << "\n\n";
    os << "[train]\n"
       << "policy = " << to_string(t.policy) << "\n"
       << "epochs = " << t.epochs << "\n"
       << "warmup_epochs = " << t.warmup_epochs << "\n"
       << "batch_size = " << t.batch_size << "\n"
       << "peak_lr = " << fmt_double(t.peak_lr) << "\n"
       << "end_lr = " << fmt_double(t.end_lr) << "\n"
       << "weight_decay = " << fmt_double(t.weight_decay) << "\n"
       << "beta1 = " << fmt_double(t.beta1) << "\n"
       << "beta2 = " << fmt_double(t.beta2) << "\n"
       << "grad_clip = " << fmt_double(t.grad_clip) << "\n"
       << "seed = " << t.seed << "\n"
       << "checkpoint_every = " << t.checkpoint_every << "\n"
       << "log_every = " << t.log_every << "\n\n";
    os << "[layout]\n" << t.layout.to_config() << "\n";
    os << "[model]\n"
       << "depth = " << m.depth << "\n"
       << "width = " << m.width << "\n"
       << "heads = " << m.heads << "\n"
       << "max_tokens = " << m.max_tokens << "\n"
       << "mlp_ratio = " << m.mlp_ratio << "\n"
       << "time_freq_dim = " << m.time_freq_dim << "\n"
       << "dropout = " << fmt_double(m.dropout) << "\n"
       << "attn_dropout = " << fmt_double(m.attn_dropout) << "\n"
       << "label_dropout = " << fmt_double(m.label_dropout) << "\n\n";
    os << "[data]\n"
       << "kind = " << to_string(d.kind) << "\n"
       << "h = " << d.grid.h << "\n"
       << "w = " << d.grid.w << "\n"
       << "c = " << d.grid.c << "\n"
       << "num_classes = " << d.num_classes << "\n"
       << "size = " << d.size << "\n"
       << "mean_scale = " << fmt_double(d.mean_scale) << "\n"
       << "sigma = " << fmt_double(d.sigma) << "\n"
       << "patch = " << d.patch << "\n"
       << "component_seed = " << d.component_seed << "\n"
       << "seed = " << d.seed << "\n\n";
    os << "[sample]\n"
       << "steps = " << s.steps << "\n"
       << "mode = " << to_string(s.mode) << "\n"
       << "churn = " << fmt_double(s.churn) << "\n"
       << "guidance = " << fmt_double(s.guidance) << "\n"
       << "label = " << (s.label ? std::to_string(*s.label) : std::string("none")) << "\n"
       << "seed = " << s.seed << "\n"
       << "prefix_cache = " << (s.prefix_cache ? "true" : "false") << "\n\n";
    os << "[eval]\n"
       << "samples = " << rc.eval.samples << "\n"
       << "heldout_size = " << rc.eval.heldout_size << "\n"
       << "projections = " << rc.eval.projections << "\n"
       << "projection_seed = " << rc.eval.projection_seed << "\n";
    return os.str();
}

std::string sha256_hex(const std::string& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw IoError("sha256 failed");
    }
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) {
        os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    }
    return os.str();
}

std::string file_sha256(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open " + path);
    }
    std::stringstream ss;
    ss << is.rdbuf();
    return sha256_hex(ss.str());
}

std::string config_hash(const RunConfig& config) {
    return sha256_hex(to_config_text(config));
}

const char* build_git_hash() {
    return XAR_GIT_HASH;
}

}  // namespace xar
