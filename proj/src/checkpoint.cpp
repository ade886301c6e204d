#include "xar/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

#include "xar/errors.hpp"

namespace xar {

namespace {

constexpr char kMagic[8] = {'X', 'A', 'R', 'C', 'K', 'P', 'T', '1'};

nlohmann::json model_config_json(const DenoiserConfig& c) {
    return {{"depth", c.depth},
            {"width", c.width},
            {"heads", c.heads},
            {"token_dim", c.token_dim},
            {"max_tokens", c.max_tokens},
            {"num_classes", c.num_classes},
            {"mlp_ratio", c.mlp_ratio},
            {"time_freq_dim", c.time_freq_dim},
            {"dropout", c.dropout},
            {"attn_dropout", c.attn_dropout},
            {"label_dropout", c.label_dropout}};
}

DenoiserConfig model_config_from(const nlohmann::json& j) {
    DenoiserConfig c;
    c.depth = j.at("depth");
    c.width = j.at("width");
    c.heads = j.at("heads");
    c.token_dim = j.at("token_dim");
    c.max_tokens = j.at("max_tokens");
    c.num_classes = j.at("num_classes");
    c.mlp_ratio = j.at("mlp_ratio");
    c.time_freq_dim = j.at("time_freq_dim");
    c.dropout = j.at("dropout");
    c.attn_dropout = j.at("attn_dropout");
    c.label_dropout = j.at("label_dropout");
    return c;
}

void write_doubles(std::ostream& os, const std::vector<double>& v) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_doubles(std::istream& is, std::vector<double>& v) {
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!is) {
        throw IoError("checkpoint truncated");
    }
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainState& st, const std::string& config_text) {
    const ParamSet& params = st.model.params();
    nlohmann::json tensors = nlohmann::json::array();
    for (const ParamInfo& info : params.infos()) {
        tensors.push_back({{"name", info.name}, {"rows", info.rows}, {"cols", info.cols}, {"offset", info.offset}});
    }
    const nlohmann::json header{
        {"format", "xar-checkpoint"},
        {"version", 1},
        {"model", model_config_json(st.model.config())},
        {"tensors", tensors},
        {"parameter_count", params.count()},
        {"step", st.step},
        {"epoch", st.epoch},
        {"optimizer",
         {{"t", st.optimizer.t},
          {"beta1", st.optimizer.beta1},
          {"beta2", st.optimizer.beta2},
          {"eps", st.optimizer.eps},
          {"weight_decay", st.optimizer.weight_decay}}},
        {"rng_state", st.rng.state()},
        {"config", config_text},
    };
    const std::string text = header.dump();
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw IoError("cannot open " + path + " for writing");
    }
    os.write(kMagic, sizeof kMagic);
    const std::uint64_t len = text.size();
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    write_doubles(os, params.values());
    write_doubles(os, st.optimizer.m);
    write_doubles(os, st.optimizer.v);
    if (!os) {
        throw IoError("failed writing checkpoint " + path);
    }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open checkpoint " + path);
    }
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kMagic, sizeof magic) != 0) {
        throw IoError(path + " is not an xar checkpoint");
    }
    std::uint64_t len = 0;
    is.read(reinterpret_cast<char*>(&len), sizeof len);
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (!is) {
        throw IoError("checkpoint header truncated");
    }
    const nlohmann::json h = nlohmann::json::parse(text);
    const DenoiserConfig mc = model_config_from(h.at("model"));
    DenoiserModel model(mc, 0);
    ParamSet& params = model.params();
    const auto& tensors = h.at("tensors");
    if (tensors.size() != params.infos().size() || h.at("parameter_count").get<std::size_t>() != params.count()) {
        throw IoError("checkpoint tensor table does not match its model config");
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const ParamInfo& info = params.infos()[i];
        if (tensors[i].at("name") != info.name || tensors[i].at("rows") != info.rows ||
            tensors[i].at("cols") != info.cols || tensors[i].at("offset") != info.offset) {
            throw IoError("checkpoint tensor '" + info.name + "' has an unexpected layout");
        }
    }
    read_doubles(is, params.values());
    const auto& o = h.at("optimizer");
    AdamW opt(params.count(), o.at("beta1"), o.at("beta2"), o.at("eps"), o.at("weight_decay"));
    opt.t = o.at("t");
    read_doubles(is, opt.m);
    read_doubles(is, opt.v);
    Rng rng;
    rng.set_state(h.at("rng_state").get<std::string>());
    return LoadedCheckpoint{
        TrainState{std::move(model), std::move(opt), rng, h.at("step").get<std::size_t>(), h.at("epoch").get<std::size_t>()},
        h.at("config").get<std::string>()};
}

}  // namespace xar
