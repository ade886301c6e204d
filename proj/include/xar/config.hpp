#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "xar/sampling.hpp"
#include "xar/training.hpp"

namespace xar {

struct EvalConfig {
    std::size_t samples = 2048;      // generated samples per evaluation
    std::size_t heldout_size = 2048;
    std::size_t projections = 128;
    std::uint64_t projection_seed = 7;
    std::uint64_t heldout_seed_offset = 1000003;  // held-out data seed = data.seed + offset
};

// Everything a run needs, stored as an INI-style text file:
//   [run] name
//   [train] policy, epochs, warmup_epochs, batch_size, peak_lr, end_lr, weight_decay,
//           beta1, beta2, grad_clip, seed, checkpoint_every, log_every
//   [layout] kind, cell_size | distance | scales | scale_levels
//   [model] depth, width, heads, max_tokens, mlp_ratio, time_freq_dim, dropout,
//           attn_dropout, label_dropout   (token_dim and num_classes follow [data])
//   [data] kind, h, w, c, num_classes, size, mean_scale, sigma, patch, component_seed, seed
//   [sample] steps, mode, churn, guidance, label, seed, prefix_cache
//   [eval] samples, heldout_size, projections, projection_seed
struct RunConfig {
    std::string name = "run";
    TrainConfig train;
    SampleConfig sample;
    EvalConfig eval;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string to_config_text(const RunConfig& config);

// Hex SHA-256 of the canonical config text.
std::string config_hash(const RunConfig& config);
std::string sha256_hex(const std::string& bytes);
std::string file_sha256(const std::string& path);

// Commit of the source tree this binary was built from.
const char* build_git_hash();

}  // namespace xar
