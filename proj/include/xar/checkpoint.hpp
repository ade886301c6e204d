#pragma once

#include <string>

#include "xar/config.hpp"
#include "xar/training.hpp"

namespace xar {

// Checkpoint container, little-endian:
//   bytes 0..7   magic "XARCKPT1"
//   u64          header length L
//   L bytes      JSON header: format, model config, tensor table (name, rows, cols,
//                offset in doubles), step, epoch, optimizer scalars, rng state,
//                embedded run config text
//   f64[P]       parameters in tensor-table order
//   f64[P]       AdamW first moments
//   f64[P]       AdamW second moments
// Identical training state always serializes to identical bytes.
void save_checkpoint(const std::string& path, const TrainState& state, const std::string& config_text);

struct LoadedCheckpoint {
    TrainState state;
    std::string config_text;  // may be empty when the trainer had none
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace xar
