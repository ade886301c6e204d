#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "xar/entities.hpp"

namespace xar {

enum class DatasetKind { GaussianMixture, StructuredPatterns, TinyImages };

std::string_view to_string(DatasetKind kind);
DatasetKind parse_dataset_kind(std::string_view name);

struct DatasetSpec {
    DatasetKind kind = DatasetKind::GaussianMixture;
    GridShape grid{4, 4, 2};
    std::size_t num_classes = 8;
    std::size_t size = 4096;
    double mean_scale = 1.0;  // GaussianMixture: component means ~ N(0, mean_scale^2 I)
    double sigma = 0.1;       // shared isotropic noise scale
    std::size_t patch = 2;    // TinyImages: space-to-depth factor from pixels to latent
    std::uint64_t component_seed = 1234;  // fixes means / pattern families
    std::uint64_t seed = 0;               // fixes the individual draws

    void validate() const;
    bool operator==(const DatasetSpec&) const = default;
};

struct Sample {
    LatentGrid latent;
    int label = 0;
};

using Dataset = std::vector<Sample>;

// Sample i has label i mod num_classes.
Dataset synth_dataset(const DatasetSpec& spec);

// Ground-truth component means of a GaussianMixture spec, one per class.
std::vector<LatentGrid> mixture_means(const DatasetSpec& spec);

// Lossless space-to-depth: [H, W, C] -> [H/f, W/f, C f^2], channel order (di, dj, c).
LatentGrid patchify_encode(const LatentGrid& image, std::size_t f);
LatentGrid patchify_decode(const LatentGrid& latent, std::size_t f);

// Flat binary cache, little-endian:
//   "XARDATA1" | u64 count | u64 h | u64 w | u64 c | u32 dtype (1 = f64) | u64 seed
//   | i32 labels[count] | f64 values[count * h * w * c] (row-major per sample)
void save_dataset(const std::string& path, const Dataset& data, std::uint64_t seed);
Dataset load_dataset(const std::string& path, std::uint64_t* seed = nullptr);

}  // namespace xar
