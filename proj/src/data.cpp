#include "xar/data.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "xar/errors.hpp"
#include "xar/rng.hpp"

namespace xar {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::string_view to_string(DatasetKind kind) {
    switch (kind) {
        case DatasetKind::GaussianMixture: return "gaussian_mixture";
        case DatasetKind::StructuredPatterns: return "structured_patterns";
        case DatasetKind::TinyImages: return "tiny_images";
    }
    return "?";
}

DatasetKind parse_dataset_kind(std::string_view name) {
    for (DatasetKind k : {DatasetKind::GaussianMixture, DatasetKind::StructuredPatterns, DatasetKind::TinyImages}) {
        if (to_string(k) == name) {
            return k;
        }
    }
    throw ConfigError("unknown dataset kind '" + std::string(name) + "'");
}

void DatasetSpec::validate() const {
    if (grid.h < 1 || grid.w < 1 || grid.c < 1) {
        throw DomainError("dataset grid must be positive");
    }
    if (num_classes < 1) {
        throw DomainError("dataset needs at least one class");
    }
    if (!(sigma > 0.0) || !std::isfinite(sigma)) {
        throw DomainError("dataset sigma must be positive");
    }
    if (!std::isfinite(mean_scale)) {
        throw DomainError("dataset mean_scale must be finite");
    }
    if (kind == DatasetKind::TinyImages && (patch < 1 || grid.c % (patch * patch) != 0)) {
        throw DomainError("tiny_images needs channels divisible by patch^2");
    }
}

std::vector<LatentGrid> mixture_means(const DatasetSpec& spec) {
    spec.validate();
    Rng rng(spec.component_seed);
    std::vector<LatentGrid> means;
    for (std::size_t j = 0; j < spec.num_classes; ++j) {
        LatentGrid m(spec.grid);
        for (double& v : m.values()) {
            v = spec.mean_scale * rng.normal();
        }
        means.push_back(std::move(m));
    }
    return means;
}

namespace {

struct PatternFamily {
    double freq;
    double angle;
};

std::vector<PatternFamily> pattern_families(const DatasetSpec& spec) {
    std::vector<PatternFamily> out;
    for (std::size_t j = 0; j < spec.num_classes; ++j) {
        out.push_back({1.0 + static_cast<double>(j % 3),
                       std::numbers::pi * static_cast<double>(j) / static_cast<double>(spec.num_classes)});
    }
    return out;
}

LatentGrid tiny_image(const DatasetSpec& spec, int label, Rng& rng) {
    const std::size_t f = spec.patch;
    const GridShape img{spec.grid.h * f, spec.grid.w * f, spec.grid.c / (f * f)};
    LatentGrid pix(img);
    const std::size_t shape = static_cast<std::size_t>(label) % 4;
    const double level = 0.5 + 0.5 * static_cast<double>(static_cast<std::size_t>(label) / 4 + 1) /
                                    static_cast<double>((spec.num_classes + 3) / 4);
    const double extent = std::max(1.0, static_cast<double>(std::min(img.h, img.w)) / 4.0);
    const double ci = extent + rng.uniform() * (static_cast<double>(img.h) - 2.0 * extent);
    const double cj = extent + rng.uniform() * (static_cast<double>(img.w) - 2.0 * extent);
    for (std::size_t i = 0; i < img.h; ++i) {
        for (std::size_t j = 0; j < img.w; ++j) {
            const double di = static_cast<double>(i) + 0.5 - ci;
            const double dj = static_cast<double>(j) + 0.5 - cj;
            bool on = false;
            switch (shape) {
                case 0: on = di * di + dj * dj <= extent * extent; break;       // disk
                case 1: on = std::abs(di) <= extent && std::abs(dj) <= extent; break;  // square
                case 2: on = std::abs(di) <= extent * 0.5; break;               // horizontal bar
                default: on = std::abs(dj) <= extent * 0.5; break;              // vertical bar
            }
            for (std::size_t ch = 0; ch < img.c; ++ch) {
                pix.at(i, j, ch) = (on ? level : 0.0) + spec.sigma * rng.normal();
            }
        }
    }
    return patchify_encode(pix, f);
}

}  // namespace

Dataset synth_dataset(const DatasetSpec& spec) {
    spec.validate();
    Dataset out;
    out.reserve(spec.size);
    Rng rng(spec.seed);
    const auto means = spec.kind == DatasetKind::GaussianMixture ? mixture_means(spec) : std::vector<LatentGrid>{};
    const auto families = pattern_families(spec);
    for (std::size_t i = 0; i < spec.size; ++i) {
        const int label = static_cast<int>(i % spec.num_classes);
        LatentGrid g(spec.grid);
        switch (spec.kind) {
            case DatasetKind::GaussianMixture: {
                const auto& m = means[static_cast<std::size_t>(label)].values();
                for (std::size_t k = 0; k < g.values().size(); ++k) {
                    g.values()[k] = m[k] + spec.sigma * rng.normal();
                }
                break;
            }
            case DatasetKind::StructuredPatterns: {
                // Oriented sinusoid per class with a random phase and amplitude per sample.
                const PatternFamily& fam = families[static_cast<std::size_t>(label)];
                const double phase = 2.0 * std::numbers::pi * rng.uniform();
                const double amp = 0.75 + 0.5 * rng.uniform();
                const double ca = std::cos(fam.angle);
                const double sa = std::sin(fam.angle);
                for (std::size_t r = 0; r < spec.grid.h; ++r) {
                    for (std::size_t c = 0; c < spec.grid.w; ++c) {
                        const double u = (static_cast<double>(r) * ca + static_cast<double>(c) * sa) /
                                         static_cast<double>(spec.grid.h);
                        for (std::size_t ch = 0; ch < spec.grid.c; ++ch) {
                            g.at(r, c, ch) = amp * std::cos(2.0 * std::numbers::pi * fam.freq * u + phase +
                                                            0.5 * std::numbers::pi * static_cast<double>(ch)) +
                                             spec.sigma * rng.normal();
                        }
                    }
                }
                break;
            }
            case DatasetKind::TinyImages: g = tiny_image(spec, label, rng); break;
        }
        out.push_back({std::move(g), label});
    }
    return out;
}

LatentGrid patchify_encode(const LatentGrid& image, std::size_t f) {
    const GridShape s = image.shape();
    if (f < 1 || s.h % f != 0 || s.w % f != 0) {
        throw CodecError("patch factor " + std::to_string(f) + " does not divide image " + std::to_string(s.h) + "x" +
                         std::to_string(s.w));
    }
    LatentGrid out(GridShape{s.h / f, s.w / f, s.c * f * f});
    for (std::size_t i = 0; i < s.h; ++i) {
        for (std::size_t j = 0; j < s.w; ++j) {
            for (std::size_t ch = 0; ch < s.c; ++ch) {
                out.at(i / f, j / f, ((i % f) * f + (j % f)) * s.c + ch) = image.at(i, j, ch);
            }
        }
    }
    return out;
}

LatentGrid patchify_decode(const LatentGrid& latent, std::size_t f) {
    const GridShape s = latent.shape();
    if (f < 1 || s.c % (f * f) != 0) {
        throw CodecError("latent channels " + std::to_string(s.c) + " not divisible by f^2 for f = " +
                         std::to_string(f));
    }
    const std::size_t c = s.c / (f * f);
    LatentGrid out(GridShape{s.h * f, s.w * f, c});
    for (std::size_t i = 0; i < s.h * f; ++i) {
        for (std::size_t j = 0; j < s.w * f; ++j) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                out.at(i, j, ch) = latent.at(i / f, j / f, ((i % f) * f + (j % f)) * c + ch);
            }
        }
    }
    return out;
}

namespace {

constexpr char kDataMagic[8] = {'X', 'A', 'R', 'D', 'A', 'T', 'A', '1'};

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) {
        throw IoError("dataset file truncated");
    }
    return v;
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& data, std::uint64_t seed) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw IoError("cannot open " + path + " for writing");
    }
    const GridShape g = data.empty() ? GridShape{} : data.front().latent.shape();
    os.write(kDataMagic, sizeof kDataMagic);
    put<std::uint64_t>(os, data.size());
    put<std::uint64_t>(os, g.h);
    put<std::uint64_t>(os, g.w);
    put<std::uint64_t>(os, g.c);
    put<std::uint32_t>(os, 1);
    put<std::uint64_t>(os, seed);
    for (const Sample& s : data) {
        put<std::int32_t>(os, s.label);
    }
    for (const Sample& s : data) {
        if (!(s.latent.shape() == g)) {
            throw IoError("dataset samples have mixed shapes");
        }
        os.write(reinterpret_cast<const char*>(s.latent.values().data()),
                 static_cast<std::streamsize>(s.latent.values().size() * sizeof(double)));
    }
    if (!os) {
        throw IoError("failed writing " + path);
    }
}

Dataset load_dataset(const std::string& path, std::uint64_t* seed) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open " + path);
    }
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kDataMagic, sizeof magic) != 0) {
        throw IoError(path + " is not a dataset file");
    }
    const auto count = get<std::uint64_t>(is);
    GridShape g;
    g.h = get<std::uint64_t>(is);
    g.w = get<std::uint64_t>(is);
    g.c = get<std::uint64_t>(is);
    if (get<std::uint32_t>(is) != 1) {
        throw IoError("unsupported dataset dtype");
    }
    const auto s = get<std::uint64_t>(is);
    if (seed) {
        *seed = s;
    }
    Dataset out(count);
    for (auto& sample : out) {
        sample.label = get<std::int32_t>(is);
    }
    for (auto& sample : out) {
        std::vector<double> v(g.numel());
        is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
        if (!is) {
            throw IoError("dataset file truncated");
        }
        sample.latent = LatentGrid(g, std::move(v));
    }
    return out;
}

}  // namespace xar
