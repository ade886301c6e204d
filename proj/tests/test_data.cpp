#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "xar/data.hpp"
#include "xar/errors.hpp"
#include "xar/rng.hpp"

using namespace xar;

TEST_CASE("mixture class means obey the law of large numbers") {
    DatasetSpec spec;
    spec.grid = {4, 4, 2};
    spec.num_classes = 8;
    spec.sigma = 0.1;
    spec.size = 8 * 500;
    const Dataset data = synth_dataset(spec);
    const auto means = mixture_means(spec);
    const std::size_t n = spec.size / spec.num_classes;
    for (std::size_t j = 0; j < spec.num_classes; ++j) {
        std::vector<double> m(32, 0.0);
        for (const Sample& s : data) {
            if (s.label == static_cast<int>(j)) {
                for (std::size_t k = 0; k < 32; ++k) m[k] += s.latent.values()[k] / static_cast<double>(n);
            }
        }
        // 4 standard errors per coordinate keeps 256 comparisons from tripping on chance
        for (std::size_t k = 0; k < 32; ++k) CHECK(std::abs(m[k] - means[j].values()[k]) <= 4.0 * 0.1 / std::sqrt(double(n)));
    }
}

TEST_CASE("labels cycle through classes") {
    DatasetSpec spec;
    spec.size = 20;
    spec.num_classes = 8;
    const Dataset d = synth_dataset(spec);
    for (std::size_t i = 0; i < d.size(); ++i) CHECK(d[i].label == static_cast<int>(i % 8));
}

TEST_CASE("dataset determinism and edge cases") {
    DatasetSpec spec;
    spec.size = 0;
    CHECK(synth_dataset(spec).empty());
    for (DatasetKind k : {DatasetKind::GaussianMixture, DatasetKind::StructuredPatterns, DatasetKind::TinyImages}) {
        DatasetSpec s;
        s.kind = k;
        s.size = 16;
        s.grid = {4, 4, 4};
        const Dataset a = synth_dataset(s);
        const Dataset b = synth_dataset(s);
        REQUIRE(a.size() == 16);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].latent == b[i].latent);
        s.seed = 1;
        CHECK_FALSE(synth_dataset(s)[0].latent == a[0].latent);
        CHECK(parse_dataset_kind(to_string(k)) == k);
    }
    DatasetSpec bad;
    bad.sigma = 0.0;
    CHECK_THROWS_AS(synth_dataset(bad), DomainError);
}

TEST_CASE("held-out seed shares the means") {
    DatasetSpec a;
    DatasetSpec b = a;
    b.seed = 99;
    CHECK(mixture_means(a) == mixture_means(b));
    CHECK_FALSE(synth_dataset(a)[0].latent == synth_dataset(b)[0].latent);
}

TEST_CASE("patchify codec") {
    Rng rng(1);
    LatentGrid img(GridShape{8, 8, 1});
    rng.fill_normal(img.values());
    CHECK(patchify_encode(img, 1) == img);
    CHECK(patchify_decode(img, 1) == img);
    const LatentGrid lat = patchify_encode(img, 2);
    CHECK(lat.shape() == GridShape{4, 4, 4});
    CHECK(patchify_decode(lat, 2) == img);
    CHECK(lat.at(1, 2, 3) == img.at(3, 5, 0));
    CHECK_THROWS_AS(patchify_encode(img, 3), CodecError);
    CHECK_THROWS_AS(patchify_decode(lat, 3), CodecError);

    const LatentGrid big(GridShape{256, 256, 3});
    CHECK(patchify_encode(big, 16).shape() == GridShape{16, 16, 768});
}

TEST_CASE("dataset files round trip") {
    DatasetSpec spec;
    spec.size = 10;
    const Dataset d = synth_dataset(spec);
    const auto path = std::filesystem::temp_directory_path() / "xar_test_data.bin";
    save_dataset(path.string(), d, 42);
    std::uint64_t seed = 0;
    const Dataset back = load_dataset(path.string(), &seed);
    CHECK(seed == 42);
    REQUIRE(back.size() == d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        CHECK(back[i].latent == d[i].latent);
        CHECK(back[i].label == d[i].label);
    }
    CHECK_THROWS(load_dataset((std::filesystem::temp_directory_path() / "xar_no_such_file").string()));
}
