#include <doctest.h>

#include <numeric>
#include <set>

#include "noisear/patch_codec.hpp"
#include "noisear/rng.hpp"

using namespace noisear;

TEST_CASE("shape counts") {
    TensorShape s{3, 8, 12, 4};
    CHECK(s.num_patches() == 6);
    CHECK(s.patch_elems() == 48);
    CHECK(s.total_elems() == 288);
}

TEST_CASE("shape validation rejects non-divisible grids") {
    CHECK_THROWS_AS((TensorShape{1, 6, 8, 4}.validate()), invalid_input);
    CHECK_THROWS_AS((TensorShape{1, 8, 6, 4}.validate()), invalid_input);
    CHECK_THROWS_AS((TensorShape{0, 8, 8, 2}.validate()), invalid_input);
    CHECK_THROWS_AS((TensorShape{1, 2, 2, 4}.validate()), invalid_input);
    CHECK_NOTHROW((TensorShape{1, 8, 8, 2}.validate()));
    CHECK_NOTHROW((TensorShape{1, 4, 4, 4}.validate()));
}

TEST_CASE("hand-enumerated 4x4 single-channel patches") {
    // values 0..15 laid out row-major; P=2 gives 4 raster-ordered patches
    TensorShape shape{1, 4, 4, 2};
    NoiseTensor t;
    t.shape = shape;
    t.values.resize(16);
    std::iota(t.values.begin(), t.values.end(), 0.0);

    const PatchSequence s = patchify(t);
    REQUIRE(s.patches.size() == 4);
    CHECK(s.patches[0] == std::vector<double>{0, 1, 4, 5});
    CHECK(s.patches[1] == std::vector<double>{2, 3, 6, 7});
    CHECK(s.patches[2] == std::vector<double>{8, 9, 12, 13});
    CHECK(s.patches[3] == std::vector<double>{10, 11, 14, 15});

    CHECK(patch_index(shape, 1, 0) == 2);
    CHECK(patch_index(shape, 2, 3) == 13);
}

TEST_CASE("within-patch order is channel outermost") {
    // C=2, H=W=2, P=2: one patch, channel 0 block then channel 1 block
    TensorShape shape{2, 2, 2, 2};
    NoiseTensor t;
    t.shape = shape;
    t.values = {10, 11, 12, 13, 20, 21, 22, 23};
    const PatchSequence s = patchify(t);
    REQUIRE(s.patches.size() == 1);
    CHECK(s.patches[0] == std::vector<double>{10, 11, 12, 13, 20, 21, 22, 23});
}

TEST_CASE("patch index map is a bijection") {
    for (const TensorShape shape : {TensorShape{1, 4, 4, 2}, TensorShape{3, 8, 4, 2},
                                    TensorShape{4, 8, 8, 4}, TensorShape{2, 12, 6, 3}}) {
        const auto map = patch_index_map(shape);
        std::set<std::size_t> seen(map.begin(), map.end());
        CHECK(map.size() == shape.total_elems());
        CHECK(seen.size() == shape.total_elems());
        CHECK(*seen.rbegin() == shape.total_elems() - 1);
    }
}

TEST_CASE("patchify/depatchify round-trip is the exact identity") {
    Rng rng(77);
    for (const TensorShape shape : {TensorShape{1, 8, 8, 2}, TensorShape{3, 16, 8, 4},
                                    TensorShape{4, 32, 32, 32}}) {
        NoiseTensor t;
        t.shape = shape;
        t.values.resize(shape.total_elems());
        for (auto& v : t.values) v = rng.normal();
        const NoiseTensor back = depatchify(patchify(t));
        CHECK(back.shape == shape);
        CHECK(back.values == t.values);  // bitwise: pure permutation
    }
}

TEST_CASE("patchify is linear") {
    TensorShape shape{2, 4, 4, 2};
    Rng rng(5);
    NoiseTensor a, b;
    a.shape = b.shape = shape;
    a.values.resize(shape.total_elems());
    b.values.resize(shape.total_elems());
    for (auto& v : a.values) v = rng.normal();
    for (auto& v : b.values) v = rng.normal();

    NoiseTensor sum = a;
    for (std::size_t i = 0; i < sum.values.size(); ++i)
        sum.values[i] = 2.0 * a.values[i] + 3.0 * b.values[i];

    const auto pa = patchify(a), pb = patchify(b), ps = patchify(sum);
    for (std::size_t j = 0; j < ps.patches.size(); ++j)
        for (std::size_t e = 0; e < ps.patches[j].size(); ++e)
            CHECK(ps.patches[j][e] ==
                  doctest::Approx(2.0 * pa.patches[j][e] + 3.0 * pb.patches[j][e])
                      .epsilon(1e-15));
}

TEST_CASE("patchify rejects malformed tensors") {
    NoiseTensor t;
    t.shape = {1, 4, 4, 2};
    t.values.assign(15, 0.0);  // one element short
    CHECK_THROWS_AS(patchify(t), invalid_input);
    t.values.assign(16, 0.0);
    t.values[3] = std::nan("");
    CHECK_THROWS_AS(patchify(t), invalid_input);
}
