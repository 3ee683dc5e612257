#include <doctest.h>

#include <cmath>

#include "noisear/model.hpp"

using namespace noisear;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.shape = {1, 4, 4, 2};  // M = 4, K = 4
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.ffn_mult = 2;
    cfg.vocab_size = 6;
    cfg.cond_max_len = 4;
    cfg.seed = 7;
    return cfg;
}

PatchSequence random_patches(const TensorShape& shape, std::uint64_t seed) {
    Rng rng(seed);
    PatchSequence s;
    s.shape = shape;
    s.patches.assign(shape.num_patches(), std::vector<double>(shape.patch_elems()));
    for (auto& p : s.patches)
        for (auto& v : p) v = rng.normal();
    return s;
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.n_heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), invalid_input);
    cfg = tiny_config();
    cfg.shape.height = 5;  // not divisible by the patch size
    CHECK_THROWS_AS(cfg.validate(), invalid_input);
    cfg = tiny_config();
    cfg.log_var_clamp_lo = 1.0;
    cfg.log_var_clamp_hi = -1.0;
    CHECK_THROWS_AS(cfg.validate(), invalid_input);
}

TEST_CASE("initialization is deterministic in the seed") {
    const Model a = Model::init_params(tiny_config());
    const Model b = Model::init_params(tiny_config());
    CHECK(a.params() == b.params());

    ModelConfig other = tiny_config();
    other.seed = 8;
    const Model c = Model::init_params(other);
    CHECK(a.params() != c.params());
}

TEST_CASE("tensor table covers the flat parameter vector without gaps") {
    const Model m = Model::init_params(tiny_config());
    std::size_t expected_offset = 0;
    for (const TensorEntry& e : m.tensor_table()) {
        CHECK(e.offset == expected_offset);
        std::size_t n = 1;
        for (std::size_t dim : e.shape) n *= dim;
        CHECK(e.size == n);
        expected_offset += e.size;
    }
    CHECK(expected_offset == m.num_params());
}

TEST_CASE("teacher-forced forward obeys the shape contract") {
    const Model m = Model::init_params(tiny_config());
    const auto seq = random_patches(tiny_config().shape, 1);
    const Condition cond{{0, 2}};
    const auto params = m.forward_teacher_forced(seq, cond);
    REQUIRE(params.size() == 4);
    for (const auto& p : params) {
        CHECK(p.mean.size() == 4);
        CHECK(p.log_var.size() == 4);
        for (double lv : p.log_var) {
            CHECK(lv >= tiny_config().log_var_clamp_lo);
            CHECK(lv <= tiny_config().log_var_clamp_hi);
            CHECK(std::isfinite(lv));
        }
        for (double mu : p.mean) CHECK(std::isfinite(mu));
    }
}

TEST_CASE("forward is deterministic") {
    const Model m = Model::init_params(tiny_config());
    const auto seq = random_patches(tiny_config().shape, 2);
    const Condition cond{{1}};
    const auto a = m.forward_teacher_forced(seq, cond);
    const auto b = m.forward_teacher_forced(seq, cond);
    for (std::size_t j = 0; j < a.size(); ++j) {
        CHECK(a[j].mean == b[j].mean);
        CHECK(a[j].log_var == b[j].log_var);
    }
}

TEST_CASE("condition validation") {
    const Model m = Model::init_params(tiny_config());
    const auto seq = random_patches(tiny_config().shape, 3);
    CHECK_THROWS_AS(m.forward_teacher_forced(seq, Condition{{}}), invalid_input);
    CHECK_THROWS_AS(m.forward_teacher_forced(seq, Condition{{6}}), invalid_input);
    CHECK_THROWS_AS(m.forward_teacher_forced(seq, Condition{{0, 0, 0, 0, 0}}),
                    invalid_input);
    CHECK_NOTHROW(m.forward_teacher_forced(seq, Condition{{5}}));
}

TEST_CASE("changing the condition changes the prediction") {
    const Model m = Model::init_params(tiny_config());
    const auto seq = random_patches(tiny_config().shape, 4);
    const auto a = m.forward_teacher_forced(seq, Condition{{0}});
    const auto b = m.forward_teacher_forced(seq, Condition{{3}});
    double dev = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j)
        for (std::size_t i = 0; i < a[j].mean.size(); ++i)
            dev = std::max(dev, std::abs(a[j].mean[i] - b[j].mean[i]));
    CHECK(dev > 0.0);
}

TEST_CASE("causal mask: later patches never influence earlier predictions") {
    const Model m = Model::init_params(tiny_config());
    auto seq = random_patches(tiny_config().shape, 5);
    const Condition cond{{2}};
    const auto before = m.forward_teacher_forced(seq, cond);
    for (auto& v : seq.patches.back()) v += 10.0;  // only the last patch moves
    const auto after = m.forward_teacher_forced(seq, cond);
    for (std::size_t j = 0; j + 1 < before.size(); ++j) {
        // params for patch j+1 depend on patches <= j only
        for (std::size_t i = 0; i < before[j].mean.size(); ++i) {
            CHECK(before[j].mean[i] == doctest::Approx(after[j].mean[i]).epsilon(1e-12));
            CHECK(before[j].log_var[i] ==
                  doctest::Approx(after[j].log_var[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("disabling the causal mask breaks the autoregressive property") {
    Model m = Model::init_params(tiny_config());
    m.set_causal_mask_enabled(false);
    auto seq = random_patches(tiny_config().shape, 6);
    const Condition cond{{2}};
    const auto before = m.forward_teacher_forced(seq, cond);
    for (auto& v : seq.patches.back()) v += 10.0;
    const auto after = m.forward_teacher_forced(seq, cond);
    double dev = 0.0;
    for (std::size_t i = 0; i < before[0].mean.size(); ++i)
        dev = std::max(dev, std::abs(before[0].mean[i] - after[0].mean[i]));
    CHECK(dev > 1e-6);
}

TEST_CASE("incremental decoding equals the teacher-forced pass") {
    const Model m = Model::init_params(tiny_config());
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto seq = random_patches(tiny_config().shape, 100 + seed);
        const Condition cond{{static_cast<std::uint32_t>(seed % 6)}};
        const auto tf = m.forward_teacher_forced(seq, cond);

        DecodeCache cache = m.begin_decode(cond);
        const std::vector<double>* prev = nullptr;
        for (std::size_t j = 0; j < seq.patches.size(); ++j) {
            const GaussianParams inc = m.decode_step(cache, prev);
            for (std::size_t i = 0; i < inc.mean.size(); ++i) {
                CHECK(inc.mean[i] == doctest::Approx(tf[j].mean[i]).epsilon(1e-9));
                CHECK(inc.log_var[i] == doctest::Approx(tf[j].log_var[i]).epsilon(1e-9));
            }
            prev = &seq.patches[j];
        }
        CHECK_THROWS_AS(m.decode_step(cache, prev), invalid_input);  // past patch M
    }
}

TEST_CASE("forward_incremental equals teacher-forced at every prefix length") {
    const Model m = Model::init_params(tiny_config());
    const auto seq = random_patches(tiny_config().shape, 55);
    const Condition cond{{4}};
    const auto tf = m.forward_teacher_forced(seq, cond);
    for (std::size_t j = 0; j < seq.patches.size(); ++j) {
        const std::vector<std::vector<double>> prefix(seq.patches.begin(),
                                                      seq.patches.begin() + j);
        const GaussianParams inc = m.forward_incremental(prefix, cond);
        for (std::size_t i = 0; i < inc.mean.size(); ++i) {
            CHECK(inc.mean[i] == doctest::Approx(tf[j].mean[i]).epsilon(1e-9));
            CHECK(inc.log_var[i] == doctest::Approx(tf[j].log_var[i]).epsilon(1e-9));
        }
    }
}

TEST_CASE("log-variance clamp saturates instead of exploding") {
    Model m = Model::init_params(tiny_config());
    // blow up the final head bias rows that feed log_var
    for (const TensorEntry& e : m.tensor_table()) {
        if (e.name == "head.final.bias") {
            const std::size_t k = tiny_config().shape.patch_elems();
            for (std::size_t i = 0; i < k; ++i) m.params()[e.offset + k + i] = 1e6;
        }
    }
    const auto params =
        m.forward_teacher_forced(random_patches(tiny_config().shape, 8), Condition{{0}});
    for (const auto& p : params)
        for (double lv : p.log_var) CHECK(lv == tiny_config().log_var_clamp_hi);
}

TEST_CASE("backward rejects mismatched gradient buffers") {
    const Model m = Model::init_params(tiny_config());
    Tape tape;
    m.forward_teacher_forced(random_patches(tiny_config().shape, 9), Condition{{0}},
                             &tape);
    std::vector<double> d_mean(16, 0.0), d_log_var(16, 0.0), grad(3, 0.0);
    CHECK_THROWS_AS(m.backward(tape, d_mean, d_log_var, grad), invalid_input);
}
