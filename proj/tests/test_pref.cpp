#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "noisear/data.hpp"
#include "noisear/pref.hpp"

using namespace noisear;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.shape = {1, 4, 4, 2};
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.ffn_mult = 2;
    cfg.vocab_size = 6;
    cfg.cond_max_len = 4;
    cfg.seed = 7;
    return cfg;
}

std::vector<PreferencePair> random_pairs(const Model& m, std::size_t n,
                                         std::uint64_t seed) {
    std::vector<PreferencePair> pairs;
    for (std::size_t i = 0; i < n; ++i) {
        PreferencePair p;
        p.condition = Condition{{static_cast<std::uint32_t>(i % 6)}};
        p.preferred = sample_noise(m, p.condition, seed + 2 * i).tensor;
        p.rejected = sample_noise(m, p.condition, seed + 2 * i + 1).tensor;
        p.preferred_score = 1.0;
        p.rejected_score = 0.0;
        pairs.push_back(std::move(p));
    }
    return pairs;
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("pref_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("dpo loss at policy == reference is exactly ln 2") {
    const Model m = Model::init_params(tiny_config());
    const auto pairs = random_pairs(m, 20, 5);
    for (const auto& pair : pairs) {
        const double loss = dpo_loss(m, m, pair, 0.1);
        CHECK(std::abs(loss - std::log(2.0)) <= 1e-12);
    }
}

TEST_CASE("dpo loss decreases as the policy prefers the winner more") {
    const Model ref = Model::init_params(tiny_config());
    const auto pairs = random_pairs(ref, 4, 9);
    TrainConfig cfg;
    cfg.base_lr = 1e-3;
    cfg.batch_size = 4;
    const Model tuned = finetune(ref, pairs, FinetuneMode::Dpo, cfg, 0.1, 30);
    for (const auto& pair : pairs)
        CHECK(dpo_loss(tuned, ref, pair, 0.1) < std::log(2.0));
}

TEST_CASE("rollout records per-step log-probs and the reward") {
    const Model m = Model::init_params(tiny_config());
    int calls = 0;
    const RewardFn fn = [&](const NoiseTensor&, const Condition&) {
        calls += 1;
        return 2.5;
    };
    const Trajectory t = rollout(m, Condition{{1}}, 3, fn);
    CHECK(calls == 1);
    CHECK(t.reward == doctest::Approx(2.5));
    CHECK(t.actions.size() == 4);
    CHECK(t.step_logprobs.size() == 4);
    CHECK(t.seed == 3);
    // actions are exactly the sampled patches for this seed
    const auto sr = sample_noise(m, Condition{{1}}, 3);
    CHECK(t.actions == patchify(sr.tensor).patches);
}

TEST_CASE("synthetic reward decomposes into its three terms") {
    // token 1: coupling 0, bias 0.1, s = 0.8; tensor pinned at the mean
    const Condition cond{{1}};
    NoiseTensor t;
    t.shape = {1, 4, 4, 2};
    t.values.assign(16, 0.1);
    const double nll = 0.5 * std::log(2.0 * M_PI * 0.64);
    CHECK(reward_synthetic(t, cond) == doctest::Approx(-nll + 2.0).epsilon(1e-12));

    // push the tensor far off: loses both indicator bonuses
    NoiseTensor far = t;
    for (auto& v : far.values) v = 10.0;
    const double far_nll = oracle_nll(far, cond);
    CHECK(far_nll > 1.5);
    CHECK(reward_synthetic(far, cond) == doctest::Approx(-far_nll).epsilon(1e-12));
}

TEST_CASE("build_pairs keeps extremes and honors the gap filter") {
    const Model m = Model::init_params(tiny_config());
    const std::vector<Condition> conds = {Condition{{0}}, Condition{{1}},
                                          Condition{{2}}};

    // score by tensor mean so extremes are easy to verify externally
    const RewardFn by_mean = [](const NoiseTensor& t, const Condition&) {
        return std::accumulate(t.values.begin(), t.values.end(), 0.0);
    };
    const auto pairs = build_pairs(m, conds, 8, by_mean, 0.0, 77);
    REQUIRE(pairs.size() == 3);
    for (const auto& pair : pairs) {
        CHECK(pair.preferred_score > pair.rejected_score);
        CHECK(by_mean(pair.preferred, pair.condition) ==
              doctest::Approx(pair.preferred_score));
        CHECK(by_mean(pair.rejected, pair.condition) ==
              doctest::Approx(pair.rejected_score));
    }

    // an unreachable gap keeps nothing
    CHECK(build_pairs(m, conds, 8, by_mean, 1e9, 77).empty());
    // every kept pair clears the gap strictly
    for (const auto& pair : build_pairs(m, conds, 8, reward_synthetic, 0.5, 77))
        CHECK(pair.preferred_score - pair.rejected_score > 0.5);

    CHECK_THROWS_AS(build_pairs(m, conds, 1, by_mean, 0.0, 0), invalid_input);
}

TEST_CASE("build_pairs is deterministic in the base seed") {
    const Model m = Model::init_params(tiny_config());
    const std::vector<Condition> conds = {Condition{{0}}, Condition{{3}}};
    const auto a = build_pairs(m, conds, 6, reward_synthetic, 0.0, 13);
    const auto b = build_pairs(m, conds, 6, reward_synthetic, 0.0, 13);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].preferred.values == b[i].preferred.values);
        CHECK(a[i].rejected.values == b[i].rejected.values);
    }
}

TEST_CASE("dpo fine-tuning raises the preference margin") {
    const Model m = Model::init_params(tiny_config());
    const auto pairs = random_pairs(m, 8, 21);
    const double before = mean_pair_margin(m, pairs);
    TrainConfig cfg;
    cfg.base_lr = 1e-3;
    cfg.batch_size = 4;
    const Model tuned = finetune(m, pairs, FinetuneMode::Dpo, cfg, 0.1, 50);
    CHECK(mean_pair_margin(tuned, pairs) > before);
}

TEST_CASE("preferred-nll fine-tuning lowers the preferred NLL") {
    const Model m = Model::init_params(tiny_config());
    const auto pairs = random_pairs(m, 8, 33);
    auto mean_preferred_nll = [&](const Model& model) {
        double total = 0.0;
        for (const auto& pair : pairs)
            total += preferred_nll_loss(model, pair, nullptr);
        return total / pairs.size();
    };
    const double before = mean_preferred_nll(m);
    TrainConfig cfg;
    cfg.base_lr = 1e-3;
    cfg.batch_size = 4;
    const Model tuned = finetune(m, pairs, FinetuneMode::PreferredNll, cfg, 0.1, 50);
    CHECK(mean_preferred_nll(tuned) < before);
}

TEST_CASE("pair file round-trip") {
    const Model m = Model::init_params(tiny_config());
    const auto pairs = random_pairs(m, 3, 41);
    TempFile f("roundtrip.narp");
    write_pairs(pairs, tiny_config().shape, 4, 6, f.path);

    TensorShape shape;
    std::uint32_t cond_max = 0, vocab = 0;
    const auto back = read_pairs(f.path, &shape, &cond_max, &vocab);
    CHECK(shape.channels == 1);
    CHECK(shape.height == 4);
    CHECK(shape.width == 4);
    CHECK(cond_max == 4);
    CHECK(vocab == 6);
    REQUIRE(back.size() == pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        CHECK(back[i].condition.tokens == pairs[i].condition.tokens);
        CHECK(back[i].preferred_score ==
              static_cast<double>(static_cast<float>(pairs[i].preferred_score)));
        for (std::size_t e = 0; e < pairs[i].preferred.values.size(); ++e) {
            CHECK(back[i].preferred.values[e] ==
                  static_cast<double>(static_cast<float>(pairs[i].preferred.values[e])));
            CHECK(back[i].rejected.values[e] ==
                  static_cast<double>(static_cast<float>(pairs[i].rejected.values[e])));
        }
    }

    // truncation is rejected
    std::ifstream in(f.path, std::ios::binary);
    const std::string bytes(std::istreambuf_iterator<char>(in), {});
    in.close();
    std::ofstream out(f.path, std::ios::binary);
    out << bytes.substr(0, bytes.size() - 5);
    out.close();
    CHECK_THROWS_AS(read_pairs(f.path, nullptr), io_error);
}

TEST_CASE("finetune input validation") {
    const Model m = Model::init_params(tiny_config());
    TrainConfig cfg;
    CHECK_THROWS_AS(finetune(m, {}, FinetuneMode::Dpo, cfg, 0.1, 1), invalid_input);
    const auto pairs = random_pairs(m, 1, 1);
    CHECK_THROWS_AS(dpo_loss(m, m, pairs[0], 0.0), invalid_input);
}
