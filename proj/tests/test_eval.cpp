#include <doctest.h>

#include <cmath>
#include <sstream>

#include "noisear/eval.hpp"
#include "noisear/sample.hpp"

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

Dataset model_samples(const Model& m, std::size_t n, std::uint64_t seed) {
    Dataset d;
    d.channels = static_cast<std::uint32_t>(m.config().shape.channels);
    d.height = static_cast<std::uint32_t>(m.config().shape.height);
    d.width = static_cast<std::uint32_t>(m.config().shape.width);
    d.cond_max_len = static_cast<std::uint32_t>(m.config().cond_max_len);
    d.vocab_size = static_cast<std::uint32_t>(m.config().vocab_size);
    for (std::size_t i = 0; i < n; ++i) {
        const Condition cond{{static_cast<std::uint32_t>(i % 6)}};
        d.records.emplace_back(cond, sample_noise(m, cond, seed + i).tensor);
    }
    return d;
}

}  // namespace

TEST_CASE("baseline NLL has the closed form under the standard normal prior") {
    Dataset d;
    d.channels = 1;
    d.height = 2;
    d.width = 2;
    NoiseTensor t;
    t.shape = {1, 2, 2, 1};
    t.values = {0.0, 0.0, 0.0, 0.0};
    d.records.emplace_back(Condition{{0}}, t);
    CHECK(baseline_nll(d) == doctest::Approx(0.9189385332046727).epsilon(1e-14));

    d.records[0].second.values = {1.0, 1.0, 1.0, 1.0};
    CHECK(baseline_nll(d) == doctest::Approx(1.4189385332046727).epsilon(1e-14));

    d.records[0].second.values = {1.0, -1.0, 2.0, 0.0};
    // mean of 0.5*x^2 over {1, 1, 4, 0} is 0.75
    CHECK(baseline_nll(d) == doctest::Approx(0.9189385332046727 + 0.75).epsilon(1e-14));
}

TEST_CASE("eval NLL agrees with per-record sequence scoring") {
    const Model m = Model::init_params(tiny_config());
    const Dataset d = model_samples(m, 5, 3);
    double expected = 0.0;
    for (const auto& [cond, tensor] : d.records) {
        NoiseTensor shaped = tensor;
        shaped.shape = m.config().shape;
        expected += -sequence_logprob(m, shaped, cond).total / 16.0;
    }
    expected /= 5.0;
    CHECK(eval_nll(m, d) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("PIT of a model on its own samples is uniform") {
    const Model m = Model::init_params(tiny_config());
    Dataset d = model_samples(m, 400, 17);
    const PitResult calibrated = calibration_pit(m, d);
    CHECK(calibrated.ks_statistic <= 0.05);
    CHECK(calibrated.histogram.size() == 20);
    double total = 0.0;
    for (double h : calibrated.histogram) total += h;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

    // widen the data twofold: the same model is now badly calibrated
    for (auto& [cond, tensor] : d.records)
        for (auto& v : tensor.values) v *= 2.0;
    CHECK(calibration_pit(m, d).ks_statistic > 0.1);
}

TEST_CASE("causality audit passes intact models and fails a broken mask") {
    Model m = Model::init_params(tiny_config());
    CHECK(audit_causality(m, 25, 1) <= 1e-9);
    m.set_causal_mask_enabled(false);
    CHECK(audit_causality(m, 25, 1) > 1e-6);
    CHECK_THROWS_AS(audit_causality(m, 0, 1), invalid_input);
}

TEST_CASE("FLOPs estimate matches an independent hand tally on the tiny config") {
    const ModelConfig cfg = tiny_config();
    // M = 4 patches, K = 4, S = 5 tokens, d = 8, dff = 16, Lc = 4, one layer
    const std::uint64_t embed = 4 * 4 * 8;                    // 128 MACs
    const std::uint64_t self_qkv = 3 * 5 * 8 * 8;             // 960
    const std::uint64_t self_attn = 2 * 5 * 5 * 8;            // 400
    const std::uint64_t self_out = 5 * 8 * 8;                 // 320
    const std::uint64_t cross_q = 5 * 8 * 8;                  // 320
    const std::uint64_t cross_kv = 2 * 4 * 8 * 8;             // 512
    const std::uint64_t cross_attn = 2 * 5 * 4 * 8;           // 320
    const std::uint64_t cross_out = 5 * 8 * 8;                // 320
    const std::uint64_t ffn = 2 * 5 * 8 * 16;                 // 1280
    const std::uint64_t head = 4 * (1 * 8 * 8 + 2 * 4 * 8);   // 512
    const std::uint64_t macs = embed + self_qkv + self_attn + self_out + cross_q +
                               cross_kv + cross_attn + cross_out + ffn + head;
    CHECK(estimate_flops(cfg) == 2 * macs);
}

TEST_CASE("FLOPs estimate scales with depth") {
    ModelConfig cfg = tiny_config();
    const std::uint64_t one = estimate_flops(cfg);
    cfg.n_decoder_layers = 3;
    const std::uint64_t three = estimate_flops(cfg);
    CHECK(three > one);
    // extra layers add exactly two more per-layer blocks
    CHECK((three - one) % 2 == 0);
}

TEST_CASE("whole-model gradient check stays within tolerance") {
    const Model m = Model::init_params(tiny_config());
    Rng rng(2);
    PatchSequence seq;
    seq.shape = tiny_config().shape;
    seq.patches.assign(4, std::vector<double>(4));
    for (auto& p : seq.patches)
        for (auto& v : p) v = rng.normal();
    const Condition cond{{1, 3}};
    CHECK(grad_check(m, seq, cond, 1e-4) <= 1e-4);
    CHECK_THROWS_AS(grad_check(m, seq, cond, 0.0), invalid_input);
}

TEST_CASE("evaluate produces a complete text report") {
    const Model m = Model::init_params(tiny_config());
    const Dataset d = model_samples(m, 10, 7);
    const EvalReport report = evaluate(m, d, 5);
    const std::string text = report.to_text();
    for (const char* key : {"model_nll", "oracle_nll", "baseline_nll",
                            "pit_ks_statistic", "causality_max_deviation",
                            "flops_estimate", "sample_latency"}) {
        CHECK(text.find(std::string(key) + " = ") != std::string::npos);
    }
    CHECK(report.flops_estimate == estimate_flops(m.config()));
    CHECK(report.sample_latency > 0.0);
    CHECK(report.causality_max_deviation <= 1e-9);
}

TEST_CASE("empty datasets are rejected") {
    const Model m = Model::init_params(tiny_config());
    Dataset d;
    d.channels = 1;
    d.height = 4;
    d.width = 4;
    CHECK_THROWS_AS(eval_nll(m, d), invalid_input);
    CHECK_THROWS_AS(baseline_nll(d), invalid_input);
    CHECK_THROWS_AS(calibration_pit(m, d), invalid_input);
}
