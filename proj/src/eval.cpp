#include "noisear/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "noisear/gaussian.hpp"
#include "noisear/sample.hpp"
#include "noisear/train.hpp"

namespace noisear {

namespace {
constexpr double kHalfLog2Pi = 0.9189385332046727;
constexpr double kInvSqrt2 = 0.7071067811865476;

NoiseTensor with_patch_size(const NoiseTensor& t, const TensorShape& shape) {
    NoiseTensor out = t;
    out.shape = shape;
    return out;
}
}  // namespace

std::string EvalReport::to_text() const {
    std::ostringstream out;
    out.precision(10);
    out << "model_nll = " << model_nll << '\n';
    out << "oracle_nll = " << oracle_nll << '\n';
    out << "baseline_nll = " << baseline_nll << '\n';
    out << "pit_ks_statistic = " << pit_ks_statistic << '\n';
    out << "causality_max_deviation = " << causality_max_deviation << '\n';
    out << "flops_estimate = " << flops_estimate << '\n';
    out << "sample_latency = " << sample_latency << '\n';
    return out.str();
}

double eval_nll(const Model& model, const Dataset& d) {
    require(!d.records.empty(), "dataset is empty");
    require(d.matches(model.config().shape), "dataset shape does not match model config");
    const std::size_t n = model.config().shape.total_elems();
    double sum = 0.0;
    for (const auto& [cond, tensor] : d.records) {
        const auto lp = sequence_logprob(model, with_patch_size(tensor, model.config().shape), cond);
        sum += -lp.total / static_cast<double>(n);
    }
    return sum / static_cast<double>(d.records.size());
}

double dataset_oracle_nll(const Dataset& d, const TensorShape& shape) {
    require(!d.records.empty(), "dataset is empty");
    require(d.matches(shape), "dataset shape mismatch");
    double sum = 0.0;
    for (const auto& [cond, tensor] : d.records)
        sum += oracle_nll(with_patch_size(tensor, shape), cond);
    return sum / static_cast<double>(d.records.size());
}

double baseline_nll(const Dataset& d) {
    require(!d.records.empty(), "dataset is empty");
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& [cond, tensor] : d.records) {
        for (double x : tensor.values) sum += kHalfLog2Pi + 0.5 * x * x;
        count += tensor.values.size();
    }
    return sum / static_cast<double>(count);
}

PitResult calibration_pit(const Model& model, const Dataset& d, std::size_t bins) {
    require(!d.records.empty(), "dataset is empty");
    require(bins >= 1, "need at least one bin");
    require(d.matches(model.config().shape), "dataset shape does not match model config");

    std::vector<double> pit;
    const std::size_t k = model.config().shape.patch_elems();
    for (const auto& [cond, tensor] : d.records) {
        const PatchSequence seq = patchify(with_patch_size(tensor, model.config().shape));
        const auto params = model.forward_teacher_forced(seq, cond);
        for (std::size_t j = 0; j < params.size(); ++j) {
            for (std::size_t i = 0; i < k; ++i) {
                const double sigma = std::exp(0.5 * params[j].log_var[i]);
                const double z = (seq.patches[j][i] - params[j].mean[i]) / sigma;
                pit.push_back(0.5 * (1.0 + std::erf(z * kInvSqrt2)));
            }
        }
    }

    PitResult result;
    result.histogram.assign(bins, 0.0);
    for (double p : pit) {
        std::size_t b = static_cast<std::size_t>(p * static_cast<double>(bins));
        if (b >= bins) b = bins - 1;
        result.histogram[b] += 1.0;
    }
    for (auto& h : result.histogram) h /= static_cast<double>(pit.size());

    std::sort(pit.begin(), pit.end());
    const double n = static_cast<double>(pit.size());
    double ks = 0.0;
    for (std::size_t i = 0; i < pit.size(); ++i) {
        const double hi = (static_cast<double>(i) + 1.0) / n - pit[i];
        const double lo = pit[i] - static_cast<double>(i) / n;
        ks = std::max(ks, std::max(hi, lo));
    }
    result.ks_statistic = ks;
    return result;
}

double audit_causality(const Model& model, std::size_t trials, std::uint64_t seed) {
    require(trials >= 1, "need at least one trial");
    const TensorShape shape = model.config().shape;
    const std::size_t m = shape.num_patches();
    const std::size_t k = shape.patch_elems();
    require(m >= 2, "causality audit needs at least two patches");

    Rng rng(seed);
    double worst = 0.0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        PatchSequence seq;
        seq.shape = shape;
        seq.patches.assign(m, std::vector<double>(k));
        for (auto& patch : seq.patches)
            for (auto& v : patch) v = rng.normal();
        Condition cond{{static_cast<std::uint32_t>(rng.next_u64() %
                                                   model.config().vocab_size)}};
        // perturb 1-based patches >= j; params for patches < j must not move
        const std::size_t j = 2 + rng.next_u64() % (m - 1);  // j in [2, M]

        const auto before = model.forward_teacher_forced(seq, cond);
        PatchSequence perturbed = seq;
        for (std::size_t p = j - 1; p < m; ++p)
            for (auto& v : perturbed.patches[p]) v += rng.normal() * 3.0 + 1.0;
        const auto after = model.forward_teacher_forced(perturbed, cond);

        for (std::size_t p = 0; p + 1 < j; ++p) {
            for (std::size_t i = 0; i < k; ++i) {
                worst = std::max(worst,
                                 std::abs(before[p].mean[i] - after[p].mean[i]));
                worst = std::max(worst,
                                 std::abs(before[p].log_var[i] - after[p].log_var[i]));
            }
        }
    }
    return worst;
}

std::uint64_t estimate_flops(const ModelConfig& cfg) {
    cfg.validate();
    const std::uint64_t m = cfg.shape.num_patches();
    const std::uint64_t k = cfg.shape.patch_elems();
    const std::uint64_t s = m + 1;
    const std::uint64_t d = cfg.d_model;
    const std::uint64_t dff = cfg.ffn_mult * d;
    const std::uint64_t lc = cfg.cond_max_len;

    // multiply-accumulates of one teacher-forced pass; x2 for FLOPs:
    //   embed:      M*K*d
    //   per layer:  self  3*S*d^2 (QKV) + S^2*d (scores) + S^2*d (context) + S*d^2 (out)
    //               cross S*d^2 (Q) + 2*Lc*d^2 (K,V) + 2*S*Lc*d (scores+context) + S*d^2 (out)
    //               ffn   2*S*d*dff
    //   head:       M*(n_head_layers*d^2 + 2*K*d)
    std::uint64_t macs = m * k * d;
    const std::uint64_t per_layer = 3 * s * d * d + 2 * s * s * d + s * d * d +
                                    2 * s * d * d + 2 * lc * d * d + 2 * s * lc * d +
                                    2 * s * d * dff;
    macs += cfg.n_decoder_layers * per_layer;
    macs += m * (cfg.n_head_layers * d * d + 2 * k * d);
    return 2 * macs;
}

double grad_check(const Model& model, const PatchSequence& seq, const Condition& cond,
                  double step, double recon_weight, std::uint64_t eps_seed) {
    require(step > 0.0, "finite-difference step must be > 0");
    const std::size_t m = model.config().shape.num_patches();
    const std::size_t k = model.config().shape.patch_elems();

    Rng eps_rng(eps_seed);
    std::vector<double> eps(m * k);
    for (auto& e : eps) e = eps_rng.normal();

    std::vector<double> analytic(model.num_params(), 0.0);
    sequence_loss(model, seq, cond, eps, recon_weight, &analytic);

    Model probe = model;
    double max_rel = 0.0;
    for (std::size_t i = 0; i < probe.num_params(); ++i) {
        const double saved = probe.params()[i];
        probe.params()[i] = saved + step;
        const double fp = sequence_loss(probe, seq, cond, eps, recon_weight, nullptr).total;
        probe.params()[i] = saved - step;
        const double fm = sequence_loss(probe, seq, cond, eps, recon_weight, nullptr).total;
        probe.params()[i] = saved;
        const double fd = (fp - fm) / (2.0 * step);
        const double denom = std::max(std::abs(fd) + std::abs(analytic[i]), 1e-4);
        max_rel = std::max(max_rel, std::abs(fd - analytic[i]) / denom);
    }
    return max_rel;
}

EvalReport evaluate(const Model& model, const Dataset& d, std::size_t causality_trials) {
    EvalReport report;
    report.model_nll = eval_nll(model, d);
    report.oracle_nll = dataset_oracle_nll(d, model.config().shape);
    report.baseline_nll = baseline_nll(d);
    report.pit_ks_statistic = calibration_pit(model, d).ks_statistic;
    report.causality_max_deviation = audit_causality(model, causality_trials);
    report.flops_estimate = estimate_flops(model.config());

    const Condition cond = d.records.front().first;
    const auto t0 = std::chrono::steady_clock::now();
    sample_noise(model, cond, 0, SampleMode::Stochastic, 1.0);
    const auto t1 = std::chrono::steady_clock::now();
    report.sample_latency = std::chrono::duration<double>(t1 - t0).count();
    return report;
}

}  // namespace noisear
