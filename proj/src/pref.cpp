#include "noisear/pref.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "noisear/data.hpp"
#include "noisear/gaussian.hpp"
#include "noisear/wire.hpp"

namespace noisear {

namespace {
using namespace wire;

double tensor_mean(const NoiseTensor& t) {
    const double sum = std::accumulate(t.values.begin(), t.values.end(), 0.0);
    return sum / static_cast<double>(t.values.size());
}

// d(factor * per-element-normalized NLL)/d(params), accumulated into grad.
double accumulate_nll_grad(const Model& model, const PatchSequence& seq,
                           const Condition& cond, double factor,
                           std::vector<double>* grad) {
    const std::size_t m = model.config().shape.num_patches();
    const std::size_t k = model.config().shape.patch_elems();
    const double inv_n = 1.0 / static_cast<double>(m * k);

    Tape tape;
    const auto params = model.forward_teacher_forced(seq, cond, grad ? &tape : nullptr);
    double nll = 0.0;
    std::vector<double> d_mean, d_log_var;
    if (grad) {
        d_mean.assign(m * k, 0.0);
        d_log_var.assign(m * k, 0.0);
    }
    for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t i = 0; i < k; ++i) {
            const double x = seq.patches[j][i];
            nll -= logpdf_element(x, params[j].mean[i], params[j].log_var[i]);
            if (grad) {
                const ElemGrads g = nll_grads(x, params[j].mean[i], params[j].log_var[i]);
                d_mean[j * k + i] = factor * g.d_mean * inv_n;
                d_log_var[j * k + i] = factor * g.d_log_var * inv_n;
            }
        }
    }
    if (grad) model.backward(tape, d_mean, d_log_var, *grad);
    return nll * inv_n;
}

PatchSequence as_patches(const Model& model, const NoiseTensor& t) {
    NoiseTensor shaped = t;
    shaped.shape = model.config().shape;
    return patchify(shaped);
}

}  // namespace

Trajectory rollout(const Model& model, const Condition& c, std::uint64_t seed,
                   const RewardFn& reward_fn) {
    const SampleResult sr = sample_noise(model, c, seed, SampleMode::Stochastic, 1.0);
    Trajectory traj;
    traj.condition = c;
    traj.seed = seed;
    traj.step_logprobs = sr.per_patch_logprob;
    traj.actions = patchify(sr.tensor).patches;
    traj.reward = reward_fn(sr.tensor, c);
    return traj;
}

double reward_synthetic(const NoiseTensor& t, const Condition& c) {
    const double nll = oracle_nll(t, c);
    const double continuous = -nll;
    const double ind_likely = nll < 1.5 ? 1.0 : 0.0;
    const double ind_mean =
        std::abs(tensor_mean(t) - oracle_conditional_mean(t, c)) < 0.1 ? 1.0 : 0.0;
    return continuous + ind_likely + ind_mean;
}

std::vector<PreferencePair> build_pairs(const Model& model,
                                        const std::vector<Condition>& conditions,
                                        std::size_t n_rollouts, const RewardFn& reward_fn,
                                        double gap, std::uint64_t base_seed) {
    require(n_rollouts >= 2, "need at least two rollouts per condition");
    require(gap >= 0.0, "gap must be >= 0");
    std::vector<PreferencePair> pairs;
    const Rng seeder(base_seed);
    for (std::size_t ci = 0; ci < conditions.size(); ++ci) {
        const Condition& cond = conditions[ci];
        std::size_t best = 0, worst = 0;
        std::vector<SampleResult> samples;
        std::vector<double> scores(n_rollouts);
        samples.reserve(n_rollouts);
        for (std::size_t r = 0; r < n_rollouts; ++r) {
            const std::uint64_t seed = seeder.split(ci * n_rollouts + r).seed();
            samples.push_back(sample_noise(model, cond, seed, SampleMode::Stochastic, 1.0));
            scores[r] = reward_fn(samples.back().tensor, cond);
            // strict comparisons keep the lowest seed index on ties
            if (scores[r] > scores[best]) best = r;
            if (scores[r] < scores[worst]) worst = r;
        }
        if (scores[best] - scores[worst] > gap) {
            PreferencePair pair;
            pair.condition = cond;
            pair.preferred = samples[best].tensor;
            pair.preferred_score = scores[best];
            pair.rejected = samples[worst].tensor;
            pair.rejected_score = scores[worst];
            pairs.push_back(std::move(pair));
        }
    }
    return pairs;
}

double preferred_nll_loss(const Model& model, const PreferencePair& pair,
                          std::vector<double>* grad) {
    return accumulate_nll_grad(model, as_patches(model, pair.preferred), pair.condition,
                               1.0, grad);
}

double dpo_loss(const Model& policy, const Model& reference, const PreferencePair& pair,
                double beta, std::vector<double>* grad) {
    require(beta > 0.0, "beta must be > 0");
    require(policy.config() == reference.config(), "policy/reference config mismatch");

    const PatchSequence pref = as_patches(policy, pair.preferred);
    const PatchSequence rej = as_patches(policy, pair.rejected);

    const Condition& cond = pair.condition;
    const double lp_p = -accumulate_nll_grad(policy, pref, cond, 0.0, nullptr);
    const double lp_r = -accumulate_nll_grad(policy, rej, cond, 0.0, nullptr);
    const double lp_ref_p = -accumulate_nll_grad(reference, pref, cond, 0.0, nullptr);
    const double lp_ref_r = -accumulate_nll_grad(reference, rej, cond, 0.0, nullptr);

    const double margin = (lp_p - lp_ref_p) - (lp_r - lp_ref_r);
    const double z = beta * margin;
    // -log(sigmoid(z)) = softplus(-z), computed stably
    const double loss = z > 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));

    if (grad) {
        const double sig = 1.0 / (1.0 + std::exp(z));  // sigmoid(-z)
        // d loss / d lp_p = -beta * sig; lp = -nll, so scale nll grads by +beta*sig
        accumulate_nll_grad(policy, pref, cond, beta * sig, grad);
        accumulate_nll_grad(policy, rej, cond, -beta * sig, grad);
    }
    return loss;
}

Model finetune(const Model& model, const std::vector<PreferencePair>& pairs,
               FinetuneMode mode, const TrainConfig& cfg, double beta,
               std::size_t n_steps) {
    cfg.validate();
    require(!pairs.empty(), "no preference pairs");

    Model policy = model;
    const Model reference = model;  // frozen copy for dpo mode

    const std::size_t steps =
        n_steps > 0 ? n_steps
                    : cfg.epochs * ((pairs.size() + cfg.batch_size - 1) / cfg.batch_size);

    AdamOptimizer opt(policy.num_params());
    std::vector<double> grad(policy.num_params());
    std::size_t cursor = 0;
    for (std::size_t step = 0; step < steps; ++step) {
        std::fill(grad.begin(), grad.end(), 0.0);
        const std::size_t count = std::min(cfg.batch_size, pairs.size());
        double loss = 0.0;
        for (std::size_t i = 0; i < count; ++i) {
            const PreferencePair& pair = pairs[(cursor + i) % pairs.size()];
            if (mode == FinetuneMode::PreferredNll)
                loss += preferred_nll_loss(policy, pair, &grad);
            else
                loss += dpo_loss(policy, reference, pair, beta, &grad);
        }
        cursor = (cursor + count) % pairs.size();
        const double inv = 1.0 / static_cast<double>(count);
        for (auto& g : grad) g *= inv;
        if (!std::isfinite(loss))
            throw numerical_error("non-finite fine-tuning loss at step " +
                                  std::to_string(step));
        opt.step(policy.params(), grad, cfg.base_lr, cfg.adam_beta1, cfg.adam_beta2,
                 cfg.adam_eps);
    }
    return policy;
}

void write_pairs(const std::vector<PreferencePair>& pairs, const TensorShape& shape,
                 std::uint32_t cond_max_len, std::uint32_t vocab_size,
                 const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path);
    out.write("NARP", 4);
    write_u32(out, 1);
    write_u64(out, pairs.size());
    write_u32(out, static_cast<std::uint32_t>(shape.channels));
    write_u32(out, static_cast<std::uint32_t>(shape.height));
    write_u32(out, static_cast<std::uint32_t>(shape.width));
    write_u32(out, cond_max_len);
    write_u32(out, vocab_size);
    const std::size_t n_elems = shape.total_elems();
    for (const auto& pair : pairs) {
        require(pair.preferred.values.size() == n_elems &&
                    pair.rejected.values.size() == n_elems,
                "pair tensor does not match shape");
        write_u32(out, static_cast<std::uint32_t>(pair.condition.tokens.size()));
        for (auto t : pair.condition.tokens) write_u32(out, t);
        write_f32(out, static_cast<float>(pair.preferred_score));
        write_f32(out, static_cast<float>(pair.rejected_score));
        for (double v : pair.preferred.values) write_f32(out, static_cast<float>(v));
        for (double v : pair.rejected.values) write_f32(out, static_cast<float>(v));
    }
    if (!out) throw io_error("write failed: " + path);
}

std::vector<PreferencePair> read_pairs(const std::string& path, TensorShape* shape_out,
                                       std::uint32_t* cond_max_len_out,
                                       std::uint32_t* vocab_size_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open: " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "NARP", 4) != 0)
        throw io_error("bad pair file magic");
    if (read_u32(in) != 1) throw io_error("unsupported pair file version");
    const std::uint64_t count = read_u64(in);
    TensorShape shape;
    shape.channels = read_u32(in);
    shape.height = read_u32(in);
    shape.width = read_u32(in);
    shape.patch_size = 1;  // not stored; callers supply P from the model config
    const std::uint32_t cond_max_len = read_u32(in);
    const std::uint32_t vocab_size = read_u32(in);
    if (shape_out) *shape_out = shape;
    if (cond_max_len_out) *cond_max_len_out = cond_max_len;
    if (vocab_size_out) *vocab_size_out = vocab_size;
    const std::size_t n_elems = shape.total_elems();

    std::vector<PreferencePair> pairs;
    pairs.reserve(count);
    for (std::uint64_t r = 0; r < count; ++r) {
        PreferencePair pair;
        const std::uint32_t cond_len = read_u32(in);
        if (cond_len == 0 || cond_len > cond_max_len)
            throw io_error("corrupt pair record: bad condition length");
        pair.condition.tokens.resize(cond_len);
        for (auto& t : pair.condition.tokens) {
            t = read_u32(in);
            if (t >= vocab_size) throw io_error("corrupt pair record: token out of vocabulary");
        }
        pair.preferred_score = static_cast<double>(read_f32(in));
        pair.rejected_score = static_cast<double>(read_f32(in));
        pair.preferred.shape = shape;
        pair.preferred.values.resize(n_elems);
        for (auto& v : pair.preferred.values) v = static_cast<double>(read_f32(in));
        pair.rejected.shape = shape;
        pair.rejected.values.resize(n_elems);
        for (auto& v : pair.rejected.values) v = static_cast<double>(read_f32(in));
        pairs.push_back(std::move(pair));
    }
    return pairs;
}

double mean_pair_margin(const Model& model, const std::vector<PreferencePair>& pairs) {
    require(!pairs.empty(), "no preference pairs");
    double sum = 0.0;
    for (const auto& pair : pairs) {
        const double lp_p =
            -accumulate_nll_grad(model, as_patches(model, pair.preferred), pair.condition,
                                 0.0, nullptr);
        const double lp_r =
            -accumulate_nll_grad(model, as_patches(model, pair.rejected), pair.condition,
                                 0.0, nullptr);
        sum += lp_p - lp_r;
    }
    return sum / static_cast<double>(pairs.size());
}

}  // namespace noisear
