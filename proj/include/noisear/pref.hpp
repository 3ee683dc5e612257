#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "noisear/sample.hpp"
#include "noisear/train.hpp"

namespace noisear {

// One MDP episode: M patch-sampling actions with a terminal reward.
struct Trajectory {
    Condition condition;
    std::vector<std::vector<double>> actions;  // M sampled patches
    std::vector<double> step_logprobs;         // log pi(a_j | s_j)
    double reward = 0.0;
    std::uint64_t seed = 0;
};

struct PreferencePair {
    Condition condition;
    NoiseTensor preferred;
    double preferred_score = 0.0;
    NoiseTensor rejected;
    double rejected_score = 0.0;
};

using RewardFn = std::function<double(const NoiseTensor&, const Condition&)>;

Trajectory rollout(const Model& model, const Condition& c, std::uint64_t seed,
                   const RewardFn& reward_fn);

// Default desk-scale scorer: continuous term (negative oracle NLL per element)
// plus two {0,1} indicator bonuses.
double reward_synthetic(const NoiseTensor& t, const Condition& c);

// Per condition: n_rollouts episodes, keep (argmax, argmin) by score, emit the
// pair only when max - min exceeds gap. Ties break toward the lowest seed index.
std::vector<PreferencePair> build_pairs(const Model& model,
                                        const std::vector<Condition>& conditions,
                                        std::size_t n_rollouts, const RewardFn& reward_fn,
                                        double gap, std::uint64_t base_seed = 0);

// -sequence_logprob(preferred) normalized per element; rejected sample unused.
double preferred_nll_loss(const Model& model, const PreferencePair& pair,
                          std::vector<double>* grad = nullptr);

// Standard DPO objective over per-element-normalized sequence log-probs;
// gradients flow into the policy only.
double dpo_loss(const Model& policy, const Model& reference, const PreferencePair& pair,
                double beta, std::vector<double>* grad = nullptr);

enum class FinetuneMode { PreferredNll, Dpo };

Model finetune(const Model& model, const std::vector<PreferencePair>& pairs,
               FinetuneMode mode, const TrainConfig& cfg, double beta = 0.1,
               std::size_t n_steps = 0);

// Mean per-element-normalized log-prob margin (preferred minus rejected).
double mean_pair_margin(const Model& model, const std::vector<PreferencePair>& pairs);

// NARP pair file: magic "NARP", u32 LE version (=1), u64 LE pair count, then
// the NARD shape header fields (C/H/W/cond_max_len/vocab_size u32 LE), then
// per pair: condition length u32, tokens u32 each, preferred score f32,
// rejected score f32, preferred tensor f32 x (C*H*W), rejected tensor f32.
void write_pairs(const std::vector<PreferencePair>& pairs, const TensorShape& shape,
                 std::uint32_t cond_max_len, std::uint32_t vocab_size,
                 const std::string& path);
std::vector<PreferencePair> read_pairs(const std::string& path, TensorShape* shape_out,
                                       std::uint32_t* cond_max_len_out = nullptr,
                                       std::uint32_t* vocab_size_out = nullptr);

}  // namespace noisear
