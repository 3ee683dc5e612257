#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "noisear/data.hpp"
#include "noisear/model.hpp"

namespace noisear {

struct EvalReport {
    double model_nll = 0.0;
    double oracle_nll = 0.0;
    double baseline_nll = 0.0;
    double pit_ks_statistic = 0.0;
    double causality_max_deviation = 0.0;
    std::uint64_t flops_estimate = 0;
    double sample_latency = 0.0;  // seconds per full tensor

    // One "key = value" per line.
    std::string to_text() const;
};

// Mean per-element NLL of the dataset under the model.
double eval_nll(const Model& model, const Dataset& d);

// Mean per-element NLL of the dataset under the oracle law.
double dataset_oracle_nll(const Dataset& d, const TensorShape& shape);

// Mean per-element NLL under the isotropic N(0, I) prior.
double baseline_nll(const Dataset& d);

struct PitResult {
    std::vector<double> histogram;  // normalized bin frequencies
    double ks_statistic = 0.0;
};

// Probability integral transform of every element under the teacher-forced
// predictive Gaussians, with a KS statistic against the uniform law.
PitResult calibration_pit(const Model& model, const Dataset& d, std::size_t bins = 20);

// Max abs deviation of params for patches < j when patches >= j are perturbed.
double audit_causality(const Model& model, std::size_t trials, std::uint64_t seed = 0);

// 2 x multiply-accumulate count of one teacher-forced forward pass.
std::uint64_t estimate_flops(const ModelConfig& cfg);

// Max relative error of analytic gradients against central finite differences
// of the total loss (NLL + recon_weight * recon with fixed noise).
double grad_check(const Model& model, const PatchSequence& seq, const Condition& cond,
                  double step, double recon_weight = 0.2, std::uint64_t eps_seed = 0);

EvalReport evaluate(const Model& model, const Dataset& d, std::size_t causality_trials = 20);

}  // namespace noisear
