#pragma once

#include <vector>

#include "noisear/common.hpp"
#include "noisear/rng.hpp"

namespace noisear {

enum class SampleMode { Stochastic, Deterministic };

// Per-position diagonal Gaussian: one (mean, log-variance) pair per element.
struct GaussianParams {
    std::vector<double> mean;
    std::vector<double> log_var;
};

// log N(x | mean, exp(log_var))
double logpdf_element(double x, double mean, double log_var);

// Sum of element log-densities over one patch.
double patch_logprob(const std::vector<double>& patch, const GaussianParams& params);

struct ElemGrads {
    double d_mean;
    double d_log_var;
};

// Gradients of -logpdf_element with respect to mean and log_var.
ElemGrads nll_grads(double x, double mean, double log_var);

std::vector<double> sample_patch(const GaussianParams& params, Rng& rng,
                                 SampleMode mode, double temperature = 1.0);

}  // namespace noisear
