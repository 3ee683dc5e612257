#include "noisear/gaussian.hpp"

#include <cmath>

namespace noisear {

namespace {
constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5 * ln(2*pi)
}

double logpdf_element(double x, double mean, double log_var) {
    const double diff = x - mean;
    return -kHalfLog2Pi - 0.5 * log_var - diff * diff / (2.0 * std::exp(log_var));
}

double patch_logprob(const std::vector<double>& patch, const GaussianParams& params) {
    require(patch.size() == params.mean.size() && patch.size() == params.log_var.size(),
            "patch/params length mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < patch.size(); ++i)
        total += logpdf_element(patch[i], params.mean[i], params.log_var[i]);
    return total;
}

ElemGrads nll_grads(double x, double mean, double log_var) {
    const double inv_var = std::exp(-log_var);
    const double diff = x - mean;
    return {-diff * inv_var, 0.5 * (1.0 - diff * diff * inv_var)};
}

std::vector<double> sample_patch(const GaussianParams& params, Rng& rng,
                                 SampleMode mode, double temperature) {
    require(temperature >= 0.0, "temperature must be >= 0");
    const std::size_t k = params.mean.size();
    require(params.log_var.size() == k, "params length mismatch");
    std::vector<double> out(k);
    if (mode == SampleMode::Deterministic) {
        out = params.mean;
        return out;
    }
    for (std::size_t i = 0; i < k; ++i) {
        const double eps = rng.normal();
        out[i] = params.mean[i] + temperature * std::exp(0.5 * params.log_var[i]) * eps;
    }
    return out;
}

}  // namespace noisear
