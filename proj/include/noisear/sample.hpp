#pragma once

#include <cstdint>
#include <vector>

#include "noisear/model.hpp"

namespace noisear {

struct SampleResult {
    NoiseTensor tensor;
    std::vector<double> per_patch_logprob;
    double total_logprob = 0.0;
    std::uint64_t seed = 0;
    SampleMode mode = SampleMode::Stochastic;
    double temperature = 1.0;
};

// Autoregressive generation: predict, sample, append, repeat; then depatchify.
SampleResult sample_noise(const Model& model, const Condition& c, std::uint64_t seed,
                          SampleMode mode = SampleMode::Stochastic,
                          double temperature = 1.0);

struct SequenceLogprob {
    double total = 0.0;
    std::vector<double> per_patch;
};

// Log-probability of an existing tensor under the model (teacher-forced pass).
SequenceLogprob sequence_logprob(const Model& model, const NoiseTensor& t,
                                 const Condition& c);

}  // namespace noisear
