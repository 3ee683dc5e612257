#include "noisear/sample.hpp"

#include <numeric>

#include "noisear/gaussian.hpp"

namespace noisear {

SampleResult sample_noise(const Model& model, const Condition& c, std::uint64_t seed,
                          SampleMode mode, double temperature) {
    require(temperature >= 0.0, "temperature must be >= 0");
    const std::size_t m = model.config().shape.num_patches();

    Rng rng(seed);
    DecodeCache cache = model.begin_decode(c);
    PatchSequence seq;
    seq.shape = model.config().shape;
    seq.patches.reserve(m);

    SampleResult result;
    result.seed = seed;
    result.mode = mode;
    result.temperature = temperature;
    result.per_patch_logprob.reserve(m);

    const std::vector<double>* prev = nullptr;
    for (std::size_t j = 0; j < m; ++j) {
        const GaussianParams params = model.decode_step(cache, prev);
        std::vector<double> patch = sample_patch(params, rng, mode, temperature);
        result.per_patch_logprob.push_back(patch_logprob(patch, params));
        seq.patches.push_back(std::move(patch));
        prev = &seq.patches.back();
    }
    result.total_logprob = std::accumulate(result.per_patch_logprob.begin(),
                                           result.per_patch_logprob.end(), 0.0);
    result.tensor = depatchify(seq);
    return result;
}

SequenceLogprob sequence_logprob(const Model& model, const NoiseTensor& t,
                                 const Condition& c) {
    require(t.shape == model.config().shape, "tensor shape does not match model config");
    const PatchSequence seq = patchify(t);
    const auto params = model.forward_teacher_forced(seq, c);
    SequenceLogprob out;
    out.per_patch.reserve(params.size());
    for (std::size_t j = 0; j < params.size(); ++j) {
        out.per_patch.push_back(patch_logprob(seq.patches[j], params[j]));
        out.total += out.per_patch.back();
    }
    return out;
}

}  // namespace noisear
