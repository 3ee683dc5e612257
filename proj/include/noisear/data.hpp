#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "noisear/model.hpp"
#include "noisear/patch_codec.hpp"
#include "noisear/rng.hpp"

namespace noisear {

// Closed-form synthetic generator: every element of patch j is drawn from
// N(b_c + a_c * m_{j-1}, s^2) where m_{j-1} is the mean of the realized
// elements of patch j-1 (m_0 = 0). Coupling and bias come from the first
// condition token.
struct OracleSpec {
    double coupling = 0.0;     // a_c in {-0.5, 0, 0.5}
    double bias = 0.0;         // b_c = 0.1 * t
    double noise_scale = 0.8;  // s

    static OracleSpec for_condition(const Condition& c);
};

struct Dataset {
    std::uint32_t channels = 1;
    std::uint32_t height = 8;
    std::uint32_t width = 8;
    std::uint32_t cond_max_len = 8;
    std::uint32_t vocab_size = 16;
    std::vector<std::pair<Condition, NoiseTensor>> records;

    bool matches(const TensorShape& shape) const {
        return channels == shape.channels && height == shape.height &&
               width == shape.width;
    }
};

NoiseTensor oracle_generate(const Condition& c, const TensorShape& shape, Rng& rng);

// Mean per-element NLL of t under the oracle law, with realized prefix means.
double oracle_nll(const NoiseTensor& t, const Condition& c);

// Per-element mean of the oracle conditional means, given t's realized prefixes.
double oracle_conditional_mean(const NoiseTensor& t, const Condition& c);

// NARD file: magic "NARD", u32 LE version (=1), u64 LE record count,
// C/H/W/cond_max_len/vocab_size u32 LE, then per record: condition length
// u32 LE, tokens u32 LE, tensor values f32 LE (channel-major).
void write_dataset(const Dataset& d, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace noisear
