#include "noisear/data.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "noisear/wire.hpp"

namespace noisear {

namespace {
constexpr double kHalfLog2Pi = 0.9189385332046727;
using namespace wire;
}  // namespace

OracleSpec OracleSpec::for_condition(const Condition& c) {
    require(!c.tokens.empty(), "condition must be nonempty");
    const std::uint32_t t = c.tokens.front();
    OracleSpec spec;
    spec.coupling = 0.5 * (static_cast<double>(t % 3) - 1.0);
    spec.bias = 0.1 * static_cast<double>(t);
    spec.noise_scale = 0.8;
    return spec;
}

NoiseTensor oracle_generate(const Condition& c, const TensorShape& shape, Rng& rng) {
    shape.validate();
    const OracleSpec spec = OracleSpec::for_condition(c);
    const std::size_t m = shape.num_patches();
    const std::size_t k = shape.patch_elems();

    PatchSequence s;
    s.shape = shape;
    s.patches.assign(m, std::vector<double>(k));
    double prev_mean = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
        const double mu = spec.bias + spec.coupling * prev_mean;
        double sum = 0.0;
        for (std::size_t e = 0; e < k; ++e) {
            const double x = mu + spec.noise_scale * rng.normal();
            s.patches[j][e] = x;
            sum += x;
        }
        prev_mean = sum / static_cast<double>(k);
    }
    return depatchify(s);
}

double oracle_nll(const NoiseTensor& t, const Condition& c) {
    const OracleSpec spec = OracleSpec::for_condition(c);
    const PatchSequence s = patchify(t);
    const std::size_t m = t.shape.num_patches();
    const std::size_t k = t.shape.patch_elems();
    const double log_s = std::log(spec.noise_scale);
    const double inv_2s2 = 1.0 / (2.0 * spec.noise_scale * spec.noise_scale);

    double total = 0.0;
    double prev_mean = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
        const double mu = spec.bias + spec.coupling * prev_mean;
        double sum = 0.0;
        for (std::size_t e = 0; e < k; ++e) {
            const double x = s.patches[j][e];
            const double diff = x - mu;
            total += kHalfLog2Pi + log_s + diff * diff * inv_2s2;
            sum += x;
        }
        prev_mean = sum / static_cast<double>(k);
    }
    return total / static_cast<double>(m * k);
}

double oracle_conditional_mean(const NoiseTensor& t, const Condition& c) {
    const OracleSpec spec = OracleSpec::for_condition(c);
    const PatchSequence s = patchify(t);
    const std::size_t m = t.shape.num_patches();
    const std::size_t k = t.shape.patch_elems();
    double total = 0.0;
    double prev_mean = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
        const double mu = spec.bias + spec.coupling * prev_mean;
        total += mu;
        double sum = 0.0;
        for (std::size_t e = 0; e < k; ++e) sum += s.patches[j][e];
        prev_mean = sum / static_cast<double>(k);
    }
    return total / static_cast<double>(m);
}

void write_dataset(const Dataset& d, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path);
    out.write("NARD", 4);
    write_u32(out, 1);
    write_u64(out, d.records.size());
    write_u32(out, d.channels);
    write_u32(out, d.height);
    write_u32(out, d.width);
    write_u32(out, d.cond_max_len);
    write_u32(out, d.vocab_size);
    const std::size_t n_elems =
        static_cast<std::size_t>(d.channels) * d.height * d.width;
    for (const auto& [cond, tensor] : d.records) {
        if (tensor.values.size() != n_elems)
            throw invalid_input("record tensor does not match dataset shape");
        write_u32(out, static_cast<std::uint32_t>(cond.tokens.size()));
        for (auto t : cond.tokens) write_u32(out, t);
        for (double v : tensor.values) write_f32(out, static_cast<float>(v));
    }
    if (!out) throw io_error("write failed: " + path);
}

Dataset read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open: " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "NARD", 4) != 0)
        throw io_error("bad dataset magic");
    if (read_u32(in) != 1) throw io_error("unsupported dataset version");
    const std::uint64_t count = read_u64(in);
    Dataset d;
    d.channels = read_u32(in);
    d.height = read_u32(in);
    d.width = read_u32(in);
    d.cond_max_len = read_u32(in);
    d.vocab_size = read_u32(in);
    if (d.channels == 0 || d.height == 0 || d.width == 0)
        throw io_error("corrupt dataset header: zero dimension");
    const std::size_t n_elems =
        static_cast<std::size_t>(d.channels) * d.height * d.width;
    d.records.reserve(count);
    for (std::uint64_t r = 0; r < count; ++r) {
        const std::uint32_t cond_len = read_u32(in);
        if (cond_len == 0 || cond_len > d.cond_max_len)
            throw io_error("corrupt record: bad condition length");
        Condition cond;
        cond.tokens.resize(cond_len);
        for (auto& t : cond.tokens) {
            t = read_u32(in);
            if (t >= d.vocab_size) throw io_error("corrupt record: token out of vocabulary");
        }
        NoiseTensor tensor;
        tensor.shape = {d.channels, d.height, d.width, 1};
        tensor.values.resize(n_elems);
        for (auto& v : tensor.values) v = static_cast<double>(read_f32(in));
        d.records.emplace_back(std::move(cond), std::move(tensor));
    }
    return d;
}

}  // namespace noisear
