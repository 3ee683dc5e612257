#include "noisear/patch_codec.hpp"

#include <cmath>

namespace noisear {

void TensorShape::validate() const {
    require(channels >= 1, "channels must be >= 1");
    require(patch_size >= 1, "patch_size must be >= 1");
    require(height >= patch_size && width >= patch_size,
            "height/width must be at least patch_size");
    require(height % patch_size == 0, "height not divisible by patch_size");
    require(width % patch_size == 0, "width not divisible by patch_size");
}

void NoiseTensor::validate() const {
    shape.validate();
    require(values.size() == shape.total_elems(), "tensor value count mismatch");
    for (double v : values)
        require(std::isfinite(v), "tensor contains non-finite value");
}

void PatchSequence::validate() const {
    shape.validate();
    require(patches.size() == shape.num_patches(), "wrong patch count");
    for (const auto& p : patches)
        require(p.size() == shape.patch_elems(), "wrong patch length");
}

std::size_t patch_index(const TensorShape& shape, std::size_t patch, std::size_t elem) {
    const std::size_t grid_w = shape.width / shape.patch_size;
    const std::size_t p = shape.patch_size;
    const std::size_t py = patch / grid_w;  // patch grid row
    const std::size_t px = patch % grid_w;  // patch grid column
    // within-patch flattening: channel outermost, then row, then column
    const std::size_t c = elem / (p * p);
    const std::size_t r = (elem / p) % p;
    const std::size_t col = elem % p;
    const std::size_t row = py * p + r;
    const std::size_t column = px * p + col;
    return (c * shape.height + row) * shape.width + column;
}

std::vector<std::size_t> patch_index_map(const TensorShape& shape) {
    shape.validate();
    const std::size_t m = shape.num_patches();
    const std::size_t k = shape.patch_elems();
    std::vector<std::size_t> map(m * k);
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t e = 0; e < k; ++e)
            map[j * k + e] = patch_index(shape, j, e);
    return map;
}

PatchSequence patchify(const NoiseTensor& t) {
    t.validate();
    const std::size_t m = t.shape.num_patches();
    const std::size_t k = t.shape.patch_elems();
    PatchSequence s;
    s.shape = t.shape;
    s.patches.assign(m, std::vector<double>(k));
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t e = 0; e < k; ++e)
            s.patches[j][e] = t.values[patch_index(t.shape, j, e)];
    return s;
}

NoiseTensor depatchify(const PatchSequence& s) {
    s.validate();
    NoiseTensor t;
    t.shape = s.shape;
    t.values.assign(s.shape.total_elems(), 0.0);
    const std::size_t m = s.shape.num_patches();
    const std::size_t k = s.shape.patch_elems();
    for (std::size_t j = 0; j < m; ++j)
        for (std::size_t e = 0; e < k; ++e)
            t.values[patch_index(s.shape, j, e)] = s.patches[j][e];
    return t;
}

}  // namespace noisear
