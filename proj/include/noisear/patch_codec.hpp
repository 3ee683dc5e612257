#pragma once

#include <cstddef>
#include <vector>

#include "noisear/common.hpp"

namespace noisear {

// Geometry of a noise tensor and its patch grid.
struct TensorShape {
    std::size_t channels = 1;
    std::size_t height = 8;
    std::size_t width = 8;
    std::size_t patch_size = 2;

    std::size_t num_patches() const {
        return (height / patch_size) * (width / patch_size);
    }
    std::size_t patch_elems() const {
        return patch_size * patch_size * channels;
    }
    std::size_t total_elems() const { return channels * height * width; }

    void validate() const;

    bool operator==(const TensorShape&) const = default;
};

// Channel-major (channel, row, column) flat value layout.
struct NoiseTensor {
    TensorShape shape;
    std::vector<double> values;

    void validate() const;
};

// Raster-ordered patches, each flattened (channel, row, column) within the patch.
struct PatchSequence {
    TensorShape shape;
    std::vector<std::vector<double>> patches;

    void validate() const;
};

PatchSequence patchify(const NoiseTensor& t);
NoiseTensor depatchify(const PatchSequence& s);

// Flat tensor index of within-patch element k of patch j.
// The full map (j, k) -> index is a bijection onto [0, C*H*W).
std::size_t patch_index(const TensorShape& shape, std::size_t patch, std::size_t elem);

// The entire map as a table: result[j * K + k] = flat tensor index.
std::vector<std::size_t> patch_index_map(const TensorShape& shape);

}  // namespace noisear
