#pragma once

// Raster I/O (binary PGM/PPM), resizing, dataset splits and a synthetic
// shapes dataset.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gpunet/tensor.hpp"

namespace gpunet {

class ImageError : public Error {
public:
    enum class Kind { io, bad_magic, bad_header, bad_maxval, truncated };

    ImageError(Kind kind, const std::string& msg) : Error(msg), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

/// Reads P5 (1 channel) or P6 (3 channels) with maxval 255 into a (1,c,h,w)
/// tensor scaled to [0,1].
Tensor4<float> load_image(const std::filesystem::path& path);
Tensor4<float> decode_image(const std::string& bytes);

/// Writes batch item 0 as P5 (1 channel) or P6 (3 channels), quantizing with
/// round(255 * clamp(x, 0, 1)).
void save_image(const Tensor4<float>& t, const std::filesystem::path& path);
std::string encode_image(const Tensor4<float>& t);

/// Bilinear resize with half-pixel centers (corners not aligned).
Tensor4<float> resize_bilinear(const Tensor4<float>& t, std::size_t out_h, std::size_t out_w);
/// Bilinear resize followed by re-binarization at 0.5.
Tensor4<float> resize_mask(const Tensor4<float>& mask, std::size_t out_h, std::size_t out_w);

struct SplitSpec {
    double train = 0.7, val = 0.1, test = 0.2;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Split {
    std::vector<std::string> train, val, test;
};

/// Seeded shuffle, then contiguous slices. val and test sizes are
/// round(n * fraction); train takes the remainder.
Split split_dataset(const std::vector<std::string>& ids, const SplitSpec& spec);

struct Sample {
    Tensor4<float> image;  // (1, c, h, w) in [0,1]
    Tensor4<float> mask;   // (1, 1, h, w), values exactly 0 or 1
    std::string id;
};

/// Each sample holds 1-3 ellipses/rectangles as foreground. The image is a
/// coverage-weighted (anti-aliased) foreground intensity over a textured
/// background plus Gaussian noise (sigma 0.1); the mask is coverage >= 0.5.
/// Foreground fraction is kept in [0.05, 0.6]. Deterministic per arguments.
std::vector<Sample> synth_shapes(std::size_t count, std::size_t h, std::size_t w, std::uint64_t seed);

/// Reads `manifest.txt` (one id per line) with `images/<id>.pgm|ppm` and
/// `masks/<id>.pgm` beneath `dir`.
std::vector<Sample> load_dataset_dir(const std::filesystem::path& dir);
/// Writes the layout read by load_dataset_dir.
void save_dataset_dir(const std::vector<Sample>& samples, const std::filesystem::path& dir);

/// Min-max normalizes a (1,1,h,w) map to [0,1]; constant maps become 128/255
/// so they encode as mid-gray 128.
Tensor4<float> normalize_map(const Tensor4<float>& map);

/// Tiles equally sized (1,1,h,w) maps row-major on a near-square grid
/// (ceil(sqrt(n)) columns) separated by `gap` black pixels.
Tensor4<float> contact_sheet(const std::vector<Tensor4<float>>& maps, std::size_t gap = 2);

std::vector<Sample> select_ids(const std::vector<Sample>& samples, const std::vector<std::string>& ids);

}  // namespace gpunet
