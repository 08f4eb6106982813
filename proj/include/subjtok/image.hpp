#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "subjtok/common.hpp"

namespace subjtok {

/// H×W×C float image with values in [0,1].
class ImageTensor {
 public:
  ImageTensor() = default;
  explicit ImageTensor(Tensor hwc);

  static ImageTensor from_chw(const Tensor& chw);
  static ImageTensor filled(int64_t height, int64_t width, float value, int64_t channels = 3);

  const Tensor& hwc() const { return data_; }
  Tensor chw() const { return data_.permute({2, 0, 1}).contiguous(); }
  int64_t height() const { return data_.size(0); }
  int64_t width() const { return data_.size(1); }
  int64_t channels() const { return data_.size(2); }
  bool empty() const { return !data_.defined(); }

  /// Quantized 8-bit pixels, row-major HWC.
  std::vector<uint8_t> to_bytes() const;

 private:
  Tensor data_;
};

ImageTensor read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImageTensor& image);
std::vector<uint8_t> encode_png(const ImageTensor& image);
ImageTensor decode_png(const std::vector<uint8_t>& bytes);

/// Single-channel heatmap in [0,1] rendered with a blue-to-red ramp.
ImageTensor colorize_heatmap(const Tensor& map01);

/// Bilinear resize of an HWC image.
ImageTensor resize(const ImageTensor& image, int64_t height, int64_t width);

}  // namespace subjtok
