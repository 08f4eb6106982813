#include "subjtok/image.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <memory>

namespace subjtok {

ImageTensor::ImageTensor(Tensor hwc) : data_(std::move(hwc)) {
  detail::expect_shape(data_.dim() == 3, "image must be H×W×C");
  data_ = data_.to(torch::kFloat32).contiguous();
}

ImageTensor ImageTensor::from_chw(const Tensor& chw) {
  detail::expect_shape(chw.dim() == 3, "expected C×H×W tensor");
  return ImageTensor(chw.detach().to(torch::kCPU).permute({1, 2, 0}).contiguous());
}

ImageTensor ImageTensor::filled(int64_t height, int64_t width, float value, int64_t channels) {
  return ImageTensor(torch::full({height, width, channels}, value));
}

std::vector<uint8_t> ImageTensor::to_bytes() const {
  auto q = (data_.clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
  const auto* p = q.data_ptr<uint8_t>();
  return {p, p + q.numel()};
}

namespace {

struct PngBuffer {
  const std::vector<uint8_t>* bytes;
  size_t offset = 0;
};

void read_from_buffer(png_structp png, png_bytep out, png_size_t length) {
  auto* buf = static_cast<PngBuffer*>(png_get_io_ptr(png));
  if (buf->offset + length > buf->bytes->size()) png_error(png, "truncated png");
  std::memcpy(out, buf->bytes->data() + buf->offset, length);
  buf->offset += length;
}

void write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void flush_noop(png_structp) {}

ImageTensor decode_with(png_structp png, png_infop info) {
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const auto w = png_get_image_width(png, info);
  const auto h = png_get_image_height(png, info);
  const auto rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != w * 3) throw DataError("unsupported png layout");
  std::vector<uint8_t> pixels(static_cast<size_t>(h) * rowbytes);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = pixels.data() + y * rowbytes;
  png_read_image(png, rows.data());
  auto t = torch::from_blob(pixels.data(), {static_cast<int64_t>(h), static_cast<int64_t>(w), 3},
                            torch::kUInt8)
               .to(torch::kFloat32)
               .div(255.0);
  return ImageTensor(t.clone());
}

void encode_with(png_structp png, png_infop info, const ImageTensor& image) {
  detail::expect_shape(image.channels() == 3 || image.channels() == 1, "png needs 1 or 3 channels");
  const auto bytes = image.to_bytes();
  const auto w = static_cast<png_uint_32>(image.width());
  const auto h = static_cast<png_uint_32>(image.height());
  const int color = image.channels() == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
  png_set_IHDR(png, info, w, h, 8, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const size_t stride = static_cast<size_t>(w) * static_cast<size_t>(image.channels());
  for (png_uint_32 y = 0; y < h; ++y) {
    png_write_row(png, const_cast<png_bytep>(bytes.data() + y * stride));
  }
  png_write_end(png, nullptr);
}

}  // namespace

ImageTensor decode_png(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw DataError("not a png");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt png");
  }
  PngBuffer buf{&bytes};
  png_set_read_fn(png, &buf, read_from_buffer);
  auto image = decode_with(png, info);
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

ImageTensor read_png(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), std::fclose);
  if (!fp) throw DataError("cannot open " + path.string());
  std::vector<uint8_t> bytes;
  uint8_t chunk[8192];
  size_t n;
  while ((n = std::fread(chunk, 1, sizeof chunk, fp.get())) > 0) bytes.insert(bytes.end(), chunk, chunk + n);
  return decode_png(bytes);
}

std::vector<uint8_t> encode_png(const ImageTensor& image) {
  std::vector<uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("png encoding failed");
  }
  png_set_write_fn(png, &out, write_to_vector, flush_noop);
  encode_with(png, info, image);
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_png(const std::filesystem::path& path, const ImageTensor& image) {
  const auto bytes = encode_png(image);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), std::fclose);
  if (!fp) throw DataError("cannot write " + path.string());
  std::fwrite(bytes.data(), 1, bytes.size(), fp.get());
}

ImageTensor colorize_heatmap(const Tensor& map01) {
  detail::expect_shape(map01.dim() == 2, "heatmap must be 2-D");
  auto m = map01.to(torch::kFloat32).clamp(0.0, 1.0);
  auto r = m;
  auto g = 1.0 - (2.0 * m - 1.0).abs();
  auto b = 1.0 - m;
  return ImageTensor(torch::stack({r, g, b}, -1));
}

ImageTensor resize(const ImageTensor& image, int64_t height, int64_t width) {
  namespace F = torch::nn::functional;
  auto x = image.chw().unsqueeze(0);
  auto y = F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{height, width})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
  return ImageTensor::from_chw(y.squeeze(0).clamp(0.0, 1.0));
}

}  // namespace subjtok
