#include "hrdepth/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace hrdepth {

namespace {

struct File {
  std::FILE* f = nullptr;
  ~File() {
    if (f) std::fclose(f);
  }
};

struct Decoded {
  int width = 0, height = 0, channels = 0, bit_depth = 0;
  std::vector<unsigned char> rows;  // packed, big-endian for 16-bit
};

Decoded decode(const std::string& path, bool keep16, bool force_rgb) {
  File file{std::fopen(path.c_str(), "rb")};
  if (!file.f) throw ImageError("cannot open " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.f) != 8 || png_sig_cmp(sig, 0, 8) != 0) throw ImageError(path + ": not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw ImageError("libpng initialisation failed");
  }
  Decoded d;
  std::vector<png_bytep> ptrs;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError(path + ": corrupt PNG data");
  }
  png_init_io(png, file.f);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (!keep16) png_set_strip_16(png);
  png_set_strip_alpha(png);
  if (force_rgb && (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)) png_set_gray_to_rgb(png);
  if (!force_rgb && (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE))
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  d.width = static_cast<int>(png_get_image_width(png, info));
  d.height = static_cast<int>(png_get_image_height(png, info));
  d.channels = png_get_channels(png, info);
  d.bit_depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  d.rows.resize(stride * static_cast<std::size_t>(d.height));
  ptrs.resize(static_cast<std::size_t>(d.height));
  for (int y = 0; y < d.height; ++y) ptrs[y] = d.rows.data() + stride * static_cast<std::size_t>(y);
  png_read_image(png, ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return d;
}

void encode(const std::string& path, int width, int height, int color_type, int bit_depth,
            const std::vector<unsigned char>& rows) {
  File file{std::fopen(path.c_str(), "wb")};
  if (!file.f) throw ImageError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw ImageError("libpng initialisation failed");
  }
  std::vector<png_bytep> ptrs(static_cast<std::size_t>(height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError(path + ": PNG encoding failed");
  }
  png_init_io(png, file.f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = rows.size() / static_cast<std::size_t>(height);
  for (int y = 0; y < height; ++y) ptrs[y] = const_cast<png_bytep>(rows.data() + stride * static_cast<std::size_t>(y));
  png_write_image(png, ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

unsigned char to8(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

Tensor read_png_rgb(const std::string& path) {
  Decoded d = decode(path, false, true);
  const std::size_t P = static_cast<std::size_t>(d.width) * d.height;
  std::vector<double> v(3 * P);
  for (std::size_t p = 0; p < P; ++p)
    for (int c = 0; c < 3; ++c) v[c * P + p] = d.rows[p * 3 + c] / 255.0;
  return Tensor(Shape{1, 3, d.height, d.width}, std::move(v));
}

void write_png_rgb(const std::string& path, const Tensor& image) {
  const Shape s = image.shape();
  if (s.n != 1 || (s.c != 3 && s.c != 1)) throw ContractViolation("write_png_rgb expects (1, 3|1, H, W), got " + s.str());
  const std::size_t P = s.plane();
  auto x = image.data();
  std::vector<unsigned char> rows(3 * P);
  for (std::size_t p = 0; p < P; ++p)
    for (int c = 0; c < 3; ++c) rows[p * 3 + c] = to8(x[(s.c == 3 ? c : 0) * P + p]);
  encode(path, s.w, s.h, PNG_COLOR_TYPE_RGB, 8, rows);
}

Gray16 read_png_gray16(const std::string& path) {
  Decoded d = decode(path, true, false);
  Gray16 g{d.width, d.height, {}};
  const std::size_t P = static_cast<std::size_t>(d.width) * d.height;
  g.values.resize(P);
  for (std::size_t p = 0; p < P; ++p) {
    g.values[p] = d.bit_depth == 16 ? static_cast<unsigned short>((d.rows[2 * p] << 8) | d.rows[2 * p + 1])
                                    : static_cast<unsigned short>(d.rows[p] * 257);
  }
  return g;
}

void write_png_gray16(const std::string& path, const Gray16& img) {
  if (img.values.size() != static_cast<std::size_t>(img.width) * img.height) throw ContractViolation("gray16 size mismatch");
  std::vector<unsigned char> rows(2 * img.values.size());
  for (std::size_t p = 0; p < img.values.size(); ++p) {
    rows[2 * p] = static_cast<unsigned char>(img.values[p] >> 8);
    rows[2 * p + 1] = static_cast<unsigned char>(img.values[p] & 0xff);
  }
  encode(path, img.width, img.height, PNG_COLOR_TYPE_GRAY, 16, rows);
}

Tensor read_depth_png(const std::string& path, double scale) {
  Gray16 g = read_png_gray16(path);
  std::vector<double> v(g.values.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = g.values[i] / scale;
  return Tensor(Shape{1, 1, g.height, g.width}, std::move(v));
}

void write_depth_png(const std::string& path, const Tensor& depth, double scale) {
  const Shape s = depth.shape();
  if (s.n != 1 || s.c != 1) throw ContractViolation("write_depth_png expects (1, 1, H, W), got " + s.str());
  Gray16 g{s.w, s.h, std::vector<unsigned short>(s.plane())};
  auto x = depth.data();
  for (std::size_t i = 0; i < g.values.size(); ++i) {
    const double q = std::round(std::max(0.0, x[i]) * scale);
    g.values[i] = static_cast<unsigned short>(std::min(q, 65535.0));
  }
  write_png_gray16(path, g);
}

}  // namespace hrdepth
