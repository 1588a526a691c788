#pragma once

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <jpeglib.h>
#include <png.h>

#include "fsd/errors.hpp"
#include "fsd/network.hpp"
#include "fsd/rng.hpp"

namespace fsd {

/// 8-bit RGB image, row-major HWC.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }
};

namespace detail {

inline Image read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw IngestionError(fmt::format("cannot decode PNG {}: {}", path.string(), img.message));
  img.format = PNG_FORMAT_RGB;
  Image out;
  out.width = img.width;
  out.height = img.height;
  out.rgb.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw IngestionError(fmt::format("cannot decode PNG {}: {}", path.string(), msg));
  }
  return out;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

// No C++ objects with non-trivial destructors may be created between setjmp
// and the last libjpeg call, so the decode writes into caller-owned storage.
inline bool decode_jpeg(std::FILE* file, Image& out, char* message) {
  jpeg_decompress_struct cinfo;
  JpegErrorManager err;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    std::snprintf(message, JMSG_LENGTH_MAX, "%s", err.message);
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out.width = cinfo.output_width;
  out.height = cinfo.output_height;
  out.rgb.resize(out.width * out.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

inline Image read_jpeg(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IngestionError(fmt::format("cannot open {}", path.string()));
  Image out;
  char message[JMSG_LENGTH_MAX] = {};
  if (!decode_jpeg(file.get(), out, message))
    throw IngestionError(fmt::format("cannot decode JPEG {}: {}", path.string(), message));
  return out;
}

}  // namespace detail

inline bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

/// Decodes PNG or JPEG to RGB; grayscale and palette images are expanded to 3 channels.
inline Image read_image(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (ext == ".png") return detail::read_png(path);
  if (ext == ".jpg" || ext == ".jpeg") return detail::read_jpeg(path);
  throw IngestionError(fmt::format("unsupported image type {}", path.string()));
}

inline void write_png(const Image& img, const std::filesystem::path& path) {
  png_image out{};
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(img.width);
  out.height = static_cast<png_uint_32>(img.height);
  out.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&out, path.c_str(), 0, img.rgb.data(), 0, nullptr))
    throw IoError(fmt::format("cannot write PNG {}: {}", path.string(), out.message));
}

struct PreprocessConfig {
  std::size_t resize = 256;
  std::size_t crop = 224;
  /// Scale the shorter side to `resize` instead of squashing to resize x resize.
  bool keep_aspect = false;

  bool operator==(const PreprocessConfig&) const = default;
};

enum class Mode { Train, Eval };

struct CropWindow {
  std::size_t x = 0;
  std::size_t y = 0;
  bool flip = false;
};

/// Bilinear resize (half-pixel centers) to out_w x out_h.
/// Returns planar CHW floats in [0, 1].
inline std::vector<float> resize_bilinear(const Image& img, std::size_t out_w, std::size_t out_h) {
  const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
  const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
  std::vector<float> out(3 * out_w * out_h);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = img.at(x0, y0, c) * (1.0 - wx) + img.at(x1, y0, c) * wx;
        const double bottom = img.at(x0, y1, c) * (1.0 - wx) + img.at(x1, y1, c) * wx;
        out[(c * out_h + y) * out_w + x] = static_cast<float>((top * (1.0 - wy) + bottom * wy) / 255.0);
      }
    }
  }
  return out;
}

/// Bilinear resize so the shorter side equals `shorter`, keeping the aspect ratio.
inline std::vector<float> resize_shorter_side(const Image& img, std::size_t shorter, std::size_t& out_w, std::size_t& out_h) {
  if (img.width <= img.height) {
    out_w = shorter;
    out_h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(img.height) * shorter / img.width)));
  } else {
    out_h = shorter;
    out_w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(img.width) * shorter / img.height)));
  }
  return resize_bilinear(img, out_w, out_h);
}

inline CropWindow random_crop_window(std::size_t width, std::size_t height, std::size_t crop, Rng& rng) {
  CropWindow w;
  w.x = rng.index(width - crop + 1);
  w.y = rng.index(height - crop + 1);
  w.flip = rng.coin();
  return w;
}

inline CropWindow center_crop_window(std::size_t width, std::size_t height, std::size_t crop) {
  return {(width - crop) / 2, (height - crop) / 2, false};
}

/// Train: resize (to resize x resize by default), random crop, horizontal flip with p = 0.5. Eval: resize, center crop.
inline Tensor preprocess(const Image& img, Mode mode, Rng& rng, const PreprocessConfig& cfg = {}) {
  if (img.width < 8 || img.height < 8)
    throw InputError(fmt::format("image {}x{} is smaller than 8x8", img.width, img.height));
  if (cfg.crop == 0 || cfg.crop > cfg.resize)
    throw ConfigError(fmt::format("crop {} must be in [1, resize={}]", cfg.crop, cfg.resize));
  std::size_t w = cfg.resize, h = cfg.resize;
  const auto resized = cfg.keep_aspect ? resize_shorter_side(img, cfg.resize, w, h) : resize_bilinear(img, w, h);
  const CropWindow win = mode == Mode::Train ? random_crop_window(w, h, cfg.crop, rng) : center_crop_window(w, h, cfg.crop);
  const std::size_t n = cfg.crop;
  Tensor out(3 * n * n);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const std::size_t sx = win.flip ? win.x + (n - 1 - x) : win.x + x;
        out[(c * n + y) * n + x] = resized[(c * h + win.y + y) * w + sx];
      }
  return out;
}

}  // namespace fsd
