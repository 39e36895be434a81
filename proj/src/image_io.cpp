#include "brainprog/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstdint>
#include <fstream>
#include <memory>
#include <vector>

// jpeglib.h needs FILE and size_t declared first.
#include <jpeglib.h>

#include "brainprog/error.hpp"

namespace brainprog::image {

namespace {

RgbImage from_interleaved(const std::uint8_t* data, int w, int h, int channels) {
  ImageGrid r(w, h), g(w, h), b(w, h);
  const std::size_t n = static_cast<std::size_t>(w) * h;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* px = data + i * channels;
    r[i] = px[0] / 255.0;
    g[i] = (channels == 1 ? px[0] : px[1]) / 255.0;
    b[i] = (channels == 1 ? px[0] : px[2]) / 255.0;
  }
  return RgbImage(std::move(r), std::move(g), std::move(b));
}

RgbImage load_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw LoadError("cannot read PNG '" + path.string() + "': " + image.message);
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw LoadError("cannot decode PNG '" + path.string() + "': " + msg);
  }
  return from_interleaved(buffer.data(), static_cast<int>(image.width), static_cast<int>(image.height),
                          color ? 3 : 1);
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

RgbImage load_jpeg(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!file) throw LoadError("cannot open '" + path.string() + "'");

  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  std::vector<std::uint8_t> buffer;
  int w = 0, h = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw LoadError("cannot decode JPEG '" + path.string() + "': " + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  w = static_cast<int>(cinfo.output_width);
  h = static_cast<int>(cinfo.output_height);
  buffer.resize(static_cast<std::size_t>(w) * h * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = buffer.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_interleaved(buffer.data(), w, h, 3);
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void write_png(const std::filesystem::path& path, int w, int h, std::uint32_t format,
               const std::vector<std::uint8_t>& data) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = format;
  if (!png_image_write_to_file(&image, path.c_str(), 0, data.data(), 0, nullptr)) {
    throw Error("cannot write PNG '" + path.string() + "': " + image.message);
  }
}

}  // namespace

RgbImage load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open '" + path.string() + "'");
  unsigned char magic[8] = {};
  in.read(reinterpret_cast<char*>(magic), sizeof magic);
  if (in.gcount() >= 8 && png_sig_cmp(magic, 0, 8) == 0) return load_png(path);
  if (in.gcount() >= 3 && magic[0] == 0xFF && magic[1] == 0xD8 && magic[2] == 0xFF) return load_jpeg(path);
  throw LoadError("unsupported image format '" + path.string() + "'");
}

void save_png(const RgbImage& img, const std::filesystem::path& path) {
  const int w = img.width();
  const int h = img.height();
  std::vector<std::uint8_t> data(static_cast<std::size_t>(w) * h * 3);
  for (std::size_t i = 0; i < img.r.size(); ++i) {
    data[3 * i] = to_byte(img.r[i]);
    data[3 * i + 1] = to_byte(img.g[i]);
    data[3 * i + 2] = to_byte(img.b[i]);
  }
  write_png(path, w, h, PNG_FORMAT_RGB, data);
}

void save_png(const ImageGrid& img, const std::filesystem::path& path) {
  std::vector<std::uint8_t> data(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) data[i] = to_byte(img[i]);
  write_png(path, img.width(), img.height(), PNG_FORMAT_GRAY, data);
}

RgbImage quantize8(const RgbImage& img) {
  RgbImage out = img;
  for (ImageGrid* ch : {&out.r, &out.g, &out.b}) {
    for (auto& v : ch->values()) v = to_byte(v) / 255.0;
  }
  return out;
}

}  // namespace brainprog::image
