#include "mlattn/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <jpeglib.h>
#include <png.h>

#include "mlattn/error.hpp"

namespace mlattn {

namespace {

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Tokenizer for PNM headers; '#' starts a comment that runs to end of line.
class PnmHeader {
 public:
  PnmHeader(const std::vector<unsigned char>& buf, const std::filesystem::path& path) : buf_(buf), path_(path) {}

  std::string token() {
    skip_space_and_comments();
    std::string t;
    while (pos_ < buf_.size() && !std::isspace(buf_[pos_]) && buf_[pos_] != '#') t.push_back(static_cast<char>(buf_[pos_++]));
    if (t.empty()) throw FormatError(path_.string() + ": truncated PNM header");
    return t;
  }

  std::size_t number() {
    const std::string t = token();
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(t, &used);
      if (used != t.size()) throw std::invalid_argument(t);
      return v;
    } catch (const std::exception&) {
      throw FormatError(fmt::format("{}: bad PNM header field '{}'", path_.string(), t));
    }
  }

  // Comments seen so far, without the leading '#'.
  const std::vector<std::string>& comments() const { return comments_; }
  std::size_t pos() const { return pos_; }
  void skip_one_whitespace() {
    if (pos_ >= buf_.size() || !std::isspace(buf_[pos_])) throw FormatError(path_.string() + ": malformed PNM header");
    ++pos_;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < buf_.size()) {
      if (std::isspace(buf_[pos_])) {
        ++pos_;
      } else if (buf_[pos_] == '#') {
        std::string c;
        ++pos_;
        while (pos_ < buf_.size() && buf_[pos_] != '\n') c.push_back(static_cast<char>(buf_[pos_++]));
        comments_.push_back(c);
      } else {
        break;
      }
    }
  }

  const std::vector<unsigned char>& buf_;
  const std::filesystem::path& path_;
  std::size_t pos_ = 0;
  std::vector<std::string> comments_;
};

struct RawPnm {
  std::size_t width = 0, height = 0, channels = 0, maxval = 0;
  std::vector<double> samples;  // raw integer samples, interleaved
  std::vector<std::string> comments;
};

RawPnm parse_pnm(const std::vector<unsigned char>& buf, const std::filesystem::path& path) {
  PnmHeader hdr(buf, path);
  const std::string magic = hdr.token();
  RawPnm pnm;
  bool binary = false;
  if (magic == "P5" || magic == "P2") {
    pnm.channels = 1;
  } else if (magic == "P6" || magic == "P3") {
    pnm.channels = 3;
  } else {
    throw FormatError(fmt::format("{}: unsupported PNM variant '{}'", path.string(), magic));
  }
  binary = magic == "P5" || magic == "P6";
  pnm.width = hdr.number();
  pnm.height = hdr.number();
  pnm.maxval = hdr.number();
  if (pnm.width == 0 || pnm.height == 0 || pnm.maxval == 0 || pnm.maxval > 65535) {
    throw FormatError(fmt::format("{}: invalid PNM dimensions or maxval", path.string()));
  }
  const std::size_t n = pnm.width * pnm.height * pnm.channels;
  pnm.samples.resize(n);
  if (binary) {
    hdr.skip_one_whitespace();
    const std::size_t bytes = pnm.maxval > 255 ? 2 : 1;
    std::size_t pos = hdr.pos();
    if (buf.size() < pos + n * bytes) throw FormatError(path.string() + ": truncated PNM raster");
    for (std::size_t i = 0; i < n; ++i) {
      pnm.samples[i] = bytes == 2 ? static_cast<double>((buf[pos] << 8) | buf[pos + 1]) : static_cast<double>(buf[pos]);
      pos += bytes;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) pnm.samples[i] = static_cast<double>(hdr.number());
  }
  pnm.comments = hdr.comments();
  return pnm;
}

Tensor interleaved_to_chw(const unsigned char* data, std::size_t width, std::size_t height, std::size_t channels) {
  Tensor out({3, height, width});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src = (y * width + x) * channels + (channels == 1 ? 0 : c);
        out[(c * height + y) * width + x] = data[src] / 255.0;
      }
    }
  }
  return out;
}

Tensor read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&image, path.c_str()) == 0) {
    throw FormatError(fmt::format("{}: {}", path.string(), image.message));
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
  if (png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr) == 0) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw FormatError(fmt::format("{}: {}", path.string(), msg));
  }
  return interleaved_to_chw(buf.data(), image.width, image.height, 3);
}

struct JpegErrorManager {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

Tensor read_jpeg(const std::vector<unsigned char>& bytes, const std::filesystem::path& path) {
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_error_exit;
  std::vector<unsigned char> pixels;
  std::size_t width = 0;
  std::size_t height = 0;
  if (setjmp(err.jump) != 0) {
    jpeg_destroy_decompress(&cinfo);
    throw FormatError(fmt::format("{}: {}", path.string(), err.message));
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  width = cinfo.output_width;
  height = cinfo.output_height;
  pixels.resize(width * height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return interleaved_to_chw(pixels.data(), width, height, 3);
}

}  // namespace

Tensor read_image(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P' && bytes[2] == 'N' && bytes[3] == 'G') {
    return read_png(path);
  }
  if (bytes.size() >= 3 && bytes[0] == 0xFF && bytes[1] == 0xD8 && bytes[2] == 0xFF) return read_jpeg(bytes, path);
  if (bytes.size() >= 2 && bytes[0] == 'P') {
    const RawPnm pnm = parse_pnm(bytes, path);
    Tensor out({3, pnm.height, pnm.width});
    const double inv = 1.0 / static_cast<double>(pnm.maxval);
    for (std::size_t y = 0; y < pnm.height; ++y) {
      for (std::size_t x = 0; x < pnm.width; ++x) {
        for (std::size_t c = 0; c < 3; ++c) {
          const std::size_t src = (y * pnm.width + x) * pnm.channels + (pnm.channels == 1 ? 0 : c);
          out[(c * pnm.height + y) * pnm.width + x] = pnm.samples[src] * inv;
        }
      }
    }
    return out;
  }
  throw FormatError(path.string() + ": unrecognized image format (expected PNM, PNG or JPEG)");
}

void write_ppm(const Tensor& image, const std::filesystem::path& path) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError(fmt::format("write_ppm expects [3,H,W], got {}", shape_str(image.shape())));
  }
  const std::size_t h = image.dim(1);
  const std::size_t w = image.dim(2);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write image " + path.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> raster(w * h * 3);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image[(c * h + y) * w + x], 0.0, 1.0);
        raster[(y * w + x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  }
  out.write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  if (!out) throw IoError("failed writing image " + path.string());
}

void write_density_pgm(const DensityMap& map, const std::filesystem::path& path) {
  const std::size_t h = map.height();
  const std::size_t w = map.width();
  double mx = 0.0;
  for (double v : map.values.data()) mx = std::max(mx, v);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write density map " + path.string());
  out << "P5\n"
      << fmt::format("# mlattn-density max={:.17g} count={:.17g} scale={}\n", mx, count(map), map.scale) << w << ' '
      << h << "\n65535\n";
  std::vector<unsigned char> raster(w * h * 2);
  for (std::size_t i = 0; i < w * h; ++i) {
    const double v = mx > 0.0 ? std::clamp(map.values[i], 0.0, mx) / mx : 0.0;
    const auto s = static_cast<unsigned>(std::lround(v * 65535.0));
    raster[2 * i] = static_cast<unsigned char>(s >> 8);
    raster[2 * i + 1] = static_cast<unsigned char>(s & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  if (!out) throw IoError("failed writing density map " + path.string());
}

DensityImage read_density_pgm(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  const RawPnm pnm = parse_pnm(bytes, path);
  if (pnm.channels != 1 || pnm.maxval != 65535) {
    throw FormatError(path.string() + ": density maps are 16-bit single-channel PGM");
  }
  DensityImage out;
  bool found = false;
  for (const auto& c : pnm.comments) {
    std::istringstream in(c);
    std::string tag;
    in >> tag;
    if (tag != "mlattn-density") continue;
    std::string field;
    while (in >> field) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = field.substr(0, eq);
      const std::string val = field.substr(eq + 1);
      if (key == "max") out.max = std::stod(val);
      if (key == "count") out.raw_count = std::stod(val);
      if (key == "scale") out.map.scale = std::stoul(val);
    }
    found = true;
  }
  if (!found) throw FormatError(path.string() + ": missing mlattn-density header comment");
  out.map.values = Tensor({1, pnm.height, pnm.width});
  for (std::size_t i = 0; i < pnm.samples.size(); ++i) out.map.values[i] = pnm.samples[i] / 65535.0 * out.max;
  return out;
}

}  // namespace mlattn
