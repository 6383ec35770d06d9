#include "mlattn/importer.hpp"

#include <algorithm>
#include <cctype>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "mlattn/error.hpp"
#include "mlattn/image_io.hpp"

namespace mlattn {

namespace fs = std::filesystem;

namespace {

bool is_point_matrix(const mat::Array& a) {
  return a.kind == mat::ArrayClass::numeric && a.dims.size() == 2 && (a.dims[1] == 2 || a.dims[0] == 2);
}

const mat::Array* search(const mat::Array& a) {
  if (is_point_matrix(a)) return &a;
  for (const auto& e : a.elements) {
    if (const mat::Array* hit = search(e)) return hit;
  }
  return nullptr;
}

bool is_image(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png" || ext == ".ppm" || ext == ".pgm";
}

// Orders "IMG_2" before "IMG_10".
bool natural_less(const std::string& a, const std::string& b) {
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (std::isdigit(static_cast<unsigned char>(a[i])) && std::isdigit(static_cast<unsigned char>(b[j]))) {
      std::size_t ie = i, je = j;
      while (ie < a.size() && std::isdigit(static_cast<unsigned char>(a[ie]))) ++ie;
      while (je < b.size() && std::isdigit(static_cast<unsigned char>(b[je]))) ++je;
      const std::string na = a.substr(i, ie - i), nb = b.substr(j, je - j);
      const std::size_t za = na.find_first_not_of('0'), zb = nb.find_first_not_of('0');
      const std::string ta = za == std::string::npos ? "" : na.substr(za);
      const std::string tb = zb == std::string::npos ? "" : nb.substr(zb);
      if (ta.size() != tb.size()) return ta.size() < tb.size();
      if (ta != tb) return ta < tb;
      i = ie;
      j = je;
    } else {
      if (a[i] != b[j]) return a[i] < b[j];
      ++i;
      ++j;
    }
  }
  return a.size() - i < b.size() - j;
}

struct Layout {
  fs::path image_dir;
  fs::path annotation_dir;
};

Layout layout_for(const ImportOptions& opt) {
  if (opt.format == BenchmarkFormat::shanghaitech) return {opt.root / "images", opt.root / "ground-truth"};
  return {opt.root, opt.root};
}

fs::path annotation_for(BenchmarkFormat f, const fs::path& dir, const std::string& stem) {
  switch (f) {
    case BenchmarkFormat::shanghaitech:
      return dir / fmt::format("GT_{}.mat", stem);
    case BenchmarkFormat::ucf_cc_50:
    case BenchmarkFormat::ucf_qnrf:
      break;
  }
  return dir / fmt::format("{}_ann.mat", stem);
}

}  // namespace

BenchmarkFormat parse_benchmark_format(const std::string& name) {
  if (name == "ucf_cc_50" || name == "ucf-cc-50") return BenchmarkFormat::ucf_cc_50;
  if (name == "shanghaitech") return BenchmarkFormat::shanghaitech;
  if (name == "ucf_qnrf" || name == "ucf-qnrf") return BenchmarkFormat::ucf_qnrf;
  throw UsageError(fmt::format("unknown benchmark format '{}' (ucf_cc_50, shanghaitech, ucf_qnrf)", name));
}

const char* benchmark_format_name(BenchmarkFormat f) {
  switch (f) {
    case BenchmarkFormat::ucf_cc_50:
      return "ucf_cc_50";
    case BenchmarkFormat::shanghaitech:
      return "shanghaitech";
    case BenchmarkFormat::ucf_qnrf:
      return "ucf_qnrf";
  }
  return "?";
}

const mat::Array* find_point_array(const std::vector<mat::Array>& vars) {
  for (const auto& v : vars) {
    if (v.name == "annPoints" && is_point_matrix(v)) return &v;
  }
  for (const auto& v : vars) {
    if (v.name != "image_info" || v.kind != mat::ArrayClass::cell || v.elements.empty()) continue;
    const mat::Array& info = v.elements.front();
    if (const mat::Array* loc = info.field("location")) {
      if (is_point_matrix(*loc)) return loc;
      // Some releases nest a further 1x1 struct holding location/number.
      if (const mat::Array* hit = search(*loc)) return hit;
    }
    for (const auto& e : info.elements) {
      if (const mat::Array* hit = search(e)) return hit;
    }
  }
  for (const auto& v : vars) {
    if (const mat::Array* hit = search(v)) return hit;
  }
  return nullptr;
}

PointSet read_mat_points(const fs::path& path) {
  const auto vars = mat::read_file(path);
  const mat::Array* a = find_point_array(vars);
  if (a == nullptr) throw FormatError(fmt::format("{}: no N x 2 point array found", path.string()));
  const bool rows_are_points = a->dims[1] == 2;
  const std::size_t n = rows_are_points ? a->dims[0] : a->dims[1];
  PointSet out(n);
  for (std::size_t i = 0; i < n; ++i) {
    // Column-major storage: element (r, c) is at r + c * rows.
    const double x = rows_are_points ? a->real[i] : a->real[2 * i];
    const double y = rows_are_points ? a->real[i + n] : a->real[2 * i + 1];
    out[i] = {x - 0.5, y - 0.5};
  }
  return out;
}

ImportReport import_benchmark(const ImportOptions& opt) {
  const Layout layout = layout_for(opt);
  if (!fs::is_directory(layout.image_dir)) {
    throw IoError(fmt::format("image directory '{}' does not exist", layout.image_dir.string()));
  }
  std::vector<fs::path> images;
  for (const auto& entry : fs::directory_iterator(layout.image_dir)) {
    if (entry.is_regular_file() && is_image(entry.path())) images.push_back(entry.path());
  }
  std::sort(images.begin(), images.end(),
            [](const fs::path& a, const fs::path& b) { return natural_less(a.filename().string(), b.filename().string()); });

  const fs::path index_dir = fs::absolute(opt.index).parent_path();
  fs::create_directories(index_dir);
  ImportReport report;
  std::vector<AnnotationRecord> records;
  for (const fs::path& img : images) {
    const std::string stem = img.stem().string();
    const fs::path ann = annotation_for(opt.format, layout.annotation_dir, stem);
    if (!fs::exists(ann)) {
      report.missing_annotations.push_back(img.filename().string());
      continue;
    }
    const Tensor pixels = read_image(img);
    const std::size_t H = pixels.dim(1), W = pixels.dim(2);
    AnnotationRecord rec{stem, fs::relative(fs::absolute(img), index_dir).generic_string(), {}};
    for (const Point& p : read_mat_points(ann)) {
      if (in_bounds(p, W, H)) {
        rec.points.push_back(p);
      } else {
        ++report.dropped_points;
      }
    }
    report.points += rec.points.size();
    records.push_back(std::move(rec));
  }
  if (!report.missing_annotations.empty()) {
    spdlog::warn("import: {} image(s) without annotation file, skipped (first: {})",
                 report.missing_annotations.size(), report.missing_annotations.front());
  }
  if (report.dropped_points != 0) {
    spdlog::warn("import: dropped {} point(s) outside their image bounds", report.dropped_points);
  }
  write_annotation_index(records, opt.index);
  report.images = records.size();
  return report;
}

}  // namespace mlattn
