#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mlattn/data.hpp"
#include "mlattn/error.hpp"
#include "mlattn/importer.hpp"
#include "mlattn/mat.hpp"

namespace mlattn {
namespace {

namespace fs = std::filesystem;

const fs::path kMat = fs::path(MLATTN_FIXTURE_DIR) / "mat";

const mat::Array& var(const std::vector<mat::Array>& vars, const std::string& name) {
  for (const auto& v : vars) {
    if (v.name == name) return v;
  }
  throw std::runtime_error("no variable " + name);
}

TEST(MatReaderTest, WidensEveryNumericClassColumnMajor) {
  const auto vars = mat::read_file(kMat / "types.mat");
  const auto& u16 = var(vars, "u16");
  EXPECT_EQ(u16.kind, mat::ArrayClass::numeric);
  EXPECT_EQ(u16.dims, (std::vector<std::size_t>{2, 2}));
  EXPECT_EQ(u16.real, (std::vector<double>{1, 3, 2, 65535}));
  EXPECT_EQ(var(vars, "i32").real, (std::vector<double>{-7}));
  const auto& empty = var(vars, "empty");
  EXPECT_EQ(empty.numel(), 0u);
  EXPECT_TRUE(empty.real.empty());
}

TEST(MatReaderTest, CharsCellsAndStructs) {
  const auto vars = mat::read_file(kMat / "types.mat");
  const auto& name = var(vars, "name");
  EXPECT_EQ(name.kind, mat::ArrayClass::character);
  std::string text;
  for (double c : name.real) text += static_cast<char>(c);
  EXPECT_EQ(text, "crowd");

  const auto& cell = var(vars, "cell");
  ASSERT_EQ(cell.kind, mat::ArrayClass::cell);
  ASSERT_EQ(cell.elements.size(), 2u);
  EXPECT_EQ(cell.elements[0].real, (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(cell.elements[1].kind, mat::ArrayClass::character);

  const auto& s = var(vars, "s");
  ASSERT_EQ(s.kind, mat::ArrayClass::structure);
  ASSERT_NE(s.field("a"), nullptr);
  EXPECT_EQ(s.field("a")->real, (std::vector<double>{1.5}));
  EXPECT_EQ(s.field("b")->real, (std::vector<double>{2.0, 4.0}));
  EXPECT_EQ(s.field("missing"), nullptr);
}

TEST(MatReaderTest, RejectsForeignAndDamagedFiles) {
  std::vector<unsigned char> bytes(200, 0);
  EXPECT_THROW(mat::read_bytes(bytes), FormatError);
  std::vector<unsigned char> hdf(200, 0);
  const std::string v73 = "MATLAB 7.3 MAT-file";
  std::copy(v73.begin(), v73.end(), hdf.begin());
  try {
    mat::read_bytes(hdf);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("7.3"), std::string::npos);
  }
  std::ifstream in(kMat / "ucf_cc_50" / "2_ann.mat", std::ios::binary);
  std::vector<unsigned char> good((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  good.resize(good.size() - 10);
  EXPECT_THROW(mat::read_bytes(good), FormatError);
  EXPECT_THROW(mat::read_file(kMat / "absent.mat"), IoError);
}

TEST(MatPointsTest, ConvertsOneBasedCentres) {
  const PointSet p = read_mat_points(kMat / "ucf_cc_50" / "1_ann.mat");
  ASSERT_EQ(p.size(), 3u);
  EXPECT_EQ(p[0], (Point{0.5, 0.5}));
  EXPECT_EQ(p[1], (Point{39.5, 29.5}));
  EXPECT_EQ(p[2], (Point{20.0, 9.75}));
  const PointSet sh = read_mat_points(kMat / "shanghaitech" / "ground-truth" / "GT_IMG_1.mat");
  ASSERT_EQ(sh.size(), 2u);
  EXPECT_EQ(sh[1], (Point{9.5, 11.5}));
  const PointSet q = read_mat_points(kMat / "ucf_qnrf" / "img_0001_ann.mat");
  ASSERT_EQ(q.size(), 3u);
  EXPECT_EQ(q[0], (Point{7.0, 8.0}));
}

class ImportTest : public ::testing::Test {
 protected:
  void SetUp() override {
    out_ = fs::temp_directory_path() /
           ("mlattn_import_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(out_);
  }
  void TearDown() override { fs::remove_all(out_); }
  fs::path out_;
};

TEST_F(ImportTest, UcfCc50PairsDropsAndSkips) {
  const ImportReport r = import_benchmark({BenchmarkFormat::ucf_cc_50, kMat / "ucf_cc_50", out_ / "index.txt"});
  EXPECT_EQ(r.images, 3u);
  EXPECT_EQ(r.points, 3u + 1u + 1u);
  EXPECT_EQ(r.dropped_points, 1u);
  EXPECT_EQ(r.missing_annotations, (std::vector<std::string>{"3.png"}));
  const auto loaded = load_annotations(out_ / "index.txt");
  ASSERT_EQ(loaded.size(), 3u);
  EXPECT_EQ(loaded[0].id, "1");
  EXPECT_EQ(loaded[1].id, "2");
  EXPECT_EQ(loaded[2].id, "10");
  EXPECT_EQ(loaded[1].points, (PointSet{{4.5, 5.5}}));
  EXPECT_EQ(loaded[2].points, (PointSet{{1.5, 2.5}}));
  EXPECT_EQ(loaded[0].image.shape(), (Shape{3, 30, 40}));
}

TEST_F(ImportTest, ShanghaiTechAndQnrfLayouts) {
  const ImportReport sh =
      import_benchmark({BenchmarkFormat::shanghaitech, kMat / "shanghaitech", out_ / "sh" / "index.txt"});
  EXPECT_EQ(sh.images, 1u);
  EXPECT_EQ(sh.points, 2u);
  const auto a = load_annotations(out_ / "sh" / "index.txt");
  EXPECT_EQ(a[0].id, "IMG_1");

  const ImportReport q = import_benchmark({BenchmarkFormat::ucf_qnrf, kMat / "ucf_qnrf", out_ / "q.txt"});
  EXPECT_EQ(q.images, 1u);
  EXPECT_EQ(q.points, 3u);
  EXPECT_EQ(load_annotations(out_ / "q.txt")[0].points.size(), 3u);
}

TEST_F(ImportTest, Errors) {
  EXPECT_THROW(import_benchmark({BenchmarkFormat::shanghaitech, kMat / "ucf_cc_50", out_ / "i.txt"}), IoError);
  EXPECT_THROW(parse_benchmark_format("mall"), UsageError);
  EXPECT_EQ(parse_benchmark_format("ucf-qnrf"), BenchmarkFormat::ucf_qnrf);
}

}  // namespace
}  // namespace mlattn
