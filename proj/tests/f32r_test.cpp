#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "corrcount/error.hpp"
#include "corrcount/f32r.hpp"
#include "test_util.hpp"

using namespace corrcount;
using namespace corrcount::testutil;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const auto dir = fs::temp_directory_path() / "corrcount_f32r_test";
  fs::create_directories(dir);
  return dir;
}

// f32-representable values make the codec a true inverse.
Tensor f32_valued_tensor(std::uint64_t seed, Shape shape) {
  Rng rng(seed);
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<double>(static_cast<float>(rng.uniform(-5, 5)));
  return Tensor::from_data(std::move(shape), std::move(data));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("export -> import round-trips bit-identically") {
  const auto path = temp_dir() / "roundtrip.f32r";
  Tensor t = f32_valued_tensor(3, {2, 3, 4});
  write_f32r(path, t);
  CHECK(bitwise_equal(read_f32r(path), t));
}

TEST_CASE("truncated payload is a load error with a byte offset") {
  const auto dir = temp_dir();
  const auto path = dir / "trunc.f32r";
  write_f32r(path, f32_valued_tensor(4, {4, 4}));
  auto bytes = slurp(path);
  std::ofstream out(dir / "trunc2.f32r", std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 7));
  out.close();
  try {
    (void)read_f32r(dir / "trunc2.f32r");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
  }
}

TEST_CASE("header/payload length mismatch is a load error") {
  const auto dir = temp_dir();
  const auto path = dir / "extra.f32r";
  write_f32r(path, f32_valued_tensor(5, {2, 2}));
  auto bytes = slurp(path);
  bytes += std::string(4, '\0');  // one extra float
  std::ofstream out(dir / "extra2.f32r", std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  CHECK_THROWS_AS((void)read_f32r(dir / "extra2.f32r"), IoError);
}

TEST_CASE("bad magic and bad header are load errors") {
  const auto dir = temp_dir();
  {
    std::ofstream out(dir / "magic.f32r", std::ios::binary | std::ios::trunc);
    out << "NOPE\n2 2 2\n" << std::string(16, '\0');
  }
  CHECK_THROWS_AS((void)read_f32r(dir / "magic.f32r"), IoError);
  {
    std::ofstream out(dir / "rank.f32r", std::ios::binary | std::ios::trunc);
    out << "F32R\n-1\n";
  }
  CHECK_THROWS_AS((void)read_f32r(dir / "rank.f32r"), IoError);
  {
    std::ofstream out(dir / "extent.f32r", std::ios::binary | std::ios::trunc);
    out << "F32R\n2 0 4\n";
  }
  CHECK_THROWS_AS((void)read_f32r(dir / "extent.f32r"), IoError);
}

TEST_CASE("non-finite payload is a load error naming the offset") {
  const auto dir = temp_dir();
  const auto path = dir / "inf.f32r";
  write_f32r(path, f32_valued_tensor(6, {2}));
  auto bytes = slurp(path);
  // Overwrite the second float with +inf (0x7f800000 little-endian).
  const std::size_t off = bytes.size() - 4;
  bytes[off] = '\x00';
  bytes[off + 1] = '\x00';
  bytes[off + 2] = '\x80';
  bytes[off + 3] = '\x7f';
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  try {
    (void)read_f32r(path);
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
    CHECK(std::string(e.what()).find(std::to_string(off)) != std::string::npos);
  }
}

TEST_CASE("pgm export writes a valid 8-bit raster") {
  const auto path = temp_dir() / "map.pgm";
  Tensor t = f32_valued_tensor(7, {4, 6});
  write_pgm(path, 4, 6, t.values());
  const auto bytes = slurp(path);
  CHECK(bytes.substr(0, 3) == "P5\n");
  CHECK(bytes.find("6 4\n255\n") != std::string::npos);
  CHECK(bytes.size() == bytes.find("255\n") + 4 + 24);
}
