#include "corrcount/f32r.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "corrcount/error.hpp"

namespace corrcount {

namespace {

constexpr char kMagic[] = "F32R\n";
constexpr std::size_t kMagicLen = 5;

void put_f32_le(std::string& buf, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  buf.push_back(static_cast<char>(bits & 0xff));
  buf.push_back(static_cast<char>((bits >> 8) & 0xff));
  buf.push_back(static_cast<char>((bits >> 16) & 0xff));
  buf.push_back(static_cast<char>((bits >> 24) & 0xff));
}

float get_f32_le(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

std::string encode_f32r(const Tensor& t) {
  std::string buf(kMagic, kMagicLen);
  std::ostringstream os;
  os << t.rank();
  for (std::int64_t d : t.shape()) os << " " << d;
  os << "\n";
  buf += os.str();
  buf.reserve(buf.size() + 4 * static_cast<std::size_t>(t.numel()));
  for (double v : t.values()) put_f32_le(buf, static_cast<float>(v));
  return buf;
}

// Reads one F32R blob starting at the stream position; error offsets are
// relative to the blob start.
Tensor decode_f32r(std::istream& in, const std::string& context) {
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (in.gcount() != static_cast<std::streamsize>(kMagicLen) || std::memcmp(magic, kMagic, kMagicLen) != 0) {
    throw IoError(context + ": bad F32R magic at byte offset 0");
  }
  std::string header;
  std::size_t header_bytes = 0;
  for (;;) {
    const int ch = in.get();
    if (ch == EOF) throw IoError(context + ": unterminated header at byte offset " + std::to_string(kMagicLen));
    ++header_bytes;
    if (ch == '\n') break;
    header.push_back(static_cast<char>(ch));
    if (header.size() > 256) {
      throw IoError(context + ": oversized header at byte offset " + std::to_string(kMagicLen));
    }
  }
  std::istringstream hs(header);
  std::int64_t rank = -1;
  if (!(hs >> rank) || rank < 0 || rank > 8) {
    throw IoError(context + ": bad rank in header at byte offset " + std::to_string(kMagicLen));
  }
  Shape shape;
  for (std::int64_t i = 0; i < rank; ++i) {
    std::int64_t d = 0;
    if (!(hs >> d) || d <= 0) {
      throw IoError(context + ": bad extent in header at byte offset " + std::to_string(kMagicLen));
    }
    shape.push_back(d);
  }
  std::string trailing;
  if (hs >> trailing) {
    throw IoError(context + ": trailing tokens in header at byte offset " + std::to_string(kMagicLen));
  }

  const std::int64_t n = shape_numel(shape);
  const std::size_t payload_at = kMagicLen + header_bytes;
  std::string payload(static_cast<std::size_t>(n) * 4, '\0');
  in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (in.gcount() != static_cast<std::streamsize>(payload.size())) {
    throw IoError(context + ": truncated payload at byte offset " +
                  std::to_string(payload_at + static_cast<std::size_t>(std::max<std::streamsize>(in.gcount(), 0))));
  }
  std::vector<double> data(static_cast<std::size_t>(n));
  const auto* p = reinterpret_cast<const unsigned char*>(payload.data());
  for (std::int64_t i = 0; i < n; ++i) {
    const float v = get_f32_le(p + 4 * i);
    if (!std::isfinite(v)) {
      throw IoError(context + ": non-finite value at byte offset " +
                    std::to_string(payload_at + 4 * static_cast<std::size_t>(i)));
    }
    data[static_cast<std::size_t>(i)] = static_cast<double>(v);
  }
  return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace

void write_f32r_stream(std::ostream& out, const Tensor& t) {
  const std::string buf = encode_f32r(t);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

Tensor read_f32r_stream(std::istream& in, const std::string& context) { return decode_f32r(in, context); }

void write_f32r(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  write_f32r_stream(out, t);
  if (!out) throw IoError("write failed: " + path.string());
}

Tensor read_f32r(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  Tensor t = decode_f32r(in, path.string());
  // A standalone raster file must contain exactly one blob.
  in.peek();
  if (!in.eof()) {
    throw IoError(path.string() + ": payload length does not match header (trailing bytes at byte offset " +
                  std::to_string(static_cast<std::int64_t>(in.tellg())) + ")");
  }
  return t;
}

void write_pgm(const std::filesystem::path& path, std::int64_t h, std::int64_t w,
               std::span<const double> values) {
  if (static_cast<std::int64_t>(values.size()) != h * w) {
    throw ContractViolation("write_pgm: value count does not match raster size");
  }
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double scale = (hi > lo) ? 255.0 / (hi - lo) : 0.0;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "P5\n" << w << " " << h << "\n255\n";
  std::string buf;
  buf.reserve(values.size());
  for (double v : values) {
    const int q = static_cast<int>(std::lround((v - lo) * scale));
    buf.push_back(static_cast<char>(std::clamp(q, 0, 255)));
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace corrcount
