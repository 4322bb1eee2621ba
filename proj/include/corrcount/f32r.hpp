#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

#include "corrcount/tensor.hpp"

namespace corrcount {

/// F32R raster format: magic "F32R\n", one ASCII header line
/// "rank d0 d1 ... dn\n", then little-endian 32-bit floats in row-major
/// order. Values are widened to f64 on load and narrowed on save.

void write_f32r(const std::filesystem::path& path, const Tensor& t);

/// Throws IoError naming the byte offset for malformed magic/header,
/// truncated payloads, and non-finite values.
Tensor read_f32r(const std::filesystem::path& path);

/// Stream forms, used for concatenated blobs (checkpoints).
void write_f32r_stream(std::ostream& out, const Tensor& t);
Tensor read_f32r_stream(std::istream& in, const std::string& context);

/// 8-bit binary PGM, min-max scaled (a constant raster maps to 0).
void write_pgm(const std::filesystem::path& path, std::int64_t h, std::int64_t w,
               std::span<const double> values);

}  // namespace corrcount
