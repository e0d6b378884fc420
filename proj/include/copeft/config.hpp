#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

#include <json.hpp>

namespace copeft {

// Axis-aligned box in meters. `w` extends along x, `l` along y.
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = 1.0;
  double l = 1.0;

  bool operator==(const Box&) const = default;
};

// Observation raster. Rows run along y, columns along x; cell (i, j) covers
// [x_min + j*cell, x_min + (j+1)*cell) x [y_min + i*cell, y_min + (i+1)*cell).
struct GridGeometry {
  double x_min = -16.0;
  double y_min = -32.0;
  double cell_size = 1.0;
  std::size_t rows = 64;  // H0
  std::size_t cols = 32;  // W0

  double x_max() const { return x_min + cell_size * static_cast<double>(cols); }
  double y_max() const { return y_min + cell_size * static_cast<double>(rows); }
  bool operator==(const GridGeometry&) const = default;
};

struct ModelConfig {
  std::size_t in_channels = 2;
  std::size_t hidden_channels = 80;
  std::size_t feature_channels = 16;  // C
  std::array<int, 3> encoder_strides{2, 2, 1};
  std::size_t fusion_layers = 1;  // L
  std::size_t attn_dim = 16;      // query/key width
  std::size_t bottleneck_rate = 4;
  bool fusion_residual = true;
  GridGeometry grid;

  int total_stride() const { return encoder_strides[0] * encoder_strides[1] * encoder_strides[2]; }
  std::size_t feature_rows() const { return grid.rows / static_cast<std::size_t>(total_stride()); }
  std::size_t feature_cols() const { return grid.cols / static_cast<std::size_t>(total_stride()); }
  // Feature-map cell size in meters.
  double feature_cell() const { return grid.cell_size * total_stride(); }

  // Throws ConfigError on any violated invariant.
  void validate() const;

  // SHA-256 over the architecture fields. Grid geometry is excluded: it is a
  // property of the data the model is run on, not of the weights.
  std::array<std::uint8_t, 32> hash() const;
};

void to_json(nlohmann::json& j, const GridGeometry& g);
void from_json(const nlohmann::json& j, GridGeometry& g);
void to_json(nlohmann::json& j, const ModelConfig& c);
// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, ModelConfig& c);

std::string hex(const std::array<std::uint8_t, 32>& digest);

// Compact JSON text with every floating-point number printed with 17
// significant digits ("%.17g"); object keys come out sorted.
std::string dump_json(const nlohmann::json& j);
void dump_json(const nlohmann::json& j, std::string& out);
// One double as "%.17g".
void append_double(std::string& out, double v);

}  // namespace copeft
