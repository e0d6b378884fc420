#include "copeft/config.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstdio>

#include "copeft/error.hpp"

namespace copeft {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw ConfigError(std::string("model config: ") + what + " must be positive");
  };
  positive(in_channels, "in_channels");
  positive(hidden_channels, "hidden_channels");
  positive(feature_channels, "feature_channels");
  positive(fusion_layers, "fusion_layers");
  positive(attn_dim, "attn_dim");
  positive(bottleneck_rate, "bottleneck_rate");
  positive(grid.rows, "grid.rows");
  positive(grid.cols, "grid.cols");
  for (int s : encoder_strides) {
    if (s < 1) throw ConfigError("model config: encoder strides must be >= 1");
  }
  if (!(grid.cell_size > 0.0)) throw ConfigError("model config: grid.cell_size must be positive");
  const auto ts = static_cast<std::size_t>(total_stride());
  if (grid.rows % ts != 0 || grid.cols % ts != 0) {
    throw ConfigError("model config: grid " + std::to_string(grid.rows) + "x" + std::to_string(grid.cols) +
                      " not divisible by cumulative encoder stride " + std::to_string(ts));
  }
  if (feature_channels % bottleneck_rate != 0) {
    throw ConfigError("model config: bottleneck rate " + std::to_string(bottleneck_rate) +
                      " does not divide feature channels " + std::to_string(feature_channels));
  }
}

std::array<std::uint8_t, 32> ModelConfig::hash() const {
  const nlohmann::json arch = {
      {"in_channels", in_channels},     {"hidden_channels", hidden_channels},
      {"feature_channels", feature_channels}, {"encoder_strides", encoder_strides},
      {"fusion_layers", fusion_layers}, {"attn_dim", attn_dim},
      {"bottleneck_rate", bottleneck_rate}, {"fusion_residual", fusion_residual},
  };
  const std::string text = arch.dump();  // keys are sorted, so this is canonical
  std::array<std::uint8_t, 32> out{};
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != 32) {
    throw Error(ErrorCode::kNumeric, "sha256 failed");
  }
  return out;
}

std::string hex(const std::array<std::uint8_t, 32>& digest) {
  std::string s;
  char buf[3];
  for (auto b : digest) {
    std::snprintf(buf, sizeof buf, "%02x", b);
    s += buf;
  }
  return s;
}

void append_double(std::string& out, double v) {
  if (!std::isfinite(v)) throw FormatError("cannot serialize non-finite number");
  char buf[32];
  const int n = std::snprintf(buf, sizeof buf, "%.17g", v);
  out.append(buf, static_cast<std::size_t>(n));
}

void dump_json(const nlohmann::json& j, std::string& out) {
  switch (j.type()) {
    case nlohmann::json::value_t::object: {
      out += '{';
      bool first = true;
      for (const auto& [k, v] : j.items()) {
        if (!first) out += ',';
        first = false;
        out += nlohmann::json(k).dump();
        out += ':';
        dump_json(v, out);
      }
      out += '}';
      break;
    }
    case nlohmann::json::value_t::array: {
      out += '[';
      for (std::size_t i = 0; i < j.size(); ++i) {
        if (i) out += ',';
        dump_json(j[i], out);
      }
      out += ']';
      break;
    }
    case nlohmann::json::value_t::number_float:
      append_double(out, j.get<double>());
      break;
    default:
      out += j.dump();
  }
}

std::string dump_json(const nlohmann::json& j) {
  std::string out;
  dump_json(j, out);
  return out;
}

void to_json(nlohmann::json& j, const GridGeometry& g) {
  j = {{"x_min", g.x_min}, {"y_min", g.y_min}, {"cell_size", g.cell_size},
       {"rows", g.rows},   {"cols", g.cols}};
}

void from_json(const nlohmann::json& j, GridGeometry& g) {
  g.x_min = j.value("x_min", g.x_min);
  g.y_min = j.value("y_min", g.y_min);
  g.cell_size = j.value("cell_size", g.cell_size);
  g.rows = j.value("rows", g.rows);
  g.cols = j.value("cols", g.cols);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"in_channels", c.in_channels},
       {"hidden_channels", c.hidden_channels},
       {"feature_channels", c.feature_channels},
       {"encoder_strides", c.encoder_strides},
       {"fusion_layers", c.fusion_layers},
       {"attn_dim", c.attn_dim},
       {"bottleneck_rate", c.bottleneck_rate},
       {"fusion_residual", c.fusion_residual},
       {"grid", c.grid}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.in_channels = j.value("in_channels", c.in_channels);
  c.hidden_channels = j.value("hidden_channels", c.hidden_channels);
  c.feature_channels = j.value("feature_channels", c.feature_channels);
  if (j.contains("encoder_strides")) c.encoder_strides = j.at("encoder_strides").get<std::array<int, 3>>();
  c.fusion_layers = j.value("fusion_layers", c.fusion_layers);
  c.attn_dim = j.value("attn_dim", c.attn_dim);
  c.bottleneck_rate = j.value("bottleneck_rate", c.bottleneck_rate);
  c.fusion_residual = j.value("fusion_residual", c.fusion_residual);
  if (j.contains("grid")) c.grid = j.at("grid").get<GridGeometry>();
}

}  // namespace copeft
