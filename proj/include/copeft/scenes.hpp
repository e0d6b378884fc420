#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "copeft/config.hpp"
#include "copeft/tensor.hpp"

namespace copeft {

// Parameters of one synthetic world distribution.
struct DomainConfig {
  std::string name = "custom";
  GridGeometry grid;                // world extent and observation raster
  double object_rate = 6.0;         // Poisson mean of boxes per scene
  double width_mean = 2.0, width_std = 0.2;
  double length_mean = 4.5, length_std = 0.4;
  double min_size = 0.5;            // size draws are clamped below at this
  std::size_t min_agents = 2, max_agents = 3;
  double sensor_range = 40.0;       // m
  double points_per_meter = 4.0;    // perimeter points per metre of box edge
  double noise_std = 0.05;          // m, isotropic Gaussian on every point
  double miss_slope = 0.01;         // miss probability per metre of distance, capped at 1
  double clutter_rate = 0.001;      // Bernoulli clutter probability per cell
  std::uint64_t seed = 0;

  // Throws ConfigError on any violated invariant.
  void validate() const;
  bool operator==(const DomainConfig&) const = default;
};

void to_json(nlohmann::json& j, const DomainConfig& c);
// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, DomainConfig& c);

// "domain_A" (training distribution) or "domain_B" (deployment distribution).
DomainConfig domain_preset(const std::string& name);
// A preset name, or a path to a JSON DomainConfig file.
DomainConfig load_domain(const std::string& preset_or_path);

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

struct SceneSample {
  std::vector<Box> boxes;
  std::vector<std::array<double, 2>> agents;  // agent 0 is the ego, at the origin
  std::vector<Tensor> grids;                  // per agent [2, rows, cols]

  bool operator==(const SceneSample& o) const;
};

// Independent generator for frame `index` of a dataset drawn with `seed`.
std::mt19937_64 frame_stream(std::uint64_t seed, std::uint64_t index);

// Boxes and agent positions only (no rendering).
SceneSample sample_layout(const DomainConfig& cfg, std::mt19937_64& rng);
// Layout plus one observation per agent, all from `rng`.
SceneSample sample_scene(const DomainConfig& cfg, std::mt19937_64& rng);

// Raw points seen by one agent: noisy perimeter points of visible boxes and
// clutter, restricted to the sensor range and the raster.
std::vector<Point2> observe_points(const SceneSample& scene, std::size_t agent, const DomainConfig& cfg,
                                   std::mt19937_64& rng);
// Channel 0: point count. Channel 1: distance of the nearest point in the
// cell divided by the sensor range (0 for empty cells).
Tensor rasterize(const std::vector<Point2>& points, const std::array<double, 2>& agent, const DomainConfig& cfg);
Tensor render_observation(const SceneSample& scene, std::size_t agent, const DomainConfig& cfg,
                          std::mt19937_64& rng);

struct Dataset {
  DomainConfig cfg;
  std::vector<SceneSample> frames;
};

// Frames 0..count-1, frame i drawn from frame_stream(cfg.seed, i).
Dataset generate_dataset(const DomainConfig& cfg, std::size_t count);

void write_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace copeft
