#include "copeft/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "copeft/error.hpp"

namespace copeft {

namespace {

constexpr const char* kMagic = "COPEFT-DS";
constexpr int kVersion = 1;

double draw_size(double mean, double sd, double lo, double hi, std::mt19937_64& rng) {
  double v = mean;
  if (sd > 0.0) v = std::normal_distribution<double>(mean, sd)(rng);
  return std::clamp(v, lo, hi);
}

bool overlaps(const Box& a, const Box& b) {
  const double ox = std::min(a.cx + a.w / 2, b.cx + b.w / 2) - std::max(a.cx - a.w / 2, b.cx - b.w / 2);
  const double oy = std::min(a.cy + a.l / 2, b.cy + b.l / 2) - std::max(a.cy - a.l / 2, b.cy - b.l / 2);
  return ox > 0.0 && oy > 0.0;
}

double uniform(double lo, double hi, std::mt19937_64& rng) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace

void DomainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("domain config: " + m); };
  if (grid.rows == 0 || grid.cols == 0 || !(grid.cell_size > 0.0)) fail("extent and cell size must be positive");
  if (!std::isfinite(grid.x_min) || !std::isfinite(grid.y_min)) fail("extent must be finite");
  if (grid.x_min > 0.0 || grid.x_max() < 0.0 || grid.y_min > 0.0 || grid.y_max() < 0.0) {
    fail("the ego agent sits at the origin, which must lie inside the extent");
  }
  for (double v : {object_rate, width_std, length_std, sensor_range, points_per_meter, noise_std, miss_slope,
                   clutter_rate}) {
    if (!(v >= 0.0) || !std::isfinite(v)) fail("rates, deviations and ranges must be finite and >= 0");
  }
  if (!(width_mean > 0.0) || !(length_mean > 0.0) || !(min_size > 0.0)) fail("box sizes must be positive");
  if (clutter_rate > 1.0) fail("clutter_rate is a per-cell probability and must be <= 1");
  if (min_agents < 1 || max_agents < min_agents) fail("need 1 <= min_agents <= max_agents");
  if (min_size > grid.cell_size * static_cast<double>(std::min(grid.rows, grid.cols))) {
    fail("min_size does not fit in the extent");
  }
}

void to_json(nlohmann::json& j, const DomainConfig& c) {
  j = {{"name", c.name},
       {"grid", c.grid},
       {"object_rate", c.object_rate},
       {"width_mean", c.width_mean},
       {"width_std", c.width_std},
       {"length_mean", c.length_mean},
       {"length_std", c.length_std},
       {"min_size", c.min_size},
       {"min_agents", c.min_agents},
       {"max_agents", c.max_agents},
       {"sensor_range", c.sensor_range},
       {"points_per_meter", c.points_per_meter},
       {"noise_std", c.noise_std},
       {"miss_slope", c.miss_slope},
       {"clutter_rate", c.clutter_rate},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DomainConfig& c) {
  c.name = j.value("name", c.name);
  if (j.contains("grid")) j.at("grid").get_to(c.grid);
  c.object_rate = j.value("object_rate", c.object_rate);
  c.width_mean = j.value("width_mean", c.width_mean);
  c.width_std = j.value("width_std", c.width_std);
  c.length_mean = j.value("length_mean", c.length_mean);
  c.length_std = j.value("length_std", c.length_std);
  c.min_size = j.value("min_size", c.min_size);
  c.min_agents = j.value("min_agents", c.min_agents);
  c.max_agents = j.value("max_agents", c.max_agents);
  c.sensor_range = j.value("sensor_range", c.sensor_range);
  c.points_per_meter = j.value("points_per_meter", c.points_per_meter);
  c.noise_std = j.value("noise_std", c.noise_std);
  c.miss_slope = j.value("miss_slope", c.miss_slope);
  c.clutter_rate = j.value("clutter_rate", c.clutter_rate);
  c.seed = j.value("seed", c.seed);
}

DomainConfig domain_preset(const std::string& name) {
  DomainConfig a;
  a.name = "domain_A";
  a.object_rate = 6.0;
  a.width_mean = 2.0;
  a.width_std = 0.2;
  a.length_mean = 4.4;
  a.length_std = 0.4;
  a.sensor_range = 24.0;
  a.points_per_meter = 4.0;
  a.noise_std = 0.05;
  a.miss_slope = 0.02;
  a.clutter_rate = 0.001;
  if (name == "domain_A") return a;
  if (name == "domain_B") {
    DomainConfig b = a;
    b.name = "domain_B";
    b.noise_std = 0.25;
    b.clutter_rate = 0.01;
    b.width_mean *= 1.25;
    b.length_mean *= 1.25;
    b.object_rate *= 1.5;
    return b;
  }
  throw ConfigError("unknown domain preset '" + name + "' (expected domain_A or domain_B)");
}

DomainConfig load_domain(const std::string& preset_or_path) {
  if (preset_or_path == "domain_A" || preset_or_path == "domain_B") return domain_preset(preset_or_path);
  std::ifstream in(preset_or_path);
  if (!in) throw IoError("cannot open domain config '" + preset_or_path + "'");
  DomainConfig cfg;
  try {
    nlohmann::json::parse(in).get_to(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("domain config '" + preset_or_path + "': " + e.what());
  }
  cfg.validate();
  return cfg;
}

bool SceneSample::operator==(const SceneSample& o) const {
  if (boxes != o.boxes || agents != o.agents || grids.size() != o.grids.size()) return false;
  for (std::size_t i = 0; i < grids.size(); ++i) {
    if (!grids[i].bitwise_equal(o.grids[i])) return false;
  }
  return true;
}

std::mt19937_64 frame_stream(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

SceneSample sample_layout(const DomainConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const GridGeometry& g = cfg.grid;
  const double ext_x = g.x_max() - g.x_min, ext_y = g.y_max() - g.y_min;
  SceneSample s;
  const int count = cfg.object_rate > 0.0 ? std::poisson_distribution<int>(cfg.object_rate)(rng) : 0;
  int attempts = 0;
  for (int k = 0; k < count; ++k) {
    Box b;
    b.w = draw_size(cfg.width_mean, cfg.width_std, cfg.min_size, ext_x, rng);
    b.l = draw_size(cfg.length_mean, cfg.length_std, cfg.min_size, ext_y, rng);
    for (;;) {
      if (++attempts > 10000) {
        throw ConfigError("sample_scene: more than 10000 placement attempts for " + std::to_string(count) +
                          " boxes; object density too high");
      }
      b.cx = uniform(g.x_min + b.w / 2, g.x_max() - b.w / 2, rng);
      b.cy = uniform(g.y_min + b.l / 2, g.y_max() - b.l / 2, rng);
      if (std::none_of(s.boxes.begin(), s.boxes.end(), [&](const Box& o) { return overlaps(b, o); })) break;
    }
    s.boxes.push_back(b);
  }
  const std::size_t n = std::uniform_int_distribution<std::size_t>(cfg.min_agents, cfg.max_agents)(rng);
  s.agents.push_back({0.0, 0.0});
  for (std::size_t a = 1; a < n; ++a) {
    const double x = uniform(g.x_min, g.x_max(), rng);
    const double y = uniform(g.y_min, g.y_max(), rng);
    s.agents.push_back({x, y});
  }
  return s;
}

SceneSample sample_scene(const DomainConfig& cfg, std::mt19937_64& rng) {
  SceneSample s = sample_layout(cfg, rng);
  for (std::size_t a = 0; a < s.agents.size(); ++a) s.grids.push_back(render_observation(s, a, cfg, rng));
  return s;
}

std::vector<Point2> observe_points(const SceneSample& scene, std::size_t agent, const DomainConfig& cfg,
                                   std::mt19937_64& rng) {
  if (agent >= scene.agents.size()) {
    throw Error(ErrorCode::kInvalidArgument, "render_observation: agent " + std::to_string(agent) + " of " +
                                                 std::to_string(scene.agents.size()));
  }
  const GridGeometry& g = cfg.grid;
  const double ax = scene.agents[agent][0], ay = scene.agents[agent][1];
  const double range = cfg.sensor_range;
  auto keep = [&](double x, double y) {
    return std::hypot(x - ax, y - ay) <= range && x >= g.x_min && x < g.x_max() && y >= g.y_min && y < g.y_max();
  };
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Point2> pts;
  for (const Box& b : scene.boxes) {
    const double d = std::hypot(b.cx - ax, b.cy - ay);
    if (d > range) continue;
    if (unit(rng) < std::min(1.0, cfg.miss_slope * d)) continue;
    const double x0 = b.cx - b.w / 2, x1 = b.cx + b.w / 2, y0 = b.cy - b.l / 2, y1 = b.cy + b.l / 2;
    const std::array<std::array<double, 4>, 4> edges{{{x0, y0, x1, y0}, {x1, y0, x1, y1}, {x1, y1, x0, y1},
                                                      {x0, y1, x0, y0}}};
    for (const auto& e : edges) {
      const double len = std::hypot(e[2] - e[0], e[3] - e[1]);
      const long n = std::max(1L, std::lround(cfg.points_per_meter * len));
      for (long k = 0; k < n; ++k) {
        const double t = unit(rng);
        double x = e[0] + t * (e[2] - e[0]);
        double y = e[1] + t * (e[3] - e[1]);
        if (cfg.noise_std > 0.0) {
          x += cfg.noise_std * noise(rng);
          y += cfg.noise_std * noise(rng);
        }
        if (keep(x, y)) pts.push_back({x, y});
      }
    }
  }
  if (cfg.clutter_rate > 0.0) {
    for (std::size_t i = 0; i < g.rows; ++i) {
      for (std::size_t j = 0; j < g.cols; ++j) {
        if (unit(rng) >= cfg.clutter_rate) continue;
        const double x = g.x_min + (static_cast<double>(j) + unit(rng)) * g.cell_size;
        const double y = g.y_min + (static_cast<double>(i) + unit(rng)) * g.cell_size;
        if (keep(x, y)) pts.push_back({x, y});
      }
    }
  }
  return pts;
}

Tensor rasterize(const std::vector<Point2>& points, const std::array<double, 2>& agent, const DomainConfig& cfg) {
  const GridGeometry& g = cfg.grid;
  Tensor grid({2, g.rows, g.cols});
  for (const Point2& p : points) {
    const double fx = std::floor((p.x - g.x_min) / g.cell_size);
    const double fy = std::floor((p.y - g.y_min) / g.cell_size);
    if (fx < 0.0 || fy < 0.0 || fx >= static_cast<double>(g.cols) || fy >= static_cast<double>(g.rows)) continue;
    const auto j = static_cast<std::size_t>(fx), i = static_cast<std::size_t>(fy);
    const double r = cfg.sensor_range > 0.0 ? std::hypot(p.x - agent[0], p.y - agent[1]) / cfg.sensor_range : 0.0;
    double& cnt = grid.at(0, i, j);
    double& near = grid.at(1, i, j);
    near = cnt == 0.0 ? r : std::min(near, r);
    cnt += 1.0;
  }
  return grid;
}

Tensor render_observation(const SceneSample& scene, std::size_t agent, const DomainConfig& cfg,
                          std::mt19937_64& rng) {
  return rasterize(observe_points(scene, agent, cfg, rng), scene.agents[agent], cfg);
}

Dataset generate_dataset(const DomainConfig& cfg, std::size_t count) {
  cfg.validate();
  Dataset ds{cfg, {}};
  ds.frames.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::mt19937_64 rng = frame_stream(cfg.seed, i);
    ds.frames.push_back(sample_scene(cfg, rng));
  }
  return ds;
}

// ---------------------------------------------------------------------------

namespace {

void append_frame(std::string& out, const SceneSample& s) {
  auto pair_list = [&](auto begin, auto end, auto emit) {
    out += '[';
    for (auto it = begin; it != end; ++it) {
      if (it != begin) out += ',';
      emit(*it);
    }
    out += ']';
  };
  out += "{\"agents\":";
  pair_list(s.agents.begin(), s.agents.end(), [&](const std::array<double, 2>& a) {
    out += '[';
    append_double(out, a[0]);
    out += ',';
    append_double(out, a[1]);
    out += ']';
  });
  out += ",\"boxes\":";
  pair_list(s.boxes.begin(), s.boxes.end(), [&](const Box& b) {
    out += '[';
    for (double v : {b.cx, b.cy, b.w, b.l}) {
      if (out.back() != '[') out += ',';
      append_double(out, v);
    }
    out += ']';
  });
  out += ",\"grids\":";
  pair_list(s.grids.begin(), s.grids.end(), [&](const Tensor& t) {
    out += "{\"data\":[";
    for (std::size_t i = 0; i < t.numel(); ++i) {
      if (i) out += ',';
      append_double(out, t[i]);
    }
    out += "],\"shape\":";
    out += nlohmann::json(t.shape()).dump();
    out += '}';
  });
  out += "}\n";
}

double number(const nlohmann::json& j, std::size_t line, const char* what) {
  if (!j.is_number()) throw FormatError(std::string("expected a number for ") + what, line);
  return j.get<double>();
}

SceneSample parse_frame(const nlohmann::json& j, const DomainConfig& cfg, std::size_t line) {
  if (!j.is_object()) throw FormatError("frame is not an object", line);
  for (const char* key : {"agents", "boxes", "grids"}) {
    if (!j.contains(key) || !j.at(key).is_array()) {
      throw FormatError(std::string("frame missing array '") + key + "'", line);
    }
  }
  SceneSample s;
  for (const auto& a : j.at("agents")) {
    if (!a.is_array() || a.size() != 2) throw FormatError("agent position must be [x,y]", line);
    s.agents.push_back({number(a[0], line, "agent x"), number(a[1], line, "agent y")});
  }
  for (const auto& b : j.at("boxes")) {
    if (!b.is_array() || b.size() != 4) throw FormatError("box must be [cx,cy,w,l]", line);
    s.boxes.push_back({number(b[0], line, "box cx"), number(b[1], line, "box cy"), number(b[2], line, "box w"),
                       number(b[3], line, "box l")});
  }
  const Shape expected{2, cfg.grid.rows, cfg.grid.cols};
  for (const auto& g : j.at("grids")) {
    if (!g.is_object() || !g.contains("shape") || !g.contains("data") || !g.at("data").is_array()) {
      throw FormatError("grid must be {data:[...], shape:[...]}", line);
    }
    Shape shape;
    try {
      shape = g.at("shape").get<Shape>();
    } catch (const nlohmann::json::exception&) {
      throw FormatError("grid shape must be a list of sizes", line);
    }
    if (shape != expected) {
      throw FormatError("grid shape " + shape_str(shape) + " does not match header " + shape_str(expected), line);
    }
    const auto& data = g.at("data");
    if (data.size() != shape_numel(shape)) {
      throw FormatError("grid holds " + std::to_string(data.size()) + " values, shape needs " +
                            std::to_string(shape_numel(shape)),
                        line);
    }
    Tensor t(shape);
    for (std::size_t i = 0; i < data.size(); ++i) t[i] = number(data[i], line, "grid value");
    s.grids.push_back(std::move(t));
  }
  if (s.agents.empty()) throw FormatError("frame has no agents", line);
  if (s.grids.size() != s.agents.size()) throw FormatError("one grid per agent required", line);
  return s;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset '" + path.string() + "'");
  nlohmann::json header = {{"magic", kMagic}, {"version", kVersion}, {"cfg", ds.cfg}, {"count", ds.frames.size()}};
  std::string buf = dump_json(header);
  buf += '\n';
  out << buf;
  for (const SceneSample& s : ds.frames) {
    buf.clear();
    append_frame(buf, s);
    out << buf;
  }
  if (!out) throw IoError("write failed for dataset '" + path.string() + "'");
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset '" + path.string() + "'");
  std::string text;
  std::size_t line = 0;
  auto parse = [&](const std::string& s) {
    try {
      return nlohmann::json::parse(s);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(std::string("malformed JSON: ") + e.what(), line);
    }
  };
  if (!std::getline(in, text)) throw FormatError("empty dataset file", 1);
  line = 1;
  const nlohmann::json header = parse(text);
  if (!header.is_object() || header.value("magic", std::string()) != kMagic) {
    throw FormatError("bad magic: not a COPEFT-DS dataset", line);
  }
  if (!header.contains("version") || !header.at("version").is_number_integer() ||
      header.at("version").get<int>() != kVersion) {
    throw FormatError("unsupported dataset version (expected " + std::to_string(kVersion) + ")", line);
  }
  if (!header.contains("count") || !header.at("count").is_number_unsigned() || !header.contains("cfg")) {
    throw FormatError("header needs cfg and a non-negative count", line);
  }
  Dataset ds;
  try {
    header.at("cfg").get_to(ds.cfg);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad cfg: ") + e.what(), line);
  }
  ds.cfg.validate();
  const auto count = header.at("count").get<std::size_t>();
  ds.frames.reserve(count);
  while (ds.frames.size() < count) {
    if (!std::getline(in, text)) {
      throw FormatError("truncated: header promises " + std::to_string(count) + " frames, found " +
                            std::to_string(ds.frames.size()),
                        line + 1);
    }
    ++line;
    ds.frames.push_back(parse_frame(parse(text), ds.cfg, line));
  }
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") != std::string::npos) {
      throw FormatError("unexpected data after " + std::to_string(count) + " frames", line);
    }
  }
  return ds;
}

}  // namespace copeft
