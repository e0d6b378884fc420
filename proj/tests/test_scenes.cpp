#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "copeft/error.hpp"
#include "copeft/scenes.hpp"

using namespace copeft;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("copeft_scenes_" + std::to_string(::getpid()) + "_" + name);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

double perimeter_distance(const Point2& p, const Box& b) {
  const double x0 = b.cx - b.w / 2, x1 = b.cx + b.w / 2, y0 = b.cy - b.l / 2, y1 = b.cy + b.l / 2;
  auto seg = [&](double ax, double ay, double bx, double by) {
    const double vx = bx - ax, vy = by - ay;
    const double t = std::clamp(((p.x - ax) * vx + (p.y - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
    return std::hypot(p.x - (ax + t * vx), p.y - (ay + t * vy));
  };
  return std::min({seg(x0, y0, x1, y0), seg(x1, y0, x1, y1), seg(x1, y1, x0, y1), seg(x0, y1, x0, y0)});
}

DomainConfig clean_domain() {
  DomainConfig c = domain_preset("domain_A");
  c.noise_std = 0.0;
  c.clutter_rate = 0.0;
  c.miss_slope = 0.0;
  return c;
}

}  // namespace

TEST(DomainPresets, ShiftKnobs) {
  const DomainConfig a = domain_preset("domain_A"), b = domain_preset("domain_B");
  EXPECT_DOUBLE_EQ(a.noise_std, 0.05);
  EXPECT_DOUBLE_EQ(b.noise_std, 0.25);
  EXPECT_DOUBLE_EQ(a.clutter_rate, 0.001);
  EXPECT_DOUBLE_EQ(b.clutter_rate, 0.01);
  EXPECT_DOUBLE_EQ(b.width_mean, 1.25 * a.width_mean);
  EXPECT_DOUBLE_EQ(b.length_mean, 1.25 * a.length_mean);
  EXPECT_DOUBLE_EQ(b.object_rate, 1.5 * a.object_rate);
  // nothing else differs
  DomainConfig b2 = b;
  b2.name = a.name;
  b2.noise_std = a.noise_std;
  b2.clutter_rate = a.clutter_rate;
  b2.width_mean = a.width_mean;
  b2.length_mean = a.length_mean;
  b2.object_rate = a.object_rate;
  EXPECT_EQ(b2, a);
  EXPECT_EQ(a.grid.rows, 64u);
  EXPECT_EQ(a.grid.cols, 32u);
  EXPECT_THROW(domain_preset("domain_C"), ConfigError);
}

TEST(DomainConfig, JsonRoundTripAndValidation) {
  const DomainConfig b = domain_preset("domain_B");
  EXPECT_EQ(nlohmann::json(b).get<DomainConfig>(), b);
  DomainConfig bad = b;
  bad.noise_std = -1;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = b;
  bad.min_agents = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = b;
  bad.grid.x_min = 1.0;  // origin outside
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = b;
  bad.max_agents = 1;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(SampleScene, ZeroRateGivesOnlyClutter) {
  DomainConfig c = domain_preset("domain_B");
  c.object_rate = 0.0;
  std::mt19937_64 rng(1);
  for (int t = 0; t < 20; ++t) {
    SceneSample s = sample_scene(c, rng);
    EXPECT_TRUE(s.boxes.empty());
    for (const Tensor& g : s.grids) {
      double mass = 0.0;
      for (std::size_t i = 0; i < c.grid.rows * c.grid.cols; ++i) {
        EXPECT_LE(g[i], 1.0);  // at most one clutter point per cell
        mass += g[i];
      }
      EXPECT_LE(mass, static_cast<double>(c.grid.rows * c.grid.cols));
    }
  }
  c.clutter_rate = 0.0;
  SceneSample empty = sample_scene(c, rng);
  for (const Tensor& g : empty.grids)
    for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(SampleScene, ThousandLayoutsInsideExtentWithoutOverlap) {
  const DomainConfig c = domain_preset("domain_B");
  std::mt19937_64 rng(2);
  std::size_t total = 0;
  for (int t = 0; t < 1000; ++t) {
    SceneSample s = sample_layout(c, rng);
    total += s.boxes.size();
    EXPECT_GE(s.agents.size(), c.min_agents);
    EXPECT_LE(s.agents.size(), c.max_agents);
    EXPECT_EQ(s.agents[0][0], 0.0);
    EXPECT_EQ(s.agents[0][1], 0.0);
    for (const auto& a : s.agents) {
      EXPECT_GE(a[0], c.grid.x_min);
      EXPECT_LE(a[0], c.grid.x_max());
    }
    for (std::size_t i = 0; i < s.boxes.size(); ++i) {
      const Box& b = s.boxes[i];
      EXPECT_GE(b.cx - b.w / 2, c.grid.x_min);
      EXPECT_LE(b.cx + b.w / 2, c.grid.x_max());
      EXPECT_GE(b.cy - b.l / 2, c.grid.y_min);
      EXPECT_LE(b.cy + b.l / 2, c.grid.y_max());
      for (std::size_t k = 0; k < i; ++k) {
        const Box& o = s.boxes[k];
        const double ox = std::min(b.cx + b.w / 2, o.cx + o.w / 2) - std::max(b.cx - b.w / 2, o.cx - o.w / 2);
        const double oy = std::min(b.cy + b.l / 2, o.cy + o.l / 2) - std::max(b.cy - b.l / 2, o.cy - o.l / 2);
        EXPECT_FALSE(ox > 0 && oy > 0) << "boxes " << k << " and " << i << " overlap";
      }
    }
  }
  EXPECT_NEAR(static_cast<double>(total) / 1000.0, c.object_rate, 0.5);
}

TEST(SampleScene, TooDenseIsError) {
  DomainConfig c = domain_preset("domain_A");
  c.grid.rows = 8;
  c.grid.cols = 8;
  c.grid.x_min = -4;
  c.grid.y_min = -4;
  c.object_rate = 200.0;
  std::mt19937_64 rng(3);
  EXPECT_THROW(sample_layout(c, rng), ConfigError);
}

TEST(SampleScene, SameSeedIsBitwiseIdentical) {
  const DomainConfig c = domain_preset("domain_B");
  std::mt19937_64 r1 = frame_stream(7, 3), r2 = frame_stream(7, 3);
  EXPECT_TRUE(sample_scene(c, r1) == sample_scene(c, r2));
  std::mt19937_64 r3 = frame_stream(7, 4);
  std::mt19937_64 r4 = frame_stream(7, 3);
  EXPECT_FALSE(sample_scene(c, r3) == sample_scene(c, r4));
}

TEST(SampleScene, FramesAreIndependentOfGenerationOrder) {
  DomainConfig c = domain_preset("domain_A");
  c.seed = 11;
  Dataset ds = generate_dataset(c, 6);
  for (std::size_t i : {5u, 0u, 3u}) {
    std::mt19937_64 rng = frame_stream(11, i);
    EXPECT_TRUE(sample_scene(c, rng) == ds.frames[i]) << i;
  }
}

TEST(RenderObservation, BoxBeyondRangeContributesNothing) {
  DomainConfig c = clean_domain();
  c.sensor_range = 10.0;
  SceneSample s;
  s.agents = {{0.0, 0.0}};
  s.boxes = {{0.0, 25.0, 2.0, 4.0}};
  std::mt19937_64 rng(4);
  EXPECT_TRUE(observe_points(s, 0, c, rng).empty());
  s.boxes = {{0.0, 5.0, 2.0, 4.0}};
  EXPECT_FALSE(observe_points(s, 0, c, rng).empty());
  EXPECT_THROW(observe_points(s, 1, c, rng), Error);
}

TEST(RenderObservation, NoiselessPointsLieOnPerimeters) {
  const DomainConfig c = clean_domain();
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    SceneSample s = sample_layout(c, rng);
    for (std::size_t a = 0; a < s.agents.size(); ++a) {
      auto pts = observe_points(s, a, c, rng);
      for (const Point2& p : pts) {
        double best = INFINITY;
        for (const Box& b : s.boxes) best = std::min(best, perimeter_distance(p, b));
        EXPECT_LE(best, 1e-9);
      }
      // raster side: every occupied cell touches some box outline
      Tensor g = rasterize(pts, s.agents[a], c);
      for (std::size_t i = 0; i < c.grid.rows; ++i)
        for (std::size_t j = 0; j < c.grid.cols; ++j) {
          if (g.at(0, i, j) == 0.0) continue;
          const double cx0 = c.grid.x_min + static_cast<double>(j), cy0 = c.grid.y_min + static_cast<double>(i);
          bool touches = false;
          for (const Box& b : s.boxes) {
            const bool inside_x = cx0 + 1 >= b.cx - b.w / 2 && cx0 <= b.cx + b.w / 2;
            const bool inside_y = cy0 + 1 >= b.cy - b.l / 2 && cy0 <= b.cy + b.l / 2;
            touches = touches || (inside_x && inside_y);
          }
          EXPECT_TRUE(touches) << "cell " << i << "," << j;
        }
    }
  }
}

TEST(RenderObservation, CountsAndRangesNormalised) {
  const DomainConfig c = domain_preset("domain_B");
  std::mt19937_64 rng(6);
  for (int t = 0; t < 20; ++t) {
    SceneSample s = sample_scene(c, rng);
    ASSERT_EQ(s.grids.size(), s.agents.size());
    for (const Tensor& g : s.grids) {
      EXPECT_EQ(g.shape(), (Shape{2, 64, 32}));
      const std::size_t n = 64 * 32;
      for (std::size_t i = 0; i < n; ++i) {
        EXPECT_GE(g[i], 0.0);
        EXPECT_EQ(g[i], std::round(g[i]));
        EXPECT_GE(g[n + i], 0.0);
        EXPECT_LE(g[n + i], 1.0);
        if (g[i] == 0.0) {
          EXPECT_EQ(g[n + i], 0.0);
        }
      }
    }
  }
}

TEST(RenderObservation, RasterKeepsNearestRange) {
  DomainConfig c = clean_domain();
  c.sensor_range = 10.0;
  Tensor g = rasterize({{0.5, 3.5}, {0.2, 3.1}, {0.9, 3.9}, {100.0, 0.0}}, {0.0, 0.0}, c);
  // x 0.5 -> col 16, y 3.5 -> row 35
  EXPECT_EQ(g.at(0, 35, 16), 3.0);
  EXPECT_NEAR(g.at(1, 35, 16), std::hypot(0.2, 3.1) / 10.0, 1e-15);
  double mass = 0.0;
  for (std::size_t i = 0; i < 64 * 32; ++i) mass += g[i];
  EXPECT_NEAR(mass, 3.0, 1e-12);
}

TEST(RenderObservation, MoreNoiseLeavesLessMassInsideFootprints) {
  // same layouts, increasing noise
  auto footprint_mass = [](double noise) {
    DomainConfig c = clean_domain();
    c.noise_std = noise;
    double mass = 0.0;
    for (std::uint64_t k = 0; k < 500; ++k) {
      std::mt19937_64 lay = frame_stream(99, k);
      SceneSample s = sample_layout(c, lay);
      std::mt19937_64 rng = frame_stream(1234, k);
      Tensor g = render_observation(s, 0, c, rng);
      for (std::size_t i = 0; i < c.grid.rows; ++i)
        for (std::size_t j = 0; j < c.grid.cols; ++j) {
          const double x = c.grid.x_min + static_cast<double>(j) + 0.5, y = c.grid.y_min + static_cast<double>(i) + 0.5;
          for (const Box& b : s.boxes)
            if (std::fabs(x - b.cx) <= b.w / 2 + 0.5 && std::fabs(y - b.cy) <= b.l / 2 + 0.5) {
              mass += g.at(0, i, j);
              break;
            }
        }
    }
    return mass / 500.0;
  };
  const double m0 = footprint_mass(0.05), m1 = footprint_mass(0.25), m2 = footprint_mass(0.6);
  EXPECT_GT(m0, m1);
  EXPECT_GT(m1, m2);
}

TEST(Dataset, RoundTripIsLossless) {
  DomainConfig c = domain_preset("domain_B");
  c.seed = 5;
  const Dataset ds = generate_dataset(c, 7);
  const fs::path p = temp_path("rt.jsonl");
  write_dataset(ds, p);
  const Dataset back = read_dataset(p);
  EXPECT_EQ(back.cfg, ds.cfg);
  ASSERT_EQ(back.frames.size(), 7u);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_TRUE(back.frames[i] == ds.frames[i]) << i;
  // write(read(x)) == x byte for byte
  const fs::path p2 = temp_path("rt2.jsonl");
  write_dataset(back, p2);
  EXPECT_EQ(slurp(p), slurp(p2));
  fs::remove(p);
  fs::remove(p2);
}

TEST(Dataset, BytesArePureFunctionOfConfigCountSeed) {
  DomainConfig c = domain_preset("domain_A");
  c.seed = 21;
  const fs::path p1 = temp_path("d1.jsonl"), p2 = temp_path("d2.jsonl");
  write_dataset(generate_dataset(c, 4), p1);
  write_dataset(generate_dataset(c, 4), p2);
  const std::string text = slurp(p1);
  EXPECT_EQ(text, slurp(p2));
  // header layout and 17-significant-digit floats
  const std::string header = text.substr(0, text.find('\n'));
  EXPECT_EQ(header.rfind("{\"cfg\":", 0), 0u);
  EXPECT_NE(header.find("\"magic\":\"COPEFT-DS\""), std::string::npos);
  EXPECT_NE(header.find("\"version\":1"), std::string::npos);
  EXPECT_NE(header.find("\"count\":4"), std::string::npos);
  EXPECT_NE(header.find("\"noise_std\":0.050000000000000003"), std::string::npos);
  std::size_t lines = 0;
  for (char ch : text) lines += ch == '\n';
  EXPECT_EQ(lines, 5u);
  fs::remove(p1);
  fs::remove(p2);
}

TEST(Dataset, EmptyDatasetRoundTrips) {
  const fs::path p = temp_path("empty.jsonl");
  write_dataset({domain_preset("domain_A"), {}}, p);
  EXPECT_TRUE(read_dataset(p).frames.empty());
  fs::remove(p);
}

namespace {

// Rewrites the file and expects read_dataset to fail on `line`.
void expect_format_error(const std::string& content, std::size_t line, const std::string& fragment) {
  const fs::path p = temp_path("bad.jsonl");
  spit(p, content);
  try {
    read_dataset(p);
    ADD_FAILURE() << "accepted: " << fragment;
  } catch (const FormatError& e) {
    EXPECT_EQ(e.line(), line) << e.what();
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
  fs::remove(p);
}

}  // namespace

TEST(Dataset, MalformedFilesAreRejectedWithLineNumbers) {
  DomainConfig c = domain_preset("domain_A");
  c.seed = 8;
  const fs::path p = temp_path("src.jsonl");
  write_dataset(generate_dataset(c, 3), p);
  const std::string good = slurp(p);
  fs::remove(p);
  const std::size_t h_end = good.find('\n') + 1;
  const std::string header = good.substr(0, h_end);
  const std::string frames = good.substr(h_end);
  const std::size_t f1_end = frames.find('\n') + 1;

  std::string wrong_magic = header;
  wrong_magic.replace(wrong_magic.find("COPEFT-DS"), 9, "COPEFT-XX");
  expect_format_error(wrong_magic + frames, 1, "magic");

  std::string wrong_version = header;
  wrong_version.replace(wrong_version.find("\"version\":1"), 11, "\"version\":2");
  expect_format_error(wrong_version + frames, 1, "version");

  // only two of the three promised frames
  const std::string two = frames.substr(0, frames.rfind('\n', frames.size() - 2) + 1);
  expect_format_error(header + two, 4, "truncated");

  // second frame cut in half
  const std::string cut = header + frames.substr(0, f1_end) + frames.substr(f1_end, 40) + "\n";
  expect_format_error(cut, 3, "malformed");

  expect_format_error(header + "{\"agents\":[[0,0]],\"boxes\":[],\"grids\":[{\"data\":[1],\"shape\":[1]}]}\n", 2,
                      "shape");
  expect_format_error(header + "{\"agents\":[[0,0]],\"boxes\":[[1,2,3]],\"grids\":[]}\n", 2, "box");
  expect_format_error("", 1, "empty");
  expect_format_error(good + "{}\n", 5, "after");
  EXPECT_THROW(read_dataset(temp_path("missing.jsonl")), IoError);
}

TEST(Dataset, LoadDomainFromFile) {
  DomainConfig c = domain_preset("domain_B");
  c.name = "mine";
  c.sensor_range = 12.5;
  const fs::path p = temp_path("dom.json");
  spit(p, nlohmann::json(c).dump());
  EXPECT_EQ(load_domain(p.string()), c);
  spit(p, "{\"noise_std\": -3}");
  EXPECT_THROW(load_domain(p.string()), ConfigError);
  spit(p, "{nope");
  EXPECT_THROW(load_domain(p.string()), FormatError);
  fs::remove(p);
  EXPECT_EQ(load_domain("domain_A"), domain_preset("domain_A"));
  EXPECT_THROW(load_domain(temp_path("none.json").string()), IoError);
}
