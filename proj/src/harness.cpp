#include "copeft/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <ostream>
#include <random>

#include "copeft/error.hpp"

namespace copeft {

namespace fs = std::filesystem;

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32)};
  return std::mt19937_64(seq);
}

constexpr std::uint64_t kSelectTag = 0x5e1ec7ULL;
constexpr std::uint64_t kEpochTag = 0xe90c00000000ULL;

bool encoder_trainable(const ParamRegistry& reg) {
  for (const auto& e : reg.entries())
    if (e.trainable && e.name.rfind("encoder.", 0) == 0) return true;
  return false;
}

Tensor encode_frame(const Model& m, const SceneSample& s) {
  return encode_agents(std::span<const Tensor>(s.grids), m.params, m.config);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

Dataset load_checked(const std::string& path, const char* role) {
  if (path.empty()) throw ConfigError(std::string("experiment: ") + role + " dataset path is empty");
  if (!fs::exists(path)) throw IoError(std::string("experiment: ") + role + " dataset '" + path + "' not found");
  return read_dataset(path);
}

}  // namespace

TrainStats train(Model& model, const Dataset& ds, std::span<const std::size_t> frames, const TrainOptions& opt,
                 std::uint64_t seed, std::ostream* log) {
  if (opt.batch == 0) throw ConfigError("train: batch must be positive");
  for (std::size_t f : frames)
    if (f >= ds.frames.size()) throw ConfigError("train: frame index " + std::to_string(f) + " out of range");
  if (!(model.config.grid == ds.cfg.grid)) throw ConfigError("train: model grid does not match dataset grid");

  TrainStats stats;
  const bool cached = !encoder_trainable(model.params);
  std::vector<Tensor> feats(cached ? ds.frames.size() : 0);
  std::vector<DetectionTargets> targets(ds.frames.size());
  for (std::size_t f : frames) {
    if (targets[f].positive.numel() == 0) targets[f] = make_targets(ds.frames[f].boxes, model.config);
    if (cached && feats[f].numel() == 0) feats[f] = encode_frame(model, ds.frames[f]);
  }

  std::vector<std::size_t> order(frames.begin(), frames.end());
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::mt19937_64 rng = stream(seed, kEpochTag + epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += opt.batch) {
      const std::size_t end = std::min(order.size(), b + opt.batch);
      GradMap acc;
      for (std::size_t k = b; k < end; ++k) {
        const std::size_t f = order[k];
        ForwardTrace tr;
        const HeadOutputs heads = cached ? pipeline_forward_features(model, feats[f], &tr)
                                         : pipeline_forward(model, ds.frames[f].grids, &tr);
        const LossResult loss = detection_loss(heads, targets[f], opt.loss);
        if (!std::isfinite(loss.total)) {
          throw Error(ErrorCode::kNumeric, "train: non-finite loss at epoch " + std::to_string(epoch) +
                                               ", frame " + std::to_string(f));
        }
        loss_sum += loss.total;
        const GradMap g = pipeline_backward(model, tr, loss.grad);
        for (const auto& [name, t] : g.params) acc.accumulate(name, t);
        stats.frames_touched.insert(f);
      }
      acc.scale(1.0 / static_cast<double>(end - b));
      adam_step(model.params, acc, opt.adam);
      ++stats.steps;
    }
    const double mean = order.empty() ? 0.0 : loss_sum / static_cast<double>(order.size());
    stats.epoch_loss.push_back(mean);
    if (log) *log << "epoch " << epoch + 1 << "/" << opt.epochs << " loss " << fmt("%.6f", mean) << "\n";
  }
  return stats;
}

std::size_t budget_size(std::size_t n, double rate) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("rate must lie in (0, 1], got " + fmt("%g", rate));
  // guard against 0.1 * 200 = 20.000000000000004
  const double want = rate * static_cast<double>(n);
  const double r = std::round(want);
  const std::size_t k = std::abs(want - r) < 1e-9 ? static_cast<std::size_t>(r)
                                                  : static_cast<std::size_t>(std::ceil(want));
  return std::min(k, n);
}

std::vector<std::size_t> select_frames(std::size_t n, double rate, std::uint64_t seed) {
  const std::size_t k = budget_size(n, rate);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng = stream(seed, kSelectTag);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(k);
  return idx;
}

Model train_base(const ModelConfig& cfg, const Dataset& ds, const TrainOptions& opt, std::uint64_t seed,
                 std::ostream* log) {
  ModelConfig c = cfg;
  c.grid = ds.cfg.grid;
  c.validate();
  Model m = make_model(c, parse_method("none"), seed);
  for (auto& e : m.params.entries()) e.trainable = true;
  m.params.reset_optimizer_state();
  std::vector<std::size_t> all(ds.frames.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  train(m, ds, all, opt, seed, log);
  m.params.freeze_all();
  m.params.reset_optimizer_state();
  return m;
}

AdaptOutcome adapt(const Model& base, const Dataset& ds, const MethodConfig& method, double rate,
                   std::uint64_t seed, const TrainOptions& opt, std::ostream* log) {
  AdaptOutcome out;
  out.frames = select_frames(ds.frames.size(), rate, seed);
  if (method.method == Method::kScratch) {
    out.model = make_model(base.config, method, seed);
  } else {
    out.model = with_method(base, method, seed);
  }
  out.model.config.grid = ds.cfg.grid;
  out.mask = build_freeze_mask(out.model.params, method);
  apply_freeze_mask(out.model.params, out.mask);
  out.model.params.reset_optimizer_state();
  if (method.method == Method::kNone) return out;

  out.stats = train(out.model, ds, out.frames, opt, seed, log);

  if (method.method != Method::kScratch) {
    for (const auto& e : base.params.entries()) {
      if (out.mask.count(e.name)) continue;
      if (!out.model.params.value(e.name).bitwise_equal(e.value)) {
        throw Error(ErrorCode::kNumeric, "adapt: frozen parameter '" + e.name + "' changed");
      }
    }
  }
  return out;
}

void ExperimentConfig::validate() const {
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("experiment: rate must lie in (0, 1]");
  if (methods.empty()) throw ConfigError("experiment: no methods");
  if (seeds.empty()) throw ConfigError("experiment: no seeds");
  if (out_dir.empty()) throw ConfigError("experiment: out_dir is empty");
  if (adapt_opt.batch == 0 || base_opt.batch == 0) throw ConfigError("experiment: batch must be positive");
  for (const auto& m : methods) parse_method(m);
  model.validate();
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"train_a", c.train_a},
                     {"train_b", c.train_b},
                     {"test_b", c.test_b},
                     {"methods", c.methods},
                     {"rate", c.rate},
                     {"seeds", c.seeds},
                     {"model", c.model},
                     {"lr", c.adapt_opt.adam.lr},
                     {"batch", c.adapt_opt.batch},
                     {"epochs", c.adapt_opt.epochs},
                     {"base_lr", c.base_opt.adam.lr},
                     {"base_batch", c.base_opt.batch},
                     {"base_epochs", c.base_opt.epochs},
                     {"base_seed", c.base_seed},
                     {"out_dir", c.out_dir},
                     {"base_checkpoint", c.base_checkpoint},
                     {"record_wall_clock", c.record_wall_clock},
                     {"reg_weight", c.adapt_opt.loss.reg_weight},
                     {"reg_beta", c.adapt_opt.loss.reg_beta}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  c.train_a = j.value("train_a", c.train_a);
  c.train_b = j.value("train_b", c.train_b);
  c.test_b = j.value("test_b", c.test_b);
  if (j.contains("methods")) c.methods = j.at("methods").get<std::vector<std::string>>();
  c.rate = j.value("rate", c.rate);
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("model")) from_json(j.at("model"), c.model);
  c.adapt_opt.adam.lr = j.value("lr", c.adapt_opt.adam.lr);
  c.adapt_opt.batch = j.value("batch", c.adapt_opt.batch);
  c.adapt_opt.epochs = j.value("epochs", c.adapt_opt.epochs);
  c.base_opt.adam.lr = j.value("base_lr", c.base_opt.adam.lr);
  c.base_opt.batch = j.value("base_batch", c.base_opt.batch);
  c.base_opt.epochs = j.value("base_epochs", c.base_opt.epochs);
  c.base_seed = j.value("base_seed", c.base_seed);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.base_checkpoint = j.value("base_checkpoint", c.base_checkpoint);
  c.record_wall_clock = j.value("record_wall_clock", c.record_wall_clock);
  c.adapt_opt.loss.reg_weight = j.value("reg_weight", c.adapt_opt.loss.reg_weight);
  c.adapt_opt.loss.reg_beta = j.value("reg_beta", c.adapt_opt.loss.reg_beta);
  c.base_opt.loss = c.adapt_opt.loss;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  ExperimentConfig c;
  try {
    from_json(nlohmann::json::parse(in), c);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  return c;
}

std::string cell_name(const std::string& label, std::uint64_t seed) {
  std::string out;
  for (char c : label) {
    if (c == ':' || c == ',') {
      out += '_';
    } else if (c == '-') {
      out += "no";
    } else if (c == '+') {
      out += "with";
    } else {
      out += c;
    }
  }
  return out + "_s" + std::to_string(seed);
}

std::vector<MetricsReport> run_experiment(const ExperimentConfig& cfg, std::ostream* log) {
  cfg.validate();
  std::vector<MethodConfig> methods;
  for (const auto& m : cfg.methods) methods.push_back(parse_method(m));

  const Dataset train_b = load_checked(cfg.train_b, "train_B");
  const Dataset test_b = load_checked(cfg.test_b, "test_B");
  if (!(train_b.cfg.grid == test_b.cfg.grid)) throw ConfigError("experiment: train_B and test_B grids differ");

  const fs::path out(cfg.out_dir);
  Model base;
  const bool cached = !cfg.base_checkpoint.empty() && fs::exists(cfg.base_checkpoint);
  if (cached) {
    base = load_model(cfg.base_checkpoint, test_b.cfg.grid);
    if (base.config.hash() != cfg.model.hash()) {
      throw ConfigError("experiment: base checkpoint '" + cfg.base_checkpoint +
                        "' does not match the configured model (hash " + hex(base.config.hash()) + " vs " +
                        hex(cfg.model.hash()) + ")");
    }
  } else {
    const Dataset train_a = load_checked(cfg.train_a, "train_A");
    if (!(train_a.cfg.grid == test_b.cfg.grid)) throw ConfigError("experiment: train_A and test_B grids differ");
    fs::create_directories(out);
    if (log) *log << "training base on " << train_a.frames.size() << " frames\n";
    base = train_base(cfg.model, train_a, cfg.base_opt, cfg.base_seed, log);
    save_model(out / "base.cpft", base);
    if (!cfg.base_checkpoint.empty()) save_model(cfg.base_checkpoint, base);
  }
  base.config.grid = test_b.cfg.grid;
  fs::create_directories(out / "reports");
  fs::create_directories(out / "deltas");

  // every method but scratch keeps the base encoder
  std::vector<Tensor> test_feats;
  test_feats.reserve(test_b.frames.size());
  for (const auto& s : test_b.frames) test_feats.push_back(encode_frame(base, s));

  std::vector<MetricsReport> reports;
  for (const MethodConfig& m : methods) {
    const std::string label = method_label(m);
    for (std::uint64_t seed : cfg.seeds) {
      const auto t0 = std::chrono::steady_clock::now();
      const AdaptOutcome a = adapt(base, train_b, m, cfg.rate, seed, cfg.adapt_opt, nullptr);
      MetricsReport r = m.method == Method::kScratch ? evaluate_model(a.model, test_b)
                                                     : evaluate_features(a.model, test_feats, test_b);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const ParamCount pc = count_params(a.model.params, a.mask);
      r.method = label;
      r.seed = seed;
      r.params_trainable = pc.trainable;
      r.params_total = pc.total;
      r.seconds = cfg.record_wall_clock ? secs : 0.0;
      const std::string cell = cell_name(label, seed);
      write_report(r, out / "reports" / (cell + ".json"));
      if (!a.mask.empty()) save_delta(out / "deltas" / (cell + ".cpft"), a.model, a.mask);
      if (log) {
        *log << label << " seed " << seed << " AP50 " << fmt("%.4f", r.ap50) << " AP70 " << fmt("%.4f", r.ap70)
             << " (" << fmt("%.1f", secs) << " s)\n";
      }
      reports.push_back(std::move(r));
    }
  }
  write_text(out / "table.csv", emit_table(reports));
  return reports;
}

std::string emit_table(std::span<const MetricsReport> reports) {
  std::string out = "method,seed,params_trainable,params_total,ratio,AP50,AP70,seconds\n";
  for (const MetricsReport& r : reports) {
    const double ratio =
        r.params_total ? static_cast<double>(r.params_trainable) / static_cast<double>(r.params_total) : 0.0;
    out += csv_field(r.method) + ',' + std::to_string(r.seed) + ',' + std::to_string(r.params_trainable) + ',' +
           std::to_string(r.params_total) + ',' + fmt("%.6f", ratio) + ',' + fmt("%.4f", r.ap50) + ',' +
           fmt("%.4f", r.ap70) + ',' + fmt("%.4f", r.seconds) + '\n';
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream o(path, std::ios::binary);
  if (!o) throw IoError("cannot write '" + path.string() + "'");
  o << text;
  if (!o) throw IoError("write failed for '" + path.string() + "'");
}

void write_report(const MetricsReport& r, const fs::path& path) {
  nlohmann::json j = r;
  write_text(path, dump_json(j) + "\n");
}

MetricsReport read_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open report '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in).get<MetricsReport>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("report '" + path.string() + "': " + e.what());
  }
}

std::vector<MetricsReport> read_reports(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("report directory '" + dir.string() + "' not found");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<MetricsReport> out;
  for (const auto& f : files) out.push_back(read_report(f));
  return out;
}

}  // namespace copeft
