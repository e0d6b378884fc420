#include "copeft/copeft.h"

#include <chrono>
#include <cstring>
#include <iostream>
#include <new>
#include <string>

#include "copeft/error.hpp"
#include "copeft/harness.hpp"

using namespace copeft;

struct copeft_dataset {
  Dataset ds;
};

struct copeft_model {
  Model model;
  FreezeMask mask;  // names the model's method trains
};

struct copeft_report {
  MetricsReport r;
};

namespace {

thread_local std::string g_last_error;

copeft_status to_status(ErrorCode c) {
  switch (c) {
    case ErrorCode::kInvalidArgument: return COPEFT_ERR_INVALID_ARGUMENT;
    case ErrorCode::kShape: return COPEFT_ERR_SHAPE;
    case ErrorCode::kConfig: return COPEFT_ERR_CONFIG;
    case ErrorCode::kIo: return COPEFT_ERR_IO;
    case ErrorCode::kFormat: return COPEFT_ERR_FORMAT;
    case ErrorCode::kNumeric: return COPEFT_ERR_NUMERIC;
    case ErrorCode::kMissingParameter: return COPEFT_ERR_MISSING_PARAMETER;
  }
  return COPEFT_ERR_INTERNAL;
}

copeft_status fail(copeft_status s, std::string msg) {
  for (char& c : msg)
    if (c == '\n' || c == '\r') c = ' ';
  g_last_error = std::move(msg);
  return s;
}

template <class F>
copeft_status guard(F&& f) {
  try {
    f();
    g_last_error.clear();
    return COPEFT_OK;
  } catch (const Error& e) {
    return fail(to_status(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(COPEFT_ERR_FORMAT, e.what());
  } catch (const std::bad_alloc&) {
    return fail(COPEFT_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(COPEFT_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(COPEFT_ERR_INTERNAL, "unknown error");
  }
}

void need(const void* p, const char* what) {
  if (!p) throw Error(ErrorCode::kInvalidArgument, std::string(what) + " is null");
}

FreezeMask trainable_names(const ParamRegistry& reg) {
  FreezeMask m;
  for (const auto& e : reg.entries())
    if (e.trainable) m.insert(e.name);
  return m;
}

TrainOptions train_options(const copeft_train_options* o) {
  TrainOptions t;
  if (o) {
    t.adam.lr = o->lr;
    t.batch = static_cast<std::size_t>(o->batch);
    t.epochs = static_cast<std::size_t>(o->epochs);
  }
  if (!(t.adam.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (t.batch == 0) throw ConfigError("batch must be positive");
  return t;
}

}  // namespace

extern "C" {

const char* copeft_version(void) { return "0.1.0"; }

const char* copeft_status_name(copeft_status s) {
  switch (s) {
    case COPEFT_OK: return "ok";
    case COPEFT_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case COPEFT_ERR_SHAPE: return "shape";
    case COPEFT_ERR_CONFIG: return "config";
    case COPEFT_ERR_IO: return "io";
    case COPEFT_ERR_FORMAT: return "format";
    case COPEFT_ERR_NUMERIC: return "numeric";
    case COPEFT_ERR_MISSING_PARAMETER: return "missing_parameter";
    case COPEFT_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* copeft_last_error(void) { return g_last_error.c_str(); }

copeft_train_options copeft_train_options_default(void) {
  const TrainOptions t;
  return {t.adam.lr, t.batch, t.epochs};
}

copeft_status copeft_dataset_generate(const char* domain, uint64_t count, uint64_t seed, copeft_dataset** out) {
  return guard([&] {
    need(domain, "domain");
    need(out, "out");
    DomainConfig cfg = load_domain(domain);
    cfg.seed = seed;
    *out = new copeft_dataset{generate_dataset(cfg, static_cast<std::size_t>(count))};
  });
}

copeft_status copeft_dataset_load(const char* path, copeft_dataset** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new copeft_dataset{read_dataset(path)};
  });
}

copeft_status copeft_dataset_save(const copeft_dataset* ds, const char* path) {
  return guard([&] {
    need(ds, "dataset");
    need(path, "path");
    write_dataset(ds->ds, path);
  });
}

copeft_status copeft_dataset_size(const copeft_dataset* ds, uint64_t* out) {
  return guard([&] {
    need(ds, "dataset");
    need(out, "out");
    *out = ds->ds.frames.size();
  });
}

void copeft_dataset_free(copeft_dataset* ds) { delete ds; }

copeft_status copeft_model_train_base(const copeft_dataset* data, const char* config_path, copeft_model** out) {
  return guard([&] {
    need(data, "dataset");
    need(out, "out");
    ExperimentConfig c;
    if (config_path) c = load_experiment_config(config_path);
    if (c.base_opt.batch == 0) throw ConfigError("base_batch must be positive");
    Model m = train_base(c.model, data->ds, c.base_opt, c.base_seed);
    *out = new copeft_model{std::move(m), {}};
  });
}

copeft_status copeft_model_load(const char* path, const copeft_dataset* geometry, copeft_model** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    Model m = load_model(path, geometry ? geometry->ds.cfg.grid : GridGeometry{});
    m.params.freeze_all();
    *out = new copeft_model{std::move(m), {}};
  });
}

copeft_status copeft_model_save(const copeft_model* model, const char* path) {
  return guard([&] {
    need(model, "model");
    need(path, "path");
    save_model(path, model->model);
  });
}

copeft_status copeft_model_adapt(const copeft_model* base, const copeft_dataset* data, const char* method, double rate,
                                 uint64_t seed, const copeft_train_options* opts, copeft_model** out) {
  return guard([&] {
    need(base, "base");
    need(data, "dataset");
    need(method, "method");
    need(out, "out");
    const MethodConfig m = parse_method(method);
    const TrainOptions t = train_options(opts);
    AdaptOutcome a = adapt(base->model, data->ds, m, rate, seed, t);
    *out = new copeft_model{std::move(a.model), std::move(a.mask)};
  });
}

copeft_status copeft_model_save_delta(const copeft_model* model, const char* path) {
  return guard([&] {
    need(model, "model");
    need(path, "path");
    if (model->mask.empty()) {
      throw ConfigError("method '" + method_label(model->model.method) + "' trains no parameters; nothing to save");
    }
    save_delta(path, model->model, model->mask);
  });
}

copeft_status copeft_model_apply_delta(const copeft_model* base, const char* delta_path, copeft_model** out) {
  return guard([&] {
    need(base, "base");
    need(delta_path, "delta path");
    need(out, "out");
    Model m = load_delta(base->model, delta_path);
    FreezeMask mask = trainable_names(m.params);
    *out = new copeft_model{std::move(m), std::move(mask)};
  });
}

copeft_status copeft_count_params(const copeft_model* base, const char* method, copeft_param_count* out) {
  return guard([&] {
    need(base, "base");
    need(method, "method");
    need(out, "out");
    const Model m = with_method(base->model, parse_method(method), 0);
    const ParamCount c = count_params(m.params, build_freeze_mask(m.params, m.method));
    *out = {c.trainable, c.total, c.ratio};
  });
}

copeft_status copeft_model_method(const copeft_model* model, char* buf, size_t cap, size_t* needed) {
  return guard([&] {
    need(model, "model");
    const std::string s = method_label(model->model.method);
    if (needed) *needed = s.size() + 1;
    if (cap == 0) return;
    need(buf, "buffer");
    if (cap < s.size() + 1) throw Error(ErrorCode::kInvalidArgument, "buffer too small for method label");
    std::memcpy(buf, s.c_str(), s.size() + 1);
  });
}

void copeft_model_free(copeft_model* model) { delete model; }

copeft_status copeft_evaluate(const copeft_model* model, const copeft_dataset* data, uint64_t seed,
                              int record_wall_clock, copeft_report** out) {
  return guard([&] {
    need(model, "model");
    need(data, "dataset");
    need(out, "out");
    Model m = model->model;
    m.config.grid = data->ds.cfg.grid;
    const auto t0 = std::chrono::steady_clock::now();
    MetricsReport r = evaluate_model(m, data->ds);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const ParamCount c = count_params(m.params, model->mask);
    r.method = method_label(m.method);
    r.seed = seed;
    r.params_trainable = c.trainable;
    r.params_total = c.total;
    r.seconds = record_wall_clock ? secs : 0.0;
    *out = new copeft_report{std::move(r)};
  });
}

copeft_status copeft_report_metrics(const copeft_report* report, copeft_metrics* out) {
  return guard([&] {
    need(report, "report");
    need(out, "out");
    const MetricsReport& r = report->r;
    *out = {r.ap50, r.ap70, r.num_detections, r.num_gt, r.params_trainable, r.params_total, r.seconds};
  });
}

copeft_status copeft_report_save(const copeft_report* report, const char* path) {
  return guard([&] {
    need(report, "report");
    need(path, "path");
    write_report(report->r, path);
  });
}

void copeft_report_free(copeft_report* report) { delete report; }

copeft_status copeft_table_from_dir(const char* dir, const char* csv_path) {
  return guard([&] {
    need(dir, "dir");
    need(csv_path, "csv path");
    write_text(csv_path, emit_table(read_reports(dir)));
  });
}

copeft_status copeft_run_experiment(const char* config_path, int verbose) {
  return guard([&] {
    need(config_path, "config path");
    run_experiment(load_experiment_config(config_path), verbose ? &std::cerr : nullptr);
  });
}

}  // extern "C"
