// Command-line front end over the C API.
#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "copeft/copeft.h"

namespace {

constexpr int kUsageExit = 2;
constexpr int kFailExit = 1;

// One line on stderr: "error: <kind>: <message>".
int report_error(const std::string& kind, std::string msg) {
  for (char& c : msg)
    if (c == '\n' || c == '\r') c = ' ';
  std::fprintf(stderr, "error: %s: %s\n", kind.c_str(), msg.c_str());
  return kUsageExit;
}

struct Failure {
  copeft_status status;
};

void check(copeft_status s) {
  if (s != COPEFT_OK) throw Failure{s};
}

// Owning wrappers so every early exit frees its handles.
template <class T, void (*Free)(T*)>
struct Handle {
  T* p = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() { Free(p); }
  T** out() { return &p; }
};
using DatasetH = Handle<copeft_dataset, copeft_dataset_free>;
using ModelH = Handle<copeft_model, copeft_model_free>;
using ReportH = Handle<copeft_report, copeft_report_free>;

std::string method_of(const copeft_model* m) {
  std::size_t n = 0;
  check(copeft_model_method(m, nullptr, 0, &n));
  std::vector<char> buf(n);
  check(copeft_model_method(m, buf.data(), buf.size(), &n));
  return buf.data();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parameter-efficient adaptation of collaborative perception models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", copeft_version());

  std::string domain, out, data, config, base, method, delta, report, in_dir;
  std::uint64_t count = 0, seed = 0;
  double rate = 0.1;
  copeft_train_options topt = copeft_train_options_default();
  bool no_clock = false, verbose = false;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  gen->add_option("--domain", domain, "Preset name (domain_A, domain_B) or JSON file")->required();
  gen->add_option("--count", count, "Number of frames")->required();
  gen->add_option("--seed", seed, "Dataset seed")->required();
  gen->add_option("--out", out, "Output JSONL path")->required();

  auto* tb = app.add_subcommand("train-base", "Train a base model on every frame of a dataset");
  tb->add_option("--data", data, "Training dataset")->required()->check(CLI::ExistingFile);
  tb->add_option("--config", config, "JSON config (model, base_epochs, base_lr, base_batch, base_seed)")
      ->check(CLI::ExistingFile);
  tb->add_option("--out", out, "Output checkpoint")->required();

  auto* ad = app.add_subcommand("adapt", "Adapt a base model and write the delta checkpoint");
  ad->add_option("--base", base, "Base checkpoint")->required()->check(CLI::ExistingFile);
  ad->add_option("--data", data, "Adaptation dataset")->required()->check(CLI::ExistingFile);
  ad->add_option("--method", method, "Adaptation method")->required();
  ad->add_option("--rate", rate, "Fraction of frames used, in (0, 1]")->required();
  ad->add_option("--seed", seed, "Run seed")->required();
  ad->add_option("--out", out, "Output delta checkpoint")->required();
  ad->add_option("--epochs", topt.epochs, "Epochs");
  ad->add_option("--lr", topt.lr, "Adam learning rate");
  ad->add_option("--batch", topt.batch, "Frames per optimizer step");

  auto* ev = app.add_subcommand("eval", "Evaluate a model on a dataset");
  ev->add_option("--base", base, "Base checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--delta", delta, "Delta checkpoint")->check(CLI::ExistingFile);
  ev->add_option("--data", data, "Evaluation dataset")->required()->check(CLI::ExistingFile);
  ev->add_option("--report", report, "Output report JSON")->required();
  ev->add_option("--seed", seed, "Seed recorded in the report");
  ev->add_flag("--no-clock", no_clock, "Record 0 seconds");

  auto* rp = app.add_subcommand("report", "Collect report files into a CSV table");
  rp->add_option("--in", in_dir, "Directory of report JSON files")->required();
  rp->add_option("--out", out, "Output CSV")->required();

  auto* cp = app.add_subcommand("count-params", "Trainable and total parameter counts for a method");
  cp->add_option("--base", base, "Base checkpoint")->required()->check(CLI::ExistingFile);
  cp->add_option("--method", method, "Adaptation method")->required();

  auto* run = app.add_subcommand("run", "Run a full experiment from a JSON config");
  run->add_option("--config", config, "Experiment config")->required()->check(CLI::ExistingFile);
  run->add_flag("--verbose", verbose, "Progress on stderr");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what());
  }

  try {
    if (*gen) {
      DatasetH ds;
      check(copeft_dataset_generate(domain.c_str(), count, seed, ds.out()));
      check(copeft_dataset_save(ds.p, out.c_str()));
      std::printf("wrote %llu frames to %s\n", static_cast<unsigned long long>(count), out.c_str());
    } else if (*tb) {
      DatasetH ds;
      ModelH m;
      check(copeft_dataset_load(data.c_str(), ds.out()));
      check(copeft_model_train_base(ds.p, config.empty() ? nullptr : config.c_str(), m.out()));
      check(copeft_model_save(m.p, out.c_str()));
      std::printf("wrote base checkpoint %s\n", out.c_str());
    } else if (*ad) {
      DatasetH ds;
      ModelH b, m;
      check(copeft_dataset_load(data.c_str(), ds.out()));
      check(copeft_model_load(base.c_str(), ds.p, b.out()));
      check(copeft_model_adapt(b.p, ds.p, method.c_str(), rate, seed, &topt, m.out()));
      check(copeft_model_save_delta(m.p, out.c_str()));
      std::printf("wrote delta %s\n", out.c_str());
    } else if (*ev) {
      DatasetH ds;
      ModelH b, m;
      ReportH r;
      check(copeft_dataset_load(data.c_str(), ds.out()));
      check(copeft_model_load(base.c_str(), ds.p, b.out()));
      const copeft_model* target = b.p;
      if (!delta.empty()) {
        check(copeft_model_apply_delta(b.p, delta.c_str(), m.out()));
        target = m.p;
      }
      check(copeft_evaluate(target, ds.p, seed, no_clock ? 0 : 1, r.out()));
      check(copeft_report_save(r.p, report.c_str()));
      copeft_metrics mt;
      check(copeft_report_metrics(r.p, &mt));
      std::printf("%s AP50 %.4f AP70 %.4f\n", method_of(target).c_str(), mt.ap50, mt.ap70);
    } else if (*rp) {
      check(copeft_table_from_dir(in_dir.c_str(), out.c_str()));
      std::printf("wrote %s\n", out.c_str());
    } else if (*cp) {
      ModelH b;
      copeft_param_count c;
      check(copeft_model_load(base.c_str(), nullptr, b.out()));
      check(copeft_count_params(b.p, method.c_str(), &c));
      std::printf("{\"method\":\"%s\",\"params_trainable\":%llu,\"params_total\":%llu,\"ratio\":%.6f}\n",
                  method.c_str(), static_cast<unsigned long long>(c.trainable),
                  static_cast<unsigned long long>(c.total), c.ratio);
    } else if (*run) {
      check(copeft_run_experiment(config.c_str(), verbose ? 1 : 0));
    }
  } catch (const Failure& f) {
    report_error(copeft_status_name(f.status), copeft_last_error());
    return kFailExit;
  }
  return 0;
}
