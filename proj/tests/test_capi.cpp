#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <unistd.h>

#include "copeft/copeft.h"

namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("copeft_capi_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Small world and model so the round trips stay fast.
void write_tiny_files(const fs::path& dir) {
  std::ofstream(dir / "domain.json") << R"({"name":"tiny","grid":{"x_min":-8,"y_min":-8,"cell_size":1,"rows":16,"cols":16},
    "object_rate":2,"width_mean":1.5,"width_std":0.2,"length_mean":2.5,"length_std":0.4,"min_size":0.5,
    "min_agents":2,"max_agents":3,"sensor_range":12,"points_per_meter":4,"noise_std":0.05,"miss_slope":0.02,
    "clutter_rate":0.001,"seed":0})";
  std::ofstream(dir / "train.json") << R"({"model":{"hidden_channels":6,"feature_channels":8,"attn_dim":4},
    "base_epochs":1})";
}

}  // namespace

TEST(CApi, StatusNamesAndVersion) {
  EXPECT_STREQ(copeft_status_name(COPEFT_OK), "ok");
  EXPECT_STREQ(copeft_status_name(COPEFT_ERR_FORMAT), "format");
  EXPECT_STREQ(copeft_version(), "0.1.0");
  const copeft_train_options o = copeft_train_options_default();
  EXPECT_DOUBLE_EQ(o.lr, 0.002);
  EXPECT_EQ(o.batch, 2u);
  EXPECT_EQ(o.epochs, 20u);
}

TEST(CApi, NullArgumentsAndErrorsAreReported) {
  copeft_dataset* ds = nullptr;
  EXPECT_EQ(copeft_dataset_load(nullptr, &ds), COPEFT_ERR_INVALID_ARGUMENT);
  EXPECT_NE(std::string(copeft_last_error()).find("null"), std::string::npos);
  EXPECT_EQ(copeft_dataset_load("/nonexistent/file.jsonl", &ds), COPEFT_ERR_IO);
  EXPECT_EQ(ds, nullptr);
  EXPECT_EQ(copeft_dataset_generate("domain_Z", 1, 0, &ds), COPEFT_ERR_IO);
  uint64_t n = 0;
  EXPECT_EQ(copeft_dataset_size(nullptr, &n), COPEFT_ERR_INVALID_ARGUMENT);
  // a success clears the message
  EXPECT_EQ(copeft_dataset_generate("domain_A", 1, 0, &ds), COPEFT_OK);
  EXPECT_STREQ(copeft_last_error(), "");
  copeft_dataset_free(ds);
  copeft_dataset_free(nullptr);
  copeft_model_free(nullptr);
  copeft_report_free(nullptr);
}

TEST(CApi, EndToEndThroughHandles) {
  const fs::path dir = temp_dir("e2e");
  write_tiny_files(dir);
  const std::string domain = (dir / "domain.json").string();

  copeft_dataset* ds = nullptr;
  ASSERT_EQ(copeft_dataset_generate(domain.c_str(), 6, 4, &ds), COPEFT_OK) << copeft_last_error();
  uint64_t n = 0;
  ASSERT_EQ(copeft_dataset_size(ds, &n), COPEFT_OK);
  EXPECT_EQ(n, 6u);
  const std::string data = (dir / "d.jsonl").string();
  ASSERT_EQ(copeft_dataset_save(ds, data.c_str()), COPEFT_OK);
  copeft_dataset* back = nullptr;
  ASSERT_EQ(copeft_dataset_load(data.c_str(), &back), COPEFT_OK);

  copeft_model* base = nullptr;
  ASSERT_EQ(copeft_model_train_base(back, (dir / "train.json").c_str(), &base), COPEFT_OK) << copeft_last_error();
  const std::string ckpt = (dir / "base.cpft").string();
  ASSERT_EQ(copeft_model_save(base, ckpt.c_str()), COPEFT_OK);

  copeft_param_count pc{};
  ASSERT_EQ(copeft_count_params(base, "none", &pc), COPEFT_OK);
  EXPECT_EQ(pc.trainable, 0u);
  ASSERT_EQ(copeft_count_params(base, "copeft", &pc), COPEFT_OK);
  EXPECT_GT(pc.trainable, 0u);
  EXPECT_DOUBLE_EQ(pc.ratio, static_cast<double>(pc.trainable) / static_cast<double>(pc.total));
  EXPECT_EQ(copeft_count_params(base, "bogus", &pc), COPEFT_ERR_CONFIG);

  copeft_train_options opt = copeft_train_options_default();
  opt.epochs = 1;
  copeft_model* adapted = nullptr;
  ASSERT_EQ(copeft_model_adapt(base, back, "copeft", 0.5, 1, &opt, &adapted), COPEFT_OK) << copeft_last_error();
  const std::string delta = (dir / "copeft.cpft").string();
  ASSERT_EQ(copeft_model_save_delta(adapted, delta.c_str()), COPEFT_OK);

  copeft_model* none = nullptr;
  ASSERT_EQ(copeft_model_adapt(base, back, "none", 0.5, 1, &opt, &none), COPEFT_OK);
  EXPECT_EQ(copeft_model_save_delta(none, (dir / "none.cpft").c_str()), COPEFT_ERR_CONFIG);
  EXPECT_EQ(copeft_model_adapt(base, back, "copeft", 0.0, 1, &opt, &none), COPEFT_ERR_CONFIG);

  copeft_model* loaded = nullptr;
  ASSERT_EQ(copeft_model_load(ckpt.c_str(), back, &loaded), COPEFT_OK);
  copeft_model* applied = nullptr;
  ASSERT_EQ(copeft_model_apply_delta(loaded, delta.c_str(), &applied), COPEFT_OK) << copeft_last_error();
  size_t need = 0;
  ASSERT_EQ(copeft_model_method(applied, nullptr, 0, &need), COPEFT_OK);
  EXPECT_EQ(need, 7u);
  char small[3];
  EXPECT_EQ(copeft_model_method(applied, small, sizeof small, &need), COPEFT_ERR_INVALID_ARGUMENT);
  char label[16];
  ASSERT_EQ(copeft_model_method(applied, label, sizeof label, &need), COPEFT_OK);
  EXPECT_STREQ(label, "copeft");

  copeft_report* r1 = nullptr;
  copeft_report* r2 = nullptr;
  ASSERT_EQ(copeft_evaluate(adapted, back, 1, 0, &r1), COPEFT_OK) << copeft_last_error();
  ASSERT_EQ(copeft_evaluate(applied, back, 1, 0, &r2), COPEFT_OK);
  copeft_metrics m1{}, m2{};
  ASSERT_EQ(copeft_report_metrics(r1, &m1), COPEFT_OK);
  ASSERT_EQ(copeft_report_metrics(r2, &m2), COPEFT_OK);
  EXPECT_EQ(m1.ap50, m2.ap50);
  EXPECT_EQ(m1.ap70, m2.ap70);
  EXPECT_EQ(m1.params_trainable, pc.trainable);
  EXPECT_EQ(m2.params_trainable, pc.trainable);
  EXPECT_EQ(m1.seconds, 0.0);

  const fs::path reports = dir / "reports";
  fs::create_directories(reports);
  ASSERT_EQ(copeft_report_save(r1, (reports / "a.json").c_str()), COPEFT_OK);
  ASSERT_EQ(copeft_table_from_dir(reports.c_str(), (dir / "t.csv").c_str()), COPEFT_OK);
  std::ifstream csv(dir / "t.csv");
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  EXPECT_EQ(header, "method,seed,params_trainable,params_total,ratio,AP50,AP70,seconds");
  EXPECT_EQ(row.substr(0, 9), "copeft,1,");

  // corrupt delta
  {
    std::ofstream(dir / "bad.cpft", std::ios::binary) << "CPFTxxxx";
  }
  copeft_model* bad = nullptr;
  EXPECT_EQ(copeft_model_apply_delta(loaded, (dir / "bad.cpft").c_str(), &bad), COPEFT_ERR_FORMAT);
  EXPECT_EQ(bad, nullptr);

  copeft_report_free(r1);
  copeft_report_free(r2);
  copeft_model_free(applied);
  copeft_model_free(loaded);
  copeft_model_free(none);
  copeft_model_free(adapted);
  copeft_model_free(base);
  copeft_dataset_free(back);
  copeft_dataset_free(ds);
  fs::remove_all(dir);
}
