#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include <unistd.h>

#include "copeft/checkpoint.hpp"
#include "copeft/error.hpp"
#include "test_util.hpp"

using namespace copeft;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("copeft_ckpt_" + std::to_string(::getpid()) + "_" + name);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

std::uint32_t le32(const std::string& b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + i])) << (8 * i);
  return v;
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.hidden_channels = 6;
  cfg.feature_channels = 8;
  cfg.attn_dim = 4;
  cfg.fusion_layers = 2;
  return cfg;
}

Model random_model(const char* method, std::uint64_t seed) {
  Model m = make_model(small_config(), parse_method(method), seed);
  std::mt19937_64 rng(seed + 100);
  for (const auto& n : m.params.names())
    m.params.value(n) = copeft::testing::random_tensor(m.params.value(n).shape(), rng);
  return m;
}

}  // namespace

TEST(Checkpoint, FullRoundTripIsBitwise) {
  const Model m = random_model("copeft_d", 1);
  const fs::path p = temp_path("full.cpft");
  save_model(p, m);
  const Model back = load_model(p, m.config.grid);
  EXPECT_EQ(back.params.names(), m.params.names());
  for (const auto& e : m.params.entries()) EXPECT_TRUE(back.params.value(e.name).bitwise_equal(e.value)) << e.name;
  EXPECT_EQ(method_label(back.method), "copeft_d");
  EXPECT_EQ(back.config.hash(), m.config.hash());
  const fs::path p2 = temp_path("full2.cpft");
  save_model(p2, back);
  EXPECT_EQ(slurp(p), slurp(p2));
  fs::remove(p);
  fs::remove(p2);
}

TEST(Checkpoint, ByteLayoutMatchesFormat) {
  const Model m = random_model("none", 2);
  const fs::path p = temp_path("layout.cpft");
  save_model(p, m);
  const std::string b = slurp(p);
  fs::remove(p);
  EXPECT_EQ(b.substr(0, 4), "CPFT");
  EXPECT_EQ(le32(b, 4), 1u);
  EXPECT_EQ(le32(b, 8), 0u);  // full
  const auto hash = m.config.hash();
  EXPECT_EQ(std::memcmp(b.data() + 12, hash.data(), 32), 0);
  EXPECT_EQ(le32(b, 44), m.params.entries().size() + 2);  // plus two meta tensors

  // walk every record by hand and compare against the registry
  std::size_t pos = 48;
  std::size_t values = 0;
  for (std::uint32_t k = 0; k < le32(b, 44); ++k) {
    const std::size_t len = static_cast<unsigned char>(b[pos]) | static_cast<unsigned char>(b[pos + 1]) << 8;
    const std::string name = b.substr(pos + 2, len);
    pos += 2 + len;
    const std::size_t rank = static_cast<unsigned char>(b[pos++]);
    Shape shape;
    for (std::size_t d = 0; d < rank; ++d, pos += 4) shape.push_back(le32(b, pos));
    const std::size_t n = shape_numel(shape);
    if (name.rfind("meta.", 0) != 0) {
      const Tensor& t = m.params.value(name);
      EXPECT_EQ(shape, t.shape()) << name;
      double first;
      std::memcpy(&first, b.data() + pos, 8);
      EXPECT_EQ(first, t[0]) << name;
      values += n;
    }
    pos += 8 * n;
  }
  EXPECT_EQ(pos, b.size());
  EXPECT_EQ(values, count_params(m.params, {}).total);
}

TEST(Checkpoint, DeltaHoldsExactlyTheMask) {
  const Model base = random_model("none", 3);
  for (const char* text : {"decoder_only", "ssf", "adapter", "copeft", "copeft_s", "copeft_d", "copeft:-prompt",
                           "copeft:-colf,+sigmoid", "copeft:-inst", "scratch"}) {
    Model m = with_method(base, parse_method(text), 4);
    const FreezeMask mask = build_freeze_mask(m.params, m.method);
    const Checkpoint c = make_checkpoint(m, CheckpointKind::kDelta, mask);
    FreezeMask stored;
    for (const auto& [n, t] : c.tensors)
      if (n.rfind("meta.", 0) != 0) stored.insert(n);
    EXPECT_EQ(stored, mask) << text;

    const fs::path p = temp_path("delta.cpft");
    write_checkpoint(p, c);
    const Model back = load_delta(base, p);
    EXPECT_EQ(method_label(back.method), text);
    for (const auto& e : m.params.entries()) {
      EXPECT_TRUE(back.params.value(e.name).bitwise_equal(mask.count(e.name) ? e.value : m.params.value(e.name)));
      EXPECT_EQ(back.params.trainable(e.name), mask.count(e.name) != 0) << e.name;
    }
    fs::remove(p);
  }
  EXPECT_THROW(make_checkpoint(base, CheckpointKind::kDelta, {}), Error);
}

TEST(Checkpoint, DeltaOverwritesOnlyStoredNames) {
  const Model base = random_model("none", 5);
  Model adapted = with_method(base, parse_method("copeft"), 6);
  const FreezeMask mask = build_freeze_mask(adapted.params, adapted.method);
  for (const auto& n : mask) adapted.params.value(n) *= 3.0;
  const Model back = apply_delta(base, make_checkpoint(adapted, CheckpointKind::kDelta, mask));
  for (const auto& e : base.params.entries()) {
    if (!mask.count(e.name)) {
      EXPECT_TRUE(back.params.value(e.name).bitwise_equal(e.value)) << e.name;
    }
  }
  for (const auto& n : mask) EXPECT_TRUE(back.params.value(n).bitwise_equal(adapted.params.value(n))) << n;
}

TEST(Checkpoint, DeltaOverMismatchedConfigIsRejected) {
  const Model base = random_model("none", 7);
  Model adapted = with_method(base, parse_method("copeft"), 8);
  const Checkpoint c = make_checkpoint(adapted, CheckpointKind::kDelta, build_freeze_mask(adapted.params, adapted.method));
  ModelConfig other = small_config();
  other.hidden_channels = 10;
  const Model different = make_model(other, parse_method("none"), 1);
  EXPECT_THROW(apply_delta(different, c), ConfigError);
  ModelConfig residual_off = small_config();
  residual_off.fusion_residual = false;
  EXPECT_THROW(apply_delta(make_model(residual_off, parse_method("none"), 1), c), ConfigError);
  EXPECT_THROW(apply_delta(base, make_checkpoint(base, CheckpointKind::kFull)), FormatError);
  EXPECT_THROW(model_from_checkpoint(c, base.config.grid), FormatError);
}

TEST(Checkpoint, DeltaWithForeignNameSetIsRejected) {
  const Model base = random_model("none", 9);
  Model adapted = with_method(base, parse_method("copeft"), 10);
  FreezeMask mask = build_freeze_mask(adapted.params, adapted.method);
  mask.erase("prompt.scale");
  EXPECT_THROW(apply_delta(base, make_checkpoint(adapted, CheckpointKind::kDelta, mask)), FormatError);
  mask.insert("prompt.scale");
  mask.insert("encoder.conv1.bias");
  EXPECT_THROW(apply_delta(base, make_checkpoint(adapted, CheckpointKind::kDelta, mask)), FormatError);
}

TEST(Checkpoint, LoadTensorsErrors) {
  const Model m = random_model("none", 11);
  ParamRegistry reg = m.params;
  Checkpoint unknown;
  unknown.kind = CheckpointKind::kDelta;
  unknown.tensors.emplace_back("bogus.weight", Tensor({2}));
  EXPECT_THROW(load_tensors(unknown, reg), FormatError);
  Checkpoint shape;
  shape.kind = CheckpointKind::kDelta;
  shape.tensors.emplace_back("decoder.cls.bias", Tensor({2}));
  EXPECT_THROW(load_tensors(shape, reg), ShapeError);
  Checkpoint partial = make_checkpoint(m, CheckpointKind::kFull);
  partial.tensors.pop_back();
  EXPECT_THROW(load_tensors(partial, reg), FormatError);
  // nothing was written by the failing loads
  for (const auto& e : m.params.entries()) EXPECT_TRUE(reg.value(e.name).bitwise_equal(e.value));
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const Model m = random_model("copeft", 12);
  const fs::path p = temp_path("corrupt.cpft");
  save_model(p, m);
  const std::string good = slurp(p);

  std::string bad = good;
  bad[0] = 'X';
  spit(p, bad);
  EXPECT_THROW(read_checkpoint(p), FormatError);
  bad = good;
  bad[4] = 2;
  spit(p, bad);
  EXPECT_THROW(read_checkpoint(p), FormatError);
  bad = good;
  bad[8] = 7;
  spit(p, bad);
  EXPECT_THROW(read_checkpoint(p), FormatError);
  spit(p, good.substr(0, good.size() - 3));
  EXPECT_THROW(read_checkpoint(p), FormatError);
  spit(p, good.substr(0, 30));
  EXPECT_THROW(read_checkpoint(p), FormatError);
  spit(p, good + "x");
  EXPECT_THROW(read_checkpoint(p), FormatError);
  bad = good;
  bad[20] ^= 1;  // hash byte
  spit(p, bad);
  EXPECT_THROW(load_model(p, m.config.grid), FormatError);
  fs::remove(p);
  EXPECT_THROW(read_checkpoint(p), IoError);
}

TEST(Checkpoint, MetaEncodingsRoundTrip) {
  ModelConfig c = small_config();
  c.encoder_strides = {1, 2, 2};
  c.fusion_residual = false;
  EXPECT_EQ(decode_arch(encode_arch(c)).hash(), c.hash());
  for (const char* text : {"none", "scratch", "decoder_only", "ssf", "adapter", "copeft", "copeft_s", "copeft_d",
                           "copeft:-prompt,-conv,-colf", "copeft:-scog,+sigmoid", "copeft:-inst,-pcolf"}) {
    EXPECT_EQ(method_label(decode_method(encode_method(parse_method(text)))), text);
  }
  EXPECT_THROW(decode_arch(Tensor({3})), FormatError);
  EXPECT_THROW(decode_method(Tensor({2}, 0.5)), FormatError);
}
