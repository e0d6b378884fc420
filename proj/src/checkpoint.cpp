#include "copeft/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "copeft/error.hpp"

namespace copeft {

namespace {

constexpr char kMagic[4] = {'C', 'P', 'F', 'T'};

bool is_meta(const std::string& name) { return name.rfind("meta.", 0) == 0; }

void put_u8(std::string& b, std::uint8_t v) { b.push_back(static_cast<char>(v)); }
void put_u16(std::string& b, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& b, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  const unsigned char* take(std::size_t n, const char* what) {
    if (buf.size() - pos < n) throw FormatError(std::string("checkpoint truncated while reading ") + what);
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    pos += n;
    return p;
  }
  std::uint64_t uint(std::size_t n, const char* what) {
    const unsigned char* p = take(n, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  double f64() {
    const std::uint64_t u = uint(8, "tensor data");
    double v;
    std::memcpy(&v, &u, 8);
    return v;
  }
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string b(kMagic, 4);
  put_u32(b, kCheckpointVersion);
  put_u32(b, static_cast<std::uint32_t>(ckpt.kind));
  b.append(reinterpret_cast<const char*>(ckpt.config_hash.data()), 32);
  put_u32(b, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.empty() || name.size() > 0xffff) throw Error(ErrorCode::kInvalidArgument, "bad tensor name length");
    if (t.rank() > 0xff) throw Error(ErrorCode::kInvalidArgument, "tensor rank too large: " + name);
    put_u16(b, static_cast<std::uint16_t>(name.size()));
    b += name;
    put_u8(b, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) {
      if (d > 0xffffffffu) throw Error(ErrorCode::kInvalidArgument, "tensor dimension too large: " + name);
      put_u32(b, static_cast<std::uint32_t>(d));
    }
    for (std::size_t i = 0; i < t.numel(); ++i) put_f64(b, t[i]);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!out) throw IoError("write failed for checkpoint '" + path.string() + "'");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r{buf};
  if (std::memcmp(r.take(4, "magic"), kMagic, 4) != 0) throw FormatError("bad magic: not a CPFT checkpoint");
  const auto version = r.uint(4, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  const auto kind = r.uint(4, "kind");
  if (kind > 1) throw FormatError("unknown checkpoint kind " + std::to_string(kind));
  c.kind = static_cast<CheckpointKind>(kind);
  std::memcpy(c.config_hash.data(), r.take(32, "config hash"), 32);
  const auto count = r.uint(4, "tensor count");
  std::set<std::string> seen;
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto len = r.uint(2, "name length");
    const unsigned char* np = r.take(len, "name");
    std::string name(reinterpret_cast<const char*>(np), len);
    if (name.empty() || !seen.insert(name).second) throw FormatError("empty or duplicate tensor name '" + name + "'");
    const auto rank = r.uint(1, "rank");
    if (rank == 0) throw FormatError("tensor '" + name + "' has rank 0");
    Shape shape;
    for (std::uint64_t d = 0; d < rank; ++d) shape.push_back(r.uint(4, "dims"));
    const std::size_t available = (buf.size() - r.pos) / 8;
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw FormatError("tensor '" + name + "' has a zero dimension");
      if (d > available / n) throw FormatError("checkpoint truncated in tensor '" + name + "'");
      n *= d;
    }
    std::vector<double> data(n);
    for (auto& v : data) v = r.f64();
    c.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.pos != buf.size()) throw FormatError("trailing bytes after last tensor");
  return c;
}

Tensor encode_arch(const ModelConfig& c) {
  return Tensor({10}, {static_cast<double>(c.in_channels), static_cast<double>(c.hidden_channels),
                       static_cast<double>(c.feature_channels), static_cast<double>(c.encoder_strides[0]),
                       static_cast<double>(c.encoder_strides[1]), static_cast<double>(c.encoder_strides[2]),
                       static_cast<double>(c.fusion_layers), static_cast<double>(c.attn_dim),
                       static_cast<double>(c.bottleneck_rate), c.fusion_residual ? 1.0 : 0.0});
}

ModelConfig decode_arch(const Tensor& t) {
  if (t.shape() != Shape{10}) throw FormatError("meta.arch must hold 10 values");
  for (double v : t.data()) {
    if (!(v >= 0.0) || v != std::floor(v) || v > 1e9) throw FormatError("meta.arch holds a non-integer value");
  }
  auto sz = [&](std::size_t i) { return static_cast<std::size_t>(t[i]); };
  ModelConfig c;
  c.in_channels = sz(0);
  c.hidden_channels = sz(1);
  c.feature_channels = sz(2);
  c.encoder_strides = {static_cast<int>(t[3]), static_cast<int>(t[4]), static_cast<int>(t[5])};
  c.fusion_layers = sz(6);
  c.attn_dim = sz(7);
  c.bottleneck_rate = sz(8);
  c.fusion_residual = t[9] != 0.0;
  return c;
}

Tensor encode_method(const MethodConfig& m) {
  const std::string label = method_label(m);
  Tensor t({label.size()});
  for (std::size_t i = 0; i < label.size(); ++i) t[i] = static_cast<unsigned char>(label[i]);
  return t;
}

MethodConfig decode_method(const Tensor& t) {
  if (t.rank() != 1) throw FormatError("meta.method must be a vector");
  std::string label;
  for (double v : t.data()) {
    if (!(v >= 32.0 && v < 127.0) || v != std::floor(v)) throw FormatError("meta.method holds a non-ASCII code");
    label.push_back(static_cast<char>(v));
  }
  try {
    return parse_method(label);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("meta.method: ") + e.what());
  }
}

Checkpoint make_checkpoint(const Model& model, CheckpointKind kind, const FreezeMask& mask) {
  Checkpoint c;
  c.kind = kind;
  c.config_hash = model.config.hash();
  c.tensors.emplace_back(kMetaArch, encode_arch(model.config));
  c.tensors.emplace_back(kMetaMethod, encode_method(model.method));
  if (kind == CheckpointKind::kDelta) {
    if (mask.empty()) throw Error(ErrorCode::kInvalidArgument, "delta checkpoint needs a non-empty freeze mask");
    for (const auto& name : mask) {
      if (!model.params.contains(name)) throw Error(ErrorCode::kMissingParameter, "mask names unknown tensor " + name);
    }
  }
  for (const auto& e : model.params.entries()) {
    if (kind == CheckpointKind::kFull || mask.count(e.name)) c.tensors.emplace_back(e.name, e.value);
  }
  return c;
}

namespace {

const Tensor& meta(const Checkpoint& c, const char* name) {
  for (const auto& [n, t] : c.tensors) {
    if (n == name) return t;
  }
  throw FormatError(std::string("checkpoint lacks ") + name);
}

}  // namespace

void load_tensors(const Checkpoint& ckpt, ParamRegistry& reg) {
  std::set<std::string> stored;
  for (const auto& [name, t] : ckpt.tensors) {
    if (is_meta(name)) continue;
    if (!reg.contains(name)) throw FormatError("checkpoint tensor '" + name + "' is unknown to the model");
    const Tensor& cur = reg.value(name);
    if (cur.shape() != t.shape()) {
      throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                       shape_str(cur.shape()));
    }
    stored.insert(name);
  }
  if (ckpt.kind == CheckpointKind::kFull) {
    for (const auto& n : reg.names()) {
      if (!stored.count(n)) throw FormatError("full checkpoint is missing tensor '" + n + "'");
    }
  }
  for (const auto& [name, t] : ckpt.tensors) {
    if (!is_meta(name)) reg.value(name) = t;
  }
}

Model model_from_checkpoint(const Checkpoint& ckpt, const GridGeometry& grid) {
  if (ckpt.kind != CheckpointKind::kFull) throw FormatError("expected a full checkpoint, got a delta");
  ModelConfig cfg = decode_arch(meta(ckpt, kMetaArch));
  cfg.grid = grid;
  cfg.validate();
  if (cfg.hash() != ckpt.config_hash) throw FormatError("checkpoint config hash does not match its architecture");
  Model m = make_model(cfg, decode_method(meta(ckpt, kMetaMethod)), 0);
  load_tensors(ckpt, m.params);
  return m;
}

Model apply_delta(const Model& base, const Checkpoint& delta) {
  if (delta.kind != CheckpointKind::kDelta) throw FormatError("expected a delta checkpoint, got a full one");
  if (delta.config_hash != base.config.hash()) {
    throw ConfigError("delta config hash " + hex(delta.config_hash) + " does not match base " +
                      hex(base.config.hash()));
  }
  const MethodConfig method = decode_method(meta(delta, kMetaMethod));
  Model m = with_method(base, method, 0);
  const FreezeMask mask = build_freeze_mask(m.params, method);
  FreezeMask stored;
  for (const auto& [name, t] : delta.tensors) {
    if (!is_meta(name)) stored.insert(name);
  }
  if (stored != mask) throw FormatError("delta tensors do not match the freeze mask of " + method_label(method));
  load_tensors(delta, m.params);
  apply_freeze_mask(m.params, mask);
  return m;
}

void save_model(const std::filesystem::path& path, const Model& model) {
  write_checkpoint(path, make_checkpoint(model, CheckpointKind::kFull));
}

void save_delta(const std::filesystem::path& path, const Model& model, const FreezeMask& mask) {
  write_checkpoint(path, make_checkpoint(model, CheckpointKind::kDelta, mask));
}

Model load_model(const std::filesystem::path& path, const GridGeometry& grid) {
  return model_from_checkpoint(read_checkpoint(path), grid);
}

Model load_delta(const Model& base, const std::filesystem::path& path) {
  return apply_delta(base, read_checkpoint(path));
}

}  // namespace copeft
