#include "copeft/peft.hpp"

#include <algorithm>
#include <cmath>

namespace copeft {

VariantPlan variant_plan(Variant variant) {
  VariantPlan p;
  switch (variant) {
    case Variant::kStandard:
      break;
    case Variant::kShallow:
      p.post_fusion = false;
      break;
    case Variant::kDeep:
      p.per_fusion_layer = true;
      break;
    default:
      throw ConfigError("unknown variant");
  }
  return p;
}

std::string method_name(Method m) {
  switch (m) {
    case Method::kNone: return "none";
    case Method::kScratch: return "scratch";
    case Method::kDecoderOnly: return "decoder_only";
    case Method::kSsf: return "ssf";
    case Method::kAdapter: return "adapter";
    case Method::kCopeft: return "copeft";
  }
  throw ConfigError("unknown method");
}

MethodConfig parse_method(std::string_view text) {
  const auto colon = text.find(':');
  const std::string_view base = text.substr(0, colon);
  MethodConfig m;
  if (base == "none") {
    m.method = Method::kNone;
  } else if (base == "scratch") {
    m.method = Method::kScratch;
  } else if (base == "decoder_only") {
    m.method = Method::kDecoderOnly;
  } else if (base == "ssf") {
    m.method = Method::kSsf;
  } else if (base == "adapter") {
    m.method = Method::kAdapter;
    m.plan.prompt_enabled = false;
    m.plan.adapter = AdapterFlags{false, false, false, false};
  } else if (base == "copeft") {
    m.method = Method::kCopeft;
    m.plan = variant_plan(Variant::kStandard);
  } else if (base == "copeft_s") {
    m.method = Method::kCopeft;
    m.plan = variant_plan(Variant::kShallow);
  } else if (base == "copeft_d") {
    m.method = Method::kCopeft;
    m.plan = variant_plan(Variant::kDeep);
  } else {
    throw ConfigError("unknown method '" + std::string(text) + "'");
  }
  if (colon == std::string_view::npos) return m;
  if (m.method != Method::kCopeft) {
    throw ConfigError("method '" + std::string(base) + "' takes no modifiers");
  }
  std::string_view rest = text.substr(colon + 1);
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const std::string_view mod = rest.substr(0, comma);
    if (mod == "-adapter") {
      m.plan.pre_fusion = m.plan.post_fusion = m.plan.per_fusion_layer = false;
    } else if (mod == "-prompt") {
      m.plan.prompt_enabled = false;
    } else if (mod == "-conv") {
      m.plan.adapter.conv_branch = false;
    } else if (mod == "-colf") {
      m.plan.adapter.collaborative_filter = false;
    } else if (mod == "-scog") {
      m.plan.adapter.score_generator = false;
    } else if (mod == "+sigmoid") {
      m.plan.adapter.score_sigmoid = true;
    } else if (mod == "-inst") {
      m.plan.prompt.instance_aware = false;
    } else if (mod == "-pcolf") {
      m.plan.prompt.collaborative_filter = false;
    } else {
      throw ConfigError("unknown method modifier '" + std::string(mod) + "' in '" + std::string(text) + "'");
    }
    if (comma == std::string_view::npos) break;
    rest = rest.substr(comma + 1);
  }
  if (!m.plan.pre_fusion && !m.plan.post_fusion && !m.plan.per_fusion_layer && !m.plan.prompt_enabled) {
    throw ConfigError("method '" + std::string(text) + "' disables both adapters and prompt");
  }
  return m;
}

std::string method_label(const MethodConfig& m) {
  if (m.method != Method::kCopeft) return method_name(m.method);
  const VariantPlan& p = m.plan;
  std::string label = "copeft";
  std::vector<std::string> mods;
  if (p.pre_fusion && !p.post_fusion && !p.per_fusion_layer) {
    label = "copeft_s";
  } else if (p.pre_fusion && p.post_fusion && p.per_fusion_layer) {
    label = "copeft_d";
  } else if (!p.pre_fusion && !p.post_fusion && !p.per_fusion_layer) {
    mods.push_back("-adapter");
  } else if (!(p.pre_fusion && p.post_fusion)) {
    throw ConfigError("variant plan has no textual form");
  }
  if (!p.prompt_enabled) mods.push_back("-prompt");
  if (!p.adapter.conv_branch) mods.push_back("-conv");
  if (!p.adapter.collaborative_filter) mods.push_back("-colf");
  if (!p.adapter.score_generator) mods.push_back("-scog");
  if (p.adapter.score_sigmoid) mods.push_back("+sigmoid");
  if (!p.prompt.instance_aware) mods.push_back("-inst");
  if (!p.prompt.collaborative_filter) mods.push_back("-pcolf");
  for (std::size_t i = 0; i < mods.size(); ++i) label += (i ? "," : ":") + mods[i];
  return label;
}

// ---------------------------------------------------------------------------

namespace {

int bottleneck_kernel(const AdapterFlags& f) { return f.conv_branch ? 3 : 1; }

bool wants(const ParamRegistry& reg, const std::string& name) {
  return reg.contains(name) && reg.trainable(name);
}

// Elementwise product of row-major stacks where `s` may have one row that is
// broadcast over all rows of `u`.
Tensor broadcast_mul(const Tensor& s, const Tensor& u) {
  Tensor out(u.shape());
  const std::size_t per = u.numel() / u.dim(0);
  const bool shared = s.dim(0) == 1;
  for (std::size_t n = 0; n < u.dim(0); ++n) {
    const double* sp = s.ptr() + (shared ? 0 : n * per);
    const double* up = u.ptr() + n * per;
    double* op = out.ptr() + n * per;
    for (std::size_t i = 0; i < per; ++i) op[i] = sp[i] * up[i];
  }
  return out;
}

Tensor as_row(const Tensor& t) {
  Shape s{1};
  s.insert(s.end(), t.shape().begin(), t.shape().end());
  return t.reshaped(std::move(s));
}

}  // namespace

AdapterFlags effective_flags(const AdapterFlags& flags) {
  if (flags.conv_branch) return flags;
  return AdapterFlags{false, false, false, false};
}

AdapterWeights adapter_weights(const ParamRegistry& reg, const std::string& prefix,
                               const AdapterFlags& flags_in) {
  const AdapterFlags flags = effective_flags(flags_in);
  AdapterWeights w;
  w.w_down = &reg.value(prefix + ".down.weight");
  w.b_down = &reg.value(prefix + ".down.bias");
  w.w_up = &reg.value(prefix + ".up.weight");
  w.b_up = &reg.value(prefix + ".up.bias");
  if (flags.score_generator) {
    w.w_score = &reg.value(prefix + ".score.weight");
    w.b_score = &reg.value(prefix + ".score.bias");
  }
  return w;
}

namespace {

// Computes the modulation score, filling the pooling part of `cache`.
Tensor score_forward(const Tensor& f, const AdapterWeights& w, const AdapterFlags& flags,
                     AdapterCache& cache) {
  const std::size_t n = f.dim(0);
  Tensor s;
  if (flags.collaborative_filter) {
    cache.pooled = agent_max_pool(f, &cache.argmax);
    if (flags.score_generator) {
      s = as_row(channel_linear(cache.pooled.row(0), *w.w_score, *w.b_score));
    } else {
      s = cache.pooled;
    }
  } else if (flags.score_generator) {
    std::vector<Tensor> rows;
    rows.reserve(n);
    for (std::size_t a = 0; a < n; ++a) rows.push_back(channel_linear(f.row(a), *w.w_score, *w.b_score));
    s = stack_rows(rows);
  } else {
    return Tensor();
  }
  if (flags.score_sigmoid) s = sigmoid(s);
  return s;
}

}  // namespace

Tensor modulation_score(const Tensor& features, const AdapterWeights& w, const AdapterFlags& flags) {
  AdapterCache scratch;
  return score_forward(features, w, effective_flags(flags), scratch);
}

Tensor collaboration_adapter(const Tensor& features, const AdapterWeights& w, const AdapterFlags& flags,
                             AdapterCache* cache) {
  if (features.rank() != 4) {
    throw ShapeError("collaboration_adapter: input must be [N,C,H,W], got " + shape_str(features.shape()));
  }
  const std::size_t n = features.dim(0), c = features.dim(1);
  const std::size_t cr = w.w_down->dim(0);
  if (cr == 0 || c % cr != 0) {
    throw ConfigError("collaboration_adapter: bottleneck width " + std::to_string(cr) +
                      " does not divide channels " + std::to_string(c));
  }
  const int k = static_cast<int>(w.w_down->dim(2));
  const int pad = k / 2;
  AdapterCache local;
  AdapterCache& cc = cache ? *cache : local;
  cc.input = features;
  cc.down.clear();
  cc.hidden.clear();
  std::vector<Tensor> ups;
  ups.reserve(n);
  for (std::size_t a = 0; a < n; ++a) {
    Tensor x = features.row(a);
    Tensor d = conv2d(x, *w.w_down, *w.b_down, 1, pad);
    Tensor h = relu(d);
    ups.push_back(conv2d(h, *w.w_up, *w.b_up, 1, pad));
    cc.down.push_back(std::move(d));
    cc.hidden.push_back(std::move(h));
  }
  cc.up = stack_rows(ups);
  cc.score = score_forward(features, w, effective_flags(flags), cc);
  Tensor out = features;
  if (cc.score.empty()) {
    out += cc.up;
  } else {
    out += broadcast_mul(cc.score, cc.up);
  }
  return out;
}

Tensor collaboration_adapter_backward(const AdapterCache& cache, const AdapterWeights& w,
                                      const AdapterFlags& flags_in, const Tensor& dout,
                                      const std::string& prefix, const ParamRegistry& reg,
                                      GradMap& grads, bool need_input) {
  const AdapterFlags flags = effective_flags(flags_in);
  const Tensor& f = cache.input;
  expect_shape(dout, f.shape(), "collaboration_adapter_backward dout");
  const std::size_t n = f.dim(0);
  const std::size_t per = f.numel() / n;
  const int pad = static_cast<int>(w.w_down->dim(2)) / 2;
  Tensor df;
  if (need_input) df = dout;

  // dU and dS from out = F + S * U.
  Tensor du = cache.score.empty() ? dout : broadcast_mul(cache.score, dout);
  const bool need_score =
      !cache.score.empty() &&
      (need_input || (flags.score_generator &&
                      (wants(reg, prefix + ".score.weight") || wants(reg, prefix + ".score.bias"))));
  if (need_score) {
    Tensor ds(cache.score.shape());
    const bool shared = cache.score.dim(0) == 1;
    for (std::size_t a = 0; a < n; ++a) {
      const double* dp = dout.ptr() + a * per;
      const double* up = cache.up.ptr() + a * per;
      double* sp = ds.ptr() + (shared ? 0 : a * per);
      for (std::size_t i = 0; i < per; ++i) sp[i] += dp[i] * up[i];
    }
    if (flags.score_sigmoid) {
      for (std::size_t i = 0; i < ds.numel(); ++i) ds[i] *= cache.score[i] * (1.0 - cache.score[i]);
    }
    if (flags.collaborative_filter) {
      Tensor dpooled;
      if (flags.score_generator) {
        const bool want_w = wants(reg, prefix + ".score.weight") || wants(reg, prefix + ".score.bias");
        LinearGrads lg = channel_linear_backward(cache.pooled.row(0), *w.w_score, ds.row(0), need_input, want_w);
        if (wants(reg, prefix + ".score.weight")) grads.accumulate(prefix + ".score.weight", lg.dw);
        if (wants(reg, prefix + ".score.bias")) grads.accumulate(prefix + ".score.bias", lg.db);
        if (need_input) dpooled = as_row(lg.dx);
      } else {
        dpooled = ds;
      }
      if (need_input) df += agent_max_pool_backward(cache.argmax, n, dpooled);
    } else {
      const bool want_w = wants(reg, prefix + ".score.weight") || wants(reg, prefix + ".score.bias");
      Tensor dws, dbs;
      for (std::size_t a = 0; a < n; ++a) {
        LinearGrads lg = channel_linear_backward(f.row(a), *w.w_score, ds.row(a), need_input, want_w);
        if (want_w) {
          if (a == 0) {
            dws = lg.dw;
            dbs = lg.db;
          } else {
            dws += lg.dw;
            dbs += lg.db;
          }
        }
        if (need_input) {
          double* dp = df.ptr() + a * per;
          for (std::size_t i = 0; i < per; ++i) dp[i] += lg.dx[i];
        }
      }
      if (wants(reg, prefix + ".score.weight")) grads.accumulate(prefix + ".score.weight", dws);
      if (wants(reg, prefix + ".score.bias")) grads.accumulate(prefix + ".score.bias", dbs);
    }
  }

  const bool want_up = wants(reg, prefix + ".up.weight") || wants(reg, prefix + ".up.bias");
  const bool want_down = wants(reg, prefix + ".down.weight") || wants(reg, prefix + ".down.bias");
  if (want_up || want_down || need_input) {
    Tensor dwu, dbu, dwd, dbd;
    for (std::size_t a = 0; a < n; ++a) {
      Conv2dGrads gu = conv2d_backward(cache.hidden[a], *w.w_up, 1, pad, du.row(a), want_down || need_input, want_up);
      if (want_up) {
        if (a == 0) {
          dwu = std::move(gu.dw);
          dbu = std::move(gu.db);
        } else {
          dwu += gu.dw;
          dbu += gu.db;
        }
      }
      if (!(want_down || need_input)) continue;
      Tensor dd = relu_backward(cache.down[a], gu.dx);
      Conv2dGrads gd = conv2d_backward(f.row(a), *w.w_down, 1, pad, dd, need_input, want_down);
      if (want_down) {
        if (a == 0) {
          dwd = std::move(gd.dw);
          dbd = std::move(gd.db);
        } else {
          dwd += gd.dw;
          dbd += gd.db;
        }
      }
      if (need_input) {
        double* dp = df.ptr() + a * per;
        for (std::size_t i = 0; i < per; ++i) dp[i] += gd.dx[i];
      }
    }
    if (wants(reg, prefix + ".up.weight")) grads.accumulate(prefix + ".up.weight", dwu);
    if (wants(reg, prefix + ".up.bias")) grads.accumulate(prefix + ".up.bias", dbu);
    if (wants(reg, prefix + ".down.weight")) grads.accumulate(prefix + ".down.weight", dwd);
    if (wants(reg, prefix + ".down.bias")) grads.accumulate(prefix + ".down.bias", dbd);
  }
  return df;
}

// ---------------------------------------------------------------------------

PromptWeights prompt_weights(const ParamRegistry& reg, const PromptFlags& flags) {
  PromptWeights w;
  w.scale = &reg.value("prompt.scale");
  w.shift = &reg.value("prompt.shift");
  w.w_lin = &reg.value("prompt.linear.weight");
  w.b_lin = &reg.value("prompt.linear.bias");
  if (!flags.instance_aware) w.free = &reg.value("prompt.free");
  return w;
}

Tensor agent_prompt(const Tensor& adapted, const PromptWeights& w, const PromptFlags& flags,
                    PromptCache* cache) {
  PromptCache local;
  PromptCache& cc = cache ? *cache : local;
  cc.source = flags.instance_aware ? adapted : *w.free;
  if (cc.source.rank() != 4) {
    throw ShapeError("agent_prompt: input must be [N,C,H,W], got " + shape_str(cc.source.shape()));
  }
  cc.env = scale_shift(cc.source, *w.scale, *w.shift);
  if (flags.collaborative_filter) {
    cc.pooled = agent_max_pool(cc.env, &cc.argmax);
  } else {
    cc.pooled = as_row(cc.env.row(0));
  }
  return as_row(channel_linear(cc.pooled.row(0), *w.w_lin, *w.b_lin));
}

Tensor agent_prompt_backward(const PromptCache& cache, const PromptWeights& w, const PromptFlags& flags,
                             const Tensor& dprompt, const ParamRegistry& reg, GradMap& grads,
                             bool need_input) {
  const bool want_lin = wants(reg, "prompt.linear.weight") || wants(reg, "prompt.linear.bias");
  const bool want_ss = wants(reg, "prompt.scale") || wants(reg, "prompt.shift");
  const bool want_free = !flags.instance_aware && wants(reg, "prompt.free");
  const bool input_path = need_input && flags.instance_aware;
  const bool need_dpooled = want_ss || want_free || input_path;
  LinearGrads lg = channel_linear_backward(cache.pooled.row(0), *w.w_lin, dprompt.row(0), need_dpooled, want_lin);
  if (wants(reg, "prompt.linear.weight")) grads.accumulate("prompt.linear.weight", lg.dw);
  if (wants(reg, "prompt.linear.bias")) grads.accumulate("prompt.linear.bias", lg.db);
  if (!need_dpooled) return Tensor();
  const std::size_t n = cache.env.dim(0);
  Tensor denv;
  if (flags.collaborative_filter) {
    denv = agent_max_pool_backward(cache.argmax, n, as_row(lg.dx));
  } else {
    denv = Tensor(cache.env.shape());
    denv.set_row(0, lg.dx);
  }
  ScaleShiftGrads sg = scale_shift_backward(cache.source, *w.scale, denv);
  if (wants(reg, "prompt.scale")) grads.accumulate("prompt.scale", sg.dscale);
  if (wants(reg, "prompt.shift")) grads.accumulate("prompt.shift", sg.dshift);
  if (want_free) grads.accumulate("prompt.free", sg.dx);
  return input_path ? sg.dx : Tensor();
}

// ---------------------------------------------------------------------------

namespace {

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

void add_adapter(ParamRegistry& reg, const std::string& prefix, std::size_t c, std::size_t r,
                 const AdapterFlags& flags_in, std::mt19937_64& rng) {
  const AdapterFlags flags = effective_flags(flags_in);
  const std::size_t cr = c / r;
  const auto k = static_cast<std::size_t>(bottleneck_kernel(flags));
  const double fan_in = static_cast<double>(c * k * k);
  reg.add(prefix + ".down.weight", uniform({cr, c, k, k}, std::sqrt(6.0 / fan_in), rng));
  reg.add(prefix + ".down.bias", Tensor({cr}));
  reg.add(prefix + ".up.weight", Tensor({c, cr, k, k}));
  reg.add(prefix + ".up.bias", Tensor({c}));
  if (flags.score_generator) {
    // Starts as the all-ones score so the adapter initially behaves as a
    // plain bottleneck and learns its modulation from there.
    reg.add(prefix + ".score.weight", Tensor({c, c}));
    reg.add(prefix + ".score.bias", Tensor({c}, 1.0));
  }
}

}  // namespace

std::vector<std::string> adapter_prefixes(const ModelConfig& cfg, const MethodConfig& method) {
  std::vector<std::string> out;
  if (!method.uses_adapters()) return out;
  const VariantPlan& p = method.plan;
  if (p.pre_fusion) out.push_back("adapter1");
  if (p.per_fusion_layer) {
    for (std::size_t l = 0; l < cfg.fusion_layers; ++l) out.push_back("adapter_fus" + std::to_string(l));
  }
  if (p.post_fusion) out.push_back("adapter2");
  return out;
}

void add_method_params(ParamRegistry& reg, const ModelConfig& cfg, const MethodConfig& method,
                       std::mt19937_64& rng) {
  const std::size_t c = cfg.feature_channels;
  if (method.uses_ssf()) {
    for (const char* p : {"ssf1", "ssf2"}) {
      reg.add(std::string(p) + ".scale", Tensor({c}, 1.0));
      reg.add(std::string(p) + ".shift", Tensor({c}));
    }
  }
  for (const auto& prefix : adapter_prefixes(cfg, method)) {
    add_adapter(reg, prefix, c, cfg.bottleneck_rate, method.plan.adapter, rng);
  }
  if (method.uses_prompt()) {
    reg.add("prompt.scale", Tensor({c}, 1.0));
    reg.add("prompt.shift", Tensor({c}));
    reg.add("prompt.linear.weight", uniform({c, c}, 0.01, rng));
    reg.add("prompt.linear.bias", Tensor({c}));
    if (!method.plan.prompt.instance_aware) {
      reg.add("prompt.free", uniform({1, c, cfg.feature_rows(), cfg.feature_cols()}, 0.1, rng));
    }
  }
}

FreezeMask build_freeze_mask(const ParamRegistry& reg, const MethodConfig& method) {
  std::vector<std::string> prefixes;
  switch (method.method) {
    case Method::kNone:
      return {};
    case Method::kScratch: {
      const auto names = reg.names();
      return FreezeMask(names.begin(), names.end());
    }
    case Method::kDecoderOnly:
      prefixes = {"decoder."};
      break;
    case Method::kSsf:
      prefixes = {"decoder.", "ssf1.", "ssf2."};
      break;
    case Method::kAdapter:
    case Method::kCopeft:
      prefixes = {"decoder."};
      break;
    default:
      throw ConfigError("build_freeze_mask: unknown method");
  }
  if (method.uses_adapters()) {
    const VariantPlan& p = method.plan;
    if (p.pre_fusion) prefixes.push_back("adapter1.");
    if (p.post_fusion) prefixes.push_back("adapter2.");
    if (p.per_fusion_layer) prefixes.push_back("adapter_fus");
  }
  if (method.uses_prompt()) prefixes.push_back("prompt.");

  FreezeMask mask;
  std::set<std::string> seen;
  for (const auto& name : reg.names()) {
    for (const auto& p : prefixes) {
      if (name.rfind(p, 0) == 0) {
        mask.insert(name);
        seen.insert(p);
        break;
      }
    }
  }
  for (const auto& p : prefixes) {
    if (!seen.count(p)) {
      throw Error(ErrorCode::kMissingParameter, "build_freeze_mask: registry has no parameters for '" + p +
                                                    "' required by method " + method_label(method));
    }
  }
  return mask;
}

void apply_freeze_mask(ParamRegistry& reg, const FreezeMask& mask) {
  for (const auto& name : mask) {
    if (!reg.contains(name)) {
      throw Error(ErrorCode::kMissingParameter, "freeze mask names unknown parameter '" + name + "'");
    }
  }
  for (auto& e : reg.entries()) e.trainable = mask.count(e.name) != 0;
}

ParamCount count_params(const ParamRegistry& reg, const FreezeMask& mask) {
  ParamCount pc;
  for (const auto& e : reg.entries()) pc.total += e.value.numel();
  for (const auto& name : mask) pc.trainable += reg.value(name).numel();
  pc.ratio = pc.total ? static_cast<double>(pc.trainable) / static_cast<double>(pc.total) : 0.0;
  return pc;
}

}  // namespace copeft
