#include "copeft/pipeline.hpp"

#include <algorithm>
#include <cmath>

namespace copeft {

namespace {

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

std::string layer_prefix(std::size_t l) { return "fusion.layer" + std::to_string(l); }

Tensor as_row(const Tensor& t) {
  Shape s{1};
  s.insert(s.end(), t.shape().begin(), t.shape().end());
  return t.reshaped(std::move(s));
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  Shape s = t.shape();
  s[0] = end - begin;
  const std::size_t per = t.numel() / t.dim(0);
  std::vector<double> d(t.data().begin() + static_cast<std::ptrdiff_t>(begin * per),
                        t.data().begin() + static_cast<std::ptrdiff_t>(end * per));
  return Tensor(std::move(s), std::move(d));
}

bool any_trainable(const ParamRegistry& reg, std::string_view prefix) {
  for (const auto& e : reg.entries()) {
    if (e.trainable && e.name.rfind(prefix, 0) == 0) return true;
  }
  return false;
}

void accumulate_if(const ParamRegistry& reg, GradMap& grads, const std::string& name, const Tensor& g) {
  if (reg.trainable(name)) grads.accumulate(name, g);
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid1(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

void init_base_params(ParamRegistry& reg, const ModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t cin = cfg.in_channels, hid = cfg.hidden_channels, c = cfg.feature_channels;
  const std::size_t a = cfg.attn_dim;
  auto he = [](std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); };
  reg.add("encoder.conv1.weight", uniform({hid, cin, 3, 3}, he(cin * 9), rng));
  reg.add("encoder.conv1.bias", Tensor({hid}));
  reg.add("encoder.conv2.weight", uniform({hid, hid, 3, 3}, he(hid * 9), rng));
  reg.add("encoder.conv2.bias", Tensor({hid}));
  reg.add("encoder.conv3.weight", uniform({c, hid, 3, 3}, he(hid * 9), rng));
  reg.add("encoder.conv3.bias", Tensor({c}));
  const double lin = 1.0 / std::sqrt(static_cast<double>(c));
  for (std::size_t l = 0; l < cfg.fusion_layers; ++l) {
    const std::string p = layer_prefix(l);
    reg.add(p + ".query.weight", uniform({a, c}, lin, rng));
    reg.add(p + ".query.bias", Tensor({a}));
    reg.add(p + ".key.weight", uniform({a, c}, lin, rng));
    reg.add(p + ".key.bias", Tensor({a}));
    reg.add(p + ".value.weight", uniform({c, c}, lin, rng));
    reg.add(p + ".value.bias", Tensor({c}));
  }
  reg.add("decoder.cls.weight", uniform({1, c}, lin, rng));
  reg.add("decoder.cls.bias", Tensor({1}, -2.0));
  reg.add("decoder.reg.weight", uniform({4, c}, 0.1 * lin, rng));
  reg.add("decoder.reg.bias", Tensor({4}));
}

Model make_model(const ModelConfig& cfg, const MethodConfig& method, std::uint64_t seed) {
  Model m{cfg, method, {}};
  std::mt19937_64 rng(seed);
  init_base_params(m.params, cfg, rng);
  add_method_params(m.params, cfg, method, rng);
  return m;
}

Model with_method(const Model& base, const MethodConfig& method, std::uint64_t seed) {
  Model m{base.config, method, {}};
  for (const auto& e : base.params.entries()) {
    // Only the base architecture carries over; method tensors are re-drawn.
    if (e.name.rfind("encoder.", 0) == 0 || e.name.rfind("fusion.", 0) == 0 ||
        e.name.rfind("decoder.", 0) == 0) {
      m.params.add(e.name, e.value);
    }
  }
  std::mt19937_64 rng(seed);
  add_method_params(m.params, base.config, method, rng);
  return m;
}

// ---------------------------------------------------------------------------

Tensor encode(const Tensor& obs, const ParamRegistry& reg, const ModelConfig& cfg, EncoderCache* cache) {
  expect_shape(obs, {cfg.in_channels, cfg.grid.rows, cfg.grid.cols}, "encode observation");
  const auto& s = cfg.encoder_strides;
  Tensor z1 = conv2d(obs, reg.value("encoder.conv1.weight"), reg.value("encoder.conv1.bias"), s[0], 1);
  Tensor a1 = relu(z1);
  Tensor z2 = conv2d(a1, reg.value("encoder.conv2.weight"), reg.value("encoder.conv2.bias"), s[1], 1);
  Tensor a2 = relu(z2);
  Tensor z3 = conv2d(a2, reg.value("encoder.conv3.weight"), reg.value("encoder.conv3.bias"), s[2], 1);
  Tensor out = relu(z3);
  if (cache) {
    cache->obs = obs;
    cache->z1 = std::move(z1);
    cache->a1 = std::move(a1);
    cache->z2 = std::move(z2);
    cache->a2 = std::move(a2);
    cache->z3 = std::move(z3);
  }
  return out;
}

void encode_backward(const EncoderCache& cache, const ParamRegistry& reg, const ModelConfig& cfg,
                     const Tensor& dfeat, GradMap& grads) {
  const auto& s = cfg.encoder_strides;
  const bool t1 = reg.trainable("encoder.conv1.weight") || reg.trainable("encoder.conv1.bias");
  const bool t2 = reg.trainable("encoder.conv2.weight") || reg.trainable("encoder.conv2.bias");
  const bool t3 = reg.trainable("encoder.conv3.weight") || reg.trainable("encoder.conv3.bias");
  if (!(t1 || t2 || t3)) return;
  Tensor dz3 = relu_backward(cache.z3, dfeat);
  Conv2dGrads g3 = conv2d_backward(cache.a2, reg.value("encoder.conv3.weight"), s[2], 1, dz3, t1 || t2, t3);
  if (t3) {
    accumulate_if(reg, grads, "encoder.conv3.weight", g3.dw);
    accumulate_if(reg, grads, "encoder.conv3.bias", g3.db);
  }
  if (!(t1 || t2)) return;
  Tensor dz2 = relu_backward(cache.z2, g3.dx);
  Conv2dGrads g2 = conv2d_backward(cache.a1, reg.value("encoder.conv2.weight"), s[1], 1, dz2, t1, t2);
  if (t2) {
    accumulate_if(reg, grads, "encoder.conv2.weight", g2.dw);
    accumulate_if(reg, grads, "encoder.conv2.bias", g2.db);
  }
  if (!t1) return;
  Tensor dz1 = relu_backward(cache.z1, g2.dx);
  Conv2dGrads g1 = conv2d_backward(cache.obs, reg.value("encoder.conv1.weight"), s[0], 1, dz1, false, true);
  accumulate_if(reg, grads, "encoder.conv1.weight", g1.dw);
  accumulate_if(reg, grads, "encoder.conv1.bias", g1.db);
}

Tensor encode_agents(std::span<const Tensor> observations, const ParamRegistry& reg, const ModelConfig& cfg,
                     std::vector<EncoderCache>* caches) {
  if (observations.empty()) throw ShapeError("encode_agents: no agents");
  std::vector<Tensor> rows;
  rows.reserve(observations.size());
  if (caches) caches->assign(observations.size(), {});
  for (std::size_t a = 0; a < observations.size(); ++a) {
    rows.push_back(encode(observations[a], reg, cfg, caches ? &(*caches)[a] : nullptr));
  }
  return stack_rows(rows);
}

// ---------------------------------------------------------------------------

Tensor attention_fuse(const Tensor& stack, const ParamRegistry& reg, const ModelConfig& cfg,
                      const FusionHooks& hooks, FusionCache* cache) {
  if (stack.rank() != 4 || stack.dim(0) == 0) {
    throw ShapeError("attention_fuse: stack must be [M,C,H,W] with M >= 1, got " + shape_str(stack.shape()));
  }
  if (cfg.fusion_layers == 0) throw ConfigError("attention_fuse: at least one fusion layer required");
  if (!hooks.layer_adapters.empty() && hooks.layer_adapters.size() != cfg.fusion_layers) {
    throw ConfigError("attention_fuse: " + std::to_string(hooks.layer_adapters.size()) +
                      " layer adapters for " + std::to_string(cfg.fusion_layers) + " layers");
  }
  const std::size_t m = stack.dim(0), c = stack.dim(1), h = stack.dim(2), w = stack.dim(3);
  const std::size_t p = h * w, a = cfg.attn_dim;
  if (c != cfg.feature_channels) {
    throw ShapeError("attention_fuse: stack channels " + std::to_string(c) + " != " +
                     std::to_string(cfg.feature_channels));
  }
  const double inv = 1.0 / std::sqrt(static_cast<double>(a));
  if (cache) cache->layers.assign(cfg.fusion_layers, {});
  Tensor x = stack;
  std::vector<double> scores(m);
  for (std::size_t l = 0; l < cfg.fusion_layers; ++l) {
    const std::string pre = layer_prefix(l);
    std::vector<Tensor> qs, ks, vs;
    for (std::size_t r = 0; r < m; ++r) {
      Tensor xr = x.row(r);
      qs.push_back(channel_linear(xr, reg.value(pre + ".query.weight"), reg.value(pre + ".query.bias")));
      ks.push_back(channel_linear(xr, reg.value(pre + ".key.weight"), reg.value(pre + ".key.bias")));
      vs.push_back(channel_linear(xr, reg.value(pre + ".value.weight"), reg.value(pre + ".value.bias")));
    }
    Tensor q = stack_rows(qs), k = stack_rows(ks), v = stack_rows(vs);
    std::vector<double> attn(m * m * p, 0.0);
    // logits[r, s, cell] = <q_r, k_s> / sqrt(A)
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t s = 0; s < m; ++s) {
        double* out = attn.data() + (r * m + s) * p;
        for (std::size_t d = 0; d < a; ++d) {
          const double* qp = q.ptr() + (r * a + d) * p;
          const double* kp = k.ptr() + (s * a + d) * p;
          for (std::size_t i = 0; i < p; ++i) out[i] += qp[i] * kp[i];
        }
        for (std::size_t i = 0; i < p; ++i) out[i] *= inv;
      }
    }
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t i = 0; i < p; ++i) {
        double mx = -INFINITY;
        for (std::size_t s = 0; s < m; ++s) mx = std::max(mx, attn[(r * m + s) * p + i]);
        double z = 0.0;
        for (std::size_t s = 0; s < m; ++s) {
          scores[s] = std::exp(attn[(r * m + s) * p + i] - mx);
          z += scores[s];
        }
        for (std::size_t s = 0; s < m; ++s) attn[(r * m + s) * p + i] = scores[s] / z;
      }
    }
    Tensor y = cfg.fusion_residual ? x : Tensor(x.shape());
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t s = 0; s < m; ++s) {
        const double* wt = attn.data() + (r * m + s) * p;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double* vp = v.ptr() + (s * c + ch) * p;
          double* yp = y.ptr() + (r * c + ch) * p;
          for (std::size_t i = 0; i < p; ++i) yp[i] += wt[i] * vp[i];
        }
      }
    }
    FusionLayerCache* lc = cache ? &cache->layers[l] : nullptr;
    if (lc) {
      lc->input = x;
      lc->q = std::move(q);
      lc->k = std::move(k);
      lc->v = std::move(v);
      lc->attn = std::move(attn);
    }
    if (!hooks.layer_adapters.empty()) {
      if (lc) lc->pre_adapter = y;
      y = collaboration_adapter(y, hooks.layer_adapters[l], hooks.flags, lc ? &lc->adapter : nullptr);
    }
    x = std::move(y);
  }
  return x.row(0);
}

Tensor attention_fuse_backward(const FusionCache& cache, const ParamRegistry& reg, const ModelConfig& cfg,
                               const FusionHooks& hooks, const Tensor& dfused, GradMap& grads,
                               bool need_input) {
  const std::size_t layers = cache.layers.size();
  const Tensor& x0 = cache.layers.at(0).input;
  const std::size_t m = x0.dim(0), c = x0.dim(1), p = x0.dim(2) * x0.dim(3), a = cfg.attn_dim;
  expect_shape(dfused, {c, x0.dim(2), x0.dim(3)}, "attention_fuse_backward dfused");
  const double inv = 1.0 / std::sqrt(static_cast<double>(a));

  // need_below[l]: gradient w.r.t. the input of layer l is required.
  std::vector<bool> need_below(layers + 1, need_input);
  for (std::size_t l = 1; l <= layers; ++l) {
    const bool t = any_trainable(reg, layer_prefix(l - 1) + ".") ||
                   (!hooks.layer_adapters.empty() && any_trainable(reg, "adapter_fus" + std::to_string(l - 1) + "."));
    need_below[l] = need_below[l - 1] || t;
  }

  Tensor dy(x0.shape());
  dy.set_row(0, dfused);
  for (std::size_t li = layers; li-- > 0;) {
    const FusionLayerCache& lc = cache.layers[li];
    const std::string pre = layer_prefix(li);
    if (!hooks.layer_adapters.empty()) {
      dy = collaboration_adapter_backward(lc.adapter, hooks.layer_adapters[li], hooks.flags, dy,
                                          "adapter_fus" + std::to_string(li), reg, grads,
                                          need_below[li] || any_trainable(reg, pre + "."));
      if (dy.empty()) return Tensor();
    }
    const bool want_q = any_trainable(reg, pre + ".query.");
    const bool want_k = any_trainable(reg, pre + ".key.");
    const bool want_v = any_trainable(reg, pre + ".value.");
    const bool need_dx = need_below[li];
    if (!(want_q || want_k || want_v || need_dx)) return Tensor();

    Tensor dx = cfg.fusion_residual && need_dx ? dy : Tensor(x0.shape());
    // d attn[r,s,i] = sum_c dy[r,c,i] v[s,c,i];  dv[s,c,i] = sum_r attn[r,s,i] dy[r,c,i]
    std::vector<double> dattn(m * m * p, 0.0);
    Tensor dv(lc.v.shape());
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t s = 0; s < m; ++s) {
        double* da = dattn.data() + (r * m + s) * p;
        const double* at = lc.attn.data() + (r * m + s) * p;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double* dyp = dy.ptr() + (r * c + ch) * p;
          const double* vp = lc.v.ptr() + (s * c + ch) * p;
          double* dvp = dv.ptr() + (s * c + ch) * p;
          for (std::size_t i = 0; i < p; ++i) {
            da[i] += dyp[i] * vp[i];
            dvp[i] += at[i] * dyp[i];
          }
        }
      }
    }
    // softmax backward: dlogit = attn * (dattn - sum_s attn*dattn)
    std::vector<double> dlogit(m * m * p);
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t i = 0; i < p; ++i) {
        double dot = 0.0;
        for (std::size_t s = 0; s < m; ++s) dot += lc.attn[(r * m + s) * p + i] * dattn[(r * m + s) * p + i];
        for (std::size_t s = 0; s < m; ++s) {
          const std::size_t idx = (r * m + s) * p + i;
          dlogit[idx] = lc.attn[idx] * (dattn[idx] - dot) * inv;
        }
      }
    }
    Tensor dq(lc.q.shape()), dk(lc.k.shape());
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t s = 0; s < m; ++s) {
        const double* dl = dlogit.data() + (r * m + s) * p;
        for (std::size_t d = 0; d < a; ++d) {
          const double* qp = lc.q.ptr() + (r * a + d) * p;
          const double* kp = lc.k.ptr() + (s * a + d) * p;
          double* dqp = dq.ptr() + (r * a + d) * p;
          double* dkp = dk.ptr() + (s * a + d) * p;
          for (std::size_t i = 0; i < p; ++i) {
            dqp[i] += dl[i] * kp[i];
            dkp[i] += dl[i] * qp[i];
          }
        }
      }
    }
    struct Proj {
      const char* name;
      const Tensor* grad;
      bool want;
    };
    const Proj projs[] = {{"query", &dq, want_q}, {"key", &dk, want_k}, {"value", &dv, want_v}};
    for (const auto& pj : projs) {
      const std::string wn = pre + "." + pj.name + ".weight";
      const std::string bn = pre + "." + pj.name + ".bias";
      Tensor dw, db;
      for (std::size_t r = 0; r < m; ++r) {
        LinearGrads lg = channel_linear_backward(lc.input.row(r), reg.value(wn), pj.grad->row(r), need_dx, pj.want);
        if (pj.want) {
          if (r == 0) {
            dw = std::move(lg.dw);
            db = std::move(lg.db);
          } else {
            dw += lg.dw;
            db += lg.db;
          }
        }
        if (need_dx) {
          double* dxp = dx.ptr() + r * c * p;
          for (std::size_t i = 0; i < c * p; ++i) dxp[i] += lg.dx[i];
        }
      }
      if (pj.want) {
        accumulate_if(reg, grads, wn, dw);
        accumulate_if(reg, grads, bn, db);
      }
    }
    if (!need_dx) return Tensor();
    dy = std::move(dx);
  }
  return dy;
}

HeadOutputs decode_heads(const Tensor& fused, const ParamRegistry& reg) {
  if (fused.rank() != 3) throw ShapeError("decode_heads: input must be [C,H,W], got " + shape_str(fused.shape()));
  return HeadOutputs{
      channel_linear(fused, reg.value("decoder.cls.weight"), reg.value("decoder.cls.bias")),
      channel_linear(fused, reg.value("decoder.reg.weight"), reg.value("decoder.reg.bias")),
  };
}

Tensor decode_heads_backward(const Tensor& fused, const ParamRegistry& reg, const HeadOutputs& dheads,
                             GradMap& grads, bool need_input) {
  const bool wc = any_trainable(reg, "decoder.cls.");
  const bool wr = any_trainable(reg, "decoder.reg.");
  Tensor dx;
  if (wc || need_input) {
    LinearGrads g = channel_linear_backward(fused, reg.value("decoder.cls.weight"), dheads.cls, need_input, wc);
    if (wc) {
      accumulate_if(reg, grads, "decoder.cls.weight", g.dw);
      accumulate_if(reg, grads, "decoder.cls.bias", g.db);
    }
    if (need_input) dx = std::move(g.dx);
  }
  if (wr || need_input) {
    LinearGrads g = channel_linear_backward(fused, reg.value("decoder.reg.weight"), dheads.reg, need_input, wr);
    if (wr) {
      accumulate_if(reg, grads, "decoder.reg.weight", g.dw);
      accumulate_if(reg, grads, "decoder.reg.bias", g.db);
    }
    if (need_input) dx += g.dx;
  }
  return dx;
}

// ---------------------------------------------------------------------------

DetectionTargets make_targets(std::span<const Box> boxes, const ModelConfig& cfg) {
  const std::size_t h = cfg.feature_rows(), w = cfg.feature_cols();
  const double fc = cfg.feature_cell();
  DetectionTargets t{Tensor({h, w}), Tensor({4, h, w})};
  std::vector<double> best(h * w, INFINITY);
  for (const Box& b : boxes) {
    const double fx = (b.cx - cfg.grid.x_min) / fc;
    const double fy = (b.cy - cfg.grid.y_min) / fc;
    if (fx < 0.0 || fy < 0.0) continue;
    const auto j = static_cast<std::size_t>(fx);
    const auto i = static_cast<std::size_t>(fy);
    if (i >= h || j >= w) continue;
    const double dx = fx - (static_cast<double>(j) + 0.5);
    const double dy = fy - (static_cast<double>(i) + 0.5);
    const double dist = dx * dx + dy * dy;
    // Two centres in one cell: the one nearer the cell centre owns it.
    if (dist >= best[i * w + j]) continue;
    best[i * w + j] = dist;
    t.positive.at(i, j) = 1.0;
    t.reg.at(0, i, j) = dx;
    t.reg.at(1, i, j) = dy;
    t.reg.at(2, i, j) = std::log(b.w / fc);
    t.reg.at(3, i, j) = std::log(b.l / fc);
  }
  return t;
}

LossResult detection_loss(const HeadOutputs& heads, const DetectionTargets& targets, const LossOptions& opt) {
  if (!(opt.reg_beta > 0.0) || !(opt.reg_weight >= 0.0)) throw ConfigError("detection_loss: bad loss options");
  const std::size_t h = targets.positive.dim(0), w = targets.positive.dim(1), n = h * w;
  expect_shape(heads.cls, {1, h, w}, "detection_loss cls");
  expect_shape(heads.reg, {4, h, w}, "detection_loss reg");
  expect_shape(targets.reg, {4, h, w}, "detection_loss targets");
  std::size_t npos = 0;
  for (std::size_t i = 0; i < n; ++i) npos += targets.positive[i] > 0.5 ? 1 : 0;
  const double ratio = npos ? static_cast<double>(n - npos) / static_cast<double>(npos) : 1.0;
  const double wpos = std::clamp(ratio, 1.0, 100.0);
  const double norm = 1.0 / std::max<double>(1.0, static_cast<double>(npos));

  LossResult r;
  r.grad.cls = Tensor(heads.cls.shape());
  r.grad.reg = Tensor(heads.reg.shape());
  double cls = 0.0, reg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = heads.cls[i];
    if (targets.positive[i] > 0.5) {
      cls += wpos * softplus(-z);
      r.grad.cls[i] = wpos * (sigmoid1(z) - 1.0) * norm;
      for (std::size_t ch = 0; ch < 4; ++ch) {
        const double d = heads.reg[ch * n + i] - targets.reg[ch * n + i];
        const double ad = std::fabs(d);
        const double beta = opt.reg_beta;
        reg += ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
        r.grad.reg[ch * n + i] = opt.reg_weight * (ad < beta ? d / beta : (d > 0.0 ? 1.0 : -1.0)) * norm;
      }
    } else {
      cls += softplus(z);
      r.grad.cls[i] = sigmoid1(z) * norm;
    }
  }
  r.cls = cls * norm;
  r.reg = opt.reg_weight * reg * norm;
  r.total = r.cls + r.reg;
  return r;
}

// ---------------------------------------------------------------------------

namespace {

FusionHooks make_hooks(const Model& model) {
  FusionHooks hooks;
  const MethodConfig& m = model.method;
  hooks.flags = m.plan.adapter;
  if (m.uses_adapters() && m.plan.per_fusion_layer) {
    for (std::size_t l = 0; l < model.config.fusion_layers; ++l) {
      hooks.layer_adapters.push_back(
          adapter_weights(model.params, "adapter_fus" + std::to_string(l), m.plan.adapter));
    }
  }
  return hooks;
}

}  // namespace

HeadOutputs pipeline_forward_features(const Model& model, const Tensor& features, ForwardTrace* trace) {
  const ModelConfig& cfg = model.config;
  const MethodConfig& m = model.method;
  const ParamRegistry& reg = model.params;
  if (features.rank() != 4 || features.dim(0) == 0) {
    throw ShapeError("pipeline_forward: feature stack must be [N,C,H,W] with N >= 1, got " +
                     shape_str(features.shape()));
  }
  ForwardTrace local;
  ForwardTrace& tr = trace ? *trace : local;
  const bool keep = trace != nullptr;
  if (keep) tr.features = features;

  Tensor f = features;
  if (m.uses_ssf()) {
    if (keep) tr.ssf1_input = f;
    f = scale_shift(f, reg.value("ssf1.scale"), reg.value("ssf1.shift"));
  }
  // (1b) adapter on the received stack, then the prompt from its output
  if (m.uses_adapters() && m.plan.pre_fusion) {
    f = collaboration_adapter(f, adapter_weights(reg, "adapter1", m.plan.adapter), m.plan.adapter,
                              keep ? &tr.adapter1 : nullptr);
  }
  if (keep) tr.adapted = f;
  Tensor input = f;
  if (m.uses_prompt()) {
    Tensor prompt = agent_prompt(f, prompt_weights(reg, m.plan.prompt), m.plan.prompt, keep ? &tr.prompt : nullptr);
    input = concat_rows(f, prompt);
  }
  if (keep) tr.fusion_input = input;
  // (1c) fusion over N or N+1 rows
  Tensor fused = attention_fuse(input, reg, cfg, make_hooks(model), keep ? &tr.fusion : nullptr);
  if (keep) tr.fused = fused;
  // (1d) second adapter on the fused map viewed as a single-row stack
  Tensor row = as_row(fused);
  if (m.uses_ssf()) {
    if (keep) tr.ssf2_input = row;
    row = scale_shift(row, reg.value("ssf2.scale"), reg.value("ssf2.shift"));
  }
  if (m.uses_adapters() && m.plan.post_fusion) {
    row = collaboration_adapter(row, adapter_weights(reg, "adapter2", m.plan.adapter), m.plan.adapter,
                                keep ? &tr.adapter2 : nullptr);
  }
  Tensor head_in = row.row(0);
  HeadOutputs out = decode_heads(head_in, reg);
  if (keep) tr.head_input = std::move(head_in);
  return out;
}

HeadOutputs pipeline_forward(const Model& model, std::span<const Tensor> observations, ForwardTrace* trace) {
  if (observations.empty()) throw ShapeError("pipeline_forward: sample has no agents");
  Tensor features = encode_agents(observations, model.params, model.config, trace ? &trace->encoder : nullptr);
  return pipeline_forward_features(model, features, trace);
}

GradMap pipeline_backward(const Model& model, const ForwardTrace& tr, const HeadOutputs& dheads) {
  const ModelConfig& cfg = model.config;
  const MethodConfig& m = model.method;
  const ParamRegistry& reg = model.params;
  GradMap grads;

  const bool pre = m.uses_adapters() && m.plan.pre_fusion;
  const bool post = m.uses_adapters() && m.plan.post_fusion;
  // Trainable stages in forward order; a stage needs its input gradient only
  // when something before it is trainable.
  const bool t_enc = !tr.encoder.empty() && any_trainable(reg, "encoder.");
  const bool t_ssf1 = m.uses_ssf() && any_trainable(reg, "ssf1.");
  const bool t_ada1 = pre && any_trainable(reg, "adapter1.");
  const bool t_prompt = m.uses_prompt() && any_trainable(reg, "prompt.");
  const bool t_fusion = any_trainable(reg, "fusion.") || any_trainable(reg, "adapter_fus");
  const bool t_ssf2 = m.uses_ssf() && any_trainable(reg, "ssf2.");
  const bool t_ada2 = post && any_trainable(reg, "adapter2.");

  const bool before_prompt = t_enc || t_ssf1 || t_ada1;
  const bool before_fusion = before_prompt || t_prompt;
  const bool before_ssf2 = before_fusion || t_fusion;
  const bool before_ada2 = before_ssf2 || t_ssf2;
  const bool before_heads = before_ada2 || t_ada2;

  Tensor dhead = decode_heads_backward(tr.head_input, reg, dheads, grads, before_heads);
  if (!before_heads) return grads;
  Tensor drow = as_row(dhead);
  if (post) {
    drow = collaboration_adapter_backward(tr.adapter2, adapter_weights(reg, "adapter2", m.plan.adapter),
                                          m.plan.adapter, drow, "adapter2", reg, grads, before_ada2);
    if (!before_ada2) return grads;
  }
  if (m.uses_ssf()) {
    ScaleShiftGrads sg = scale_shift_backward(tr.ssf2_input, reg.value("ssf2.scale"), drow);
    accumulate_if(reg, grads, "ssf2.scale", sg.dscale);
    accumulate_if(reg, grads, "ssf2.shift", sg.dshift);
    drow = std::move(sg.dx);
  }
  if (!before_ssf2) return grads;
  Tensor dinput = attention_fuse_backward(tr.fusion, reg, cfg, make_hooks(model), drow.row(0), grads, before_fusion);
  if (!before_fusion) return grads;

  const std::size_t n = tr.adapted.dim(0);
  Tensor dadapted = m.uses_prompt() ? slice_rows(dinput, 0, n) : dinput;
  if (m.uses_prompt()) {
    Tensor dprompt = slice_rows(dinput, n, n + 1);
    Tensor dsrc = agent_prompt_backward(tr.prompt, prompt_weights(reg, m.plan.prompt), m.plan.prompt, dprompt,
                                        reg, grads, before_prompt);
    if (!dsrc.empty()) dadapted += dsrc;
  }
  if (!before_prompt) return grads;
  Tensor dfeat = dadapted;
  if (pre) {
    dfeat = collaboration_adapter_backward(tr.adapter1, adapter_weights(reg, "adapter1", m.plan.adapter),
                                           m.plan.adapter, dadapted, "adapter1", reg, grads, t_enc || t_ssf1);
  }
  if (m.uses_ssf() && (t_enc || t_ssf1)) {
    ScaleShiftGrads sg = scale_shift_backward(tr.ssf1_input, reg.value("ssf1.scale"), dfeat);
    accumulate_if(reg, grads, "ssf1.scale", sg.dscale);
    accumulate_if(reg, grads, "ssf1.shift", sg.dshift);
    dfeat = std::move(sg.dx);
  }
  if (t_enc) {
    for (std::size_t a = 0; a < tr.encoder.size(); ++a) {
      encode_backward(tr.encoder[a], reg, cfg, dfeat.row(a), grads);
    }
  }
  return grads;
}

}  // namespace copeft
