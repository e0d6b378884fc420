#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "copeft/tensor.hpp"

namespace copeft {

// ---------------------------------------------------------------------------
// Layer primitives. Each forward has a matching backward that takes the
// upstream gradient and returns gradients for its inputs.
// ---------------------------------------------------------------------------

// Cross-correlation of x[C_in,H,W] with w[C_out,C_in,k,k] plus per-channel bias.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding);

struct Conv2dGrads {
  Tensor dx;  // empty when not requested
  Tensor dw;
  Tensor db;
};
Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& w, int stride, int padding,
                            const Tensor& dy, bool need_dx = true, bool need_params = true);

// Affine map along the last axis: x[..., C_in] -> [..., C_out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

struct LinearGrads {
  Tensor dx;
  Tensor dw;
  Tensor db;
};
LinearGrads linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy);

// Per-cell channel map x[C_in,H,W] -> [C_out,H,W] with w[C_out,C_in]. This is
// linear() applied along the channel axis (a 1x1 convolution with a 2-D weight).
Tensor channel_linear(const Tensor& x, const Tensor& w, const Tensor& b);
LinearGrads channel_linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                                    bool need_dx = true, bool need_params = true);

Tensor relu(const Tensor& x);
// Subgradient at exactly 0 is 0.
Tensor relu_backward(const Tensor& x, const Tensor& dy);

Tensor sigmoid(const Tensor& x);

// out[n,c,h,w] = scale[c] * x[n,c,h,w] + shift[c]
Tensor scale_shift(const Tensor& x, const Tensor& scale, const Tensor& shift);

struct ScaleShiftGrads {
  Tensor dx;
  Tensor dscale;
  Tensor dshift;
};
ScaleShiftGrads scale_shift_backward(const Tensor& x, const Tensor& scale, const Tensor& dy);

// Elementwise max over the agent axis of x[N,C,H,W]; returns [1,C,H,W].
// `argmax`, when given, receives the winning agent per element (ties -> lowest index).
Tensor agent_max_pool(const Tensor& x, std::vector<std::uint32_t>* argmax = nullptr);
// Routes dy[1,C,H,W] to the argmax rows of an [N,C,H,W] input.
Tensor agent_max_pool_backward(const std::vector<std::uint32_t>& argmax, std::size_t agents,
                               const Tensor& dy);

// ---------------------------------------------------------------------------
// Parameters and optimizer
// ---------------------------------------------------------------------------

struct ParamEntry {
  std::string name;
  Tensor value;
  bool trainable = false;
  Tensor adam_m;
  Tensor adam_v;
  std::int64_t step_count = 0;
};

// Ordered, uniquely named parameter store.
class ParamRegistry {
 public:
  void add(const std::string& name, Tensor value, bool trainable = false);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const noexcept { return entries_.size(); }

  const Tensor& value(const std::string& name) const { return entry(name).value; }
  Tensor& value(const std::string& name) { return entry(name).value; }
  const ParamEntry& entry(const std::string& name) const;
  ParamEntry& entry(const std::string& name);

  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  std::vector<ParamEntry>& entries() noexcept { return entries_; }
  std::vector<std::string> names() const;

  void set_trainable(const std::string& name, bool trainable) { entry(name).trainable = trainable; }
  bool trainable(const std::string& name) const { return entry(name).trainable; }
  void freeze_all();
  // Clears Adam moments and step counters.
  void reset_optimizer_state();

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Gradients by parameter name. Names are kept sorted so that iteration and
// any reduction over the map are deterministic.
struct GradMap {
  std::map<std::string, Tensor> params;
  Tensor input;  // gradient w.r.t. a designated input, when requested

  // Adds into an existing entry or inserts a copy.
  void accumulate(const std::string& name, const Tensor& grad);
  bool has(const std::string& name) const { return params.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  void scale(double s);
};

struct AdamOptions {
  double lr = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update over the trainable entries. Frozen entries are
// never touched.
void adam_step(ParamRegistry& registry, const GradMap& grads, const AdamOptions& opt = {});

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct FiniteDiffOptions {
  double eps = 1e-6;
  // Tensors larger than this are checked on a uniform sample of this many
  // coordinates drawn with `seed`; 0 checks every coordinate.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
  // Coordinates with |analytic - numeric| <= abs_tol count as exact; covers
  // gradients that are structurally zero, where the difference quotient is
  // pure rounding noise.
  double abs_tol = 0.0;
};

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;  // raw |analytic - numeric|, abs_tol not applied
  std::size_t coords_checked = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
};

using ScalarFn = std::function<Tensor(const ParamRegistry&)>;

// Central differences over every trainable entry of `params` compared against
// `analytic`. Relative error per coordinate is
// |a - n| / max(1e-12, |a| + |n|). `fn` must return a one-element tensor.
FiniteDiffReport finite_diff_check(const ScalarFn& fn, ParamRegistry params, const GradMap& analytic,
                                   const FiniteDiffOptions& opt = {});

}  // namespace copeft
