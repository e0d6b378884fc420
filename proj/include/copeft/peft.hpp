#pragma once

#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "copeft/config.hpp"
#include "copeft/nn.hpp"

namespace copeft {

// Adaptation methods compared by the harness.
enum class Method { kNone, kScratch, kDecoderOnly, kSsf, kAdapter, kCopeft };

enum class Variant { kStandard, kShallow, kDeep };  // CoPEFT, CoPEFT_S, CoPEFT_D

// Internal switches of the collaboration adapter.
struct AdapterFlags {
  bool conv_branch = true;           // 3x3 bottleneck convolutions; off -> 1x1 (linear) bottleneck
  bool collaborative_filter = true;  // max-pool over agents before the score generator
  bool score_generator = true;       // 1x1 conv producing the modulation score
  bool score_sigmoid = false;        // squash the score; off reproduces the plain formulation

  bool operator==(const AdapterFlags&) const = default;
};

struct PromptFlags {
  bool instance_aware = true;        // prompt derived from the adapted features
  bool collaborative_filter = true;  // pool over agents; off -> ego row only

  bool operator==(const PromptFlags&) const = default;
};

struct VariantPlan {
  bool pre_fusion = true;
  bool post_fusion = true;
  bool per_fusion_layer = false;
  bool prompt_enabled = true;
  AdapterFlags adapter;
  PromptFlags prompt;

  bool operator==(const VariantPlan&) const = default;
};

VariantPlan variant_plan(Variant variant);

struct MethodConfig {
  Method method = Method::kNone;
  VariantPlan plan;  // meaningful for kAdapter and kCopeft only

  bool uses_adapters() const { return method == Method::kAdapter || method == Method::kCopeft; }
  bool uses_prompt() const { return method == Method::kCopeft && plan.prompt_enabled; }
  bool uses_ssf() const { return method == Method::kSsf; }
};

// Parses "none", "scratch", "decoder_only", "ssf", "adapter", "copeft",
// "copeft_s", "copeft_d", optionally followed by ':' and comma-separated
// modifiers for copeft: -adapter, -prompt, -conv, -colf, -scog, +sigmoid,
// -inst, -pcolf. Throws ConfigError on anything else.
MethodConfig parse_method(std::string_view text);
// Canonical text form; parse_method(method_label(m)) reproduces m.
std::string method_label(const MethodConfig& m);
std::string method_name(Method m);

// ---------------------------------------------------------------------------
// Collaboration adapter
// ---------------------------------------------------------------------------

// Borrowed views of one adapter's weights. Score pointers are null when the
// score generator is disabled.
struct AdapterWeights {
  const Tensor* w_down = nullptr;  // [C/r, C, k, k]
  const Tensor* b_down = nullptr;
  const Tensor* w_up = nullptr;  // [C, C/r, k, k]
  const Tensor* b_up = nullptr;
  const Tensor* w_score = nullptr;  // [C, C]
  const Tensor* b_score = nullptr;
};

// Flags as the adapter ops apply them: without the conv branch the op is the
// plain bottleneck adapter, score fixed to ones.
AdapterFlags effective_flags(const AdapterFlags& flags);

AdapterWeights adapter_weights(const ParamRegistry& reg, const std::string& prefix,
                               const AdapterFlags& flags);

struct AdapterCache {
  Tensor input;                 // [N,C,H,W]
  std::vector<Tensor> down;     // pre-activation bottleneck per row
  std::vector<Tensor> hidden;   // ReLU output per row
  Tensor up;                    // [N,C,H,W]
  Tensor pooled;                // [1,C,H,W] when the filter is on
  std::vector<std::uint32_t> argmax;
  Tensor score;                 // [1|N,C,H,W]; empty means all-ones
};

// F_hat = F + S * up(relu(down(F))), with S from the filter/score branch.
Tensor collaboration_adapter(const Tensor& features, const AdapterWeights& w, const AdapterFlags& flags,
                             AdapterCache* cache = nullptr);

// The modulation score alone (empty tensor when it is fixed to ones).
Tensor modulation_score(const Tensor& features, const AdapterWeights& w, const AdapterFlags& flags);

// Accumulates parameter gradients for trainable names under `prefix` and
// returns d/dF when `need_input` (otherwise an empty tensor).
Tensor collaboration_adapter_backward(const AdapterCache& cache, const AdapterWeights& w,
                                      const AdapterFlags& flags, const Tensor& dout,
                                      const std::string& prefix, const ParamRegistry& reg,
                                      GradMap& grads, bool need_input);

// ---------------------------------------------------------------------------
// Agent prompt
// ---------------------------------------------------------------------------

struct PromptWeights {
  const Tensor* scale = nullptr;  // [C]
  const Tensor* shift = nullptr;  // [C]
  const Tensor* w_lin = nullptr;  // [C, C]
  const Tensor* b_lin = nullptr;  // [C]
  const Tensor* free = nullptr;   // [1,C,H,W], only without instance awareness
};

PromptWeights prompt_weights(const ParamRegistry& reg, const PromptFlags& flags);

struct PromptCache {
  Tensor source;   // what the scale/shift saw
  Tensor env;      // E
  Tensor pooled;   // [1,C,H,W]
  std::vector<std::uint32_t> argmax;
};

// P = Linear(ColF(Scale * F_hat + Shift)); returns [1,C,H,W].
Tensor agent_prompt(const Tensor& adapted, const PromptWeights& w, const PromptFlags& flags,
                    PromptCache* cache = nullptr);

// Returns d/dF_hat (empty when not instance-aware or not requested).
Tensor agent_prompt_backward(const PromptCache& cache, const PromptWeights& w, const PromptFlags& flags,
                             const Tensor& dprompt, const ParamRegistry& reg, GradMap& grads,
                             bool need_input);

// ---------------------------------------------------------------------------
// Parameters, freeze policy and accounting
// ---------------------------------------------------------------------------

// Inserts the method-specific tensors (adapters, prompt, SSF) into `reg`.
void add_method_params(ParamRegistry& reg, const ModelConfig& cfg, const MethodConfig& method,
                       std::mt19937_64& rng);

// Adapter name prefixes that the method inserts, in forward order.
std::vector<std::string> adapter_prefixes(const ModelConfig& cfg, const MethodConfig& method);

// Names updated during adaptation.
using FreezeMask = std::set<std::string>;

FreezeMask build_freeze_mask(const ParamRegistry& reg, const MethodConfig& method);
// Sets each entry's trainable flag to membership in `mask`.
void apply_freeze_mask(ParamRegistry& reg, const FreezeMask& mask);

struct ParamCount {
  std::uint64_t trainable = 0;
  std::uint64_t total = 0;
  double ratio = 0.0;
};

ParamCount count_params(const ParamRegistry& reg, const FreezeMask& mask);

}  // namespace copeft
