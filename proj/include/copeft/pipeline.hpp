#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "copeft/config.hpp"
#include "copeft/nn.hpp"
#include "copeft/peft.hpp"

namespace copeft {

// Detector outputs on the feature grid.
struct HeadOutputs {
  Tensor cls;  // [1,H,W] logits
  Tensor reg;  // [4,H,W]: dx, dy (cell units), log w, log l (log cell units)
};

struct DetectionTargets {
  Tensor positive;  // [H,W], 1 on cells owning a box centre
  Tensor reg;       // [4,H,W], defined on positive cells
};

// A base architecture, the adaptation method layered on top of it, and every
// weight either of them uses.
struct Model {
  ModelConfig config;
  MethodConfig method;
  ParamRegistry params;
};

void init_base_params(ParamRegistry& reg, const ModelConfig& cfg, std::mt19937_64& rng);

// Fresh base weights plus the method's extra tensors, drawn from `seed`.
Model make_model(const ModelConfig& cfg, const MethodConfig& method, std::uint64_t seed);

// Copies `base` weights and inserts freshly initialised method tensors.
Model with_method(const Model& base, const MethodConfig& method, std::uint64_t seed);

// ---------------------------------------------------------------------------

struct EncoderCache {
  Tensor obs;
  Tensor z1, a1, z2, a2, z3;
};

// Two stride-2 3x3 conv+ReLU blocks and one stride-1 3x3 conv+ReLU.
Tensor encode(const Tensor& obs, const ParamRegistry& reg, const ModelConfig& cfg,
              EncoderCache* cache = nullptr);
// Parameter gradients only; observations are not differentiated.
void encode_backward(const EncoderCache& cache, const ParamRegistry& reg, const ModelConfig& cfg,
                     const Tensor& dfeat, GradMap& grads);

// Encodes each agent and stacks the result into [N,C,H,W].
Tensor encode_agents(std::span<const Tensor> observations, const ParamRegistry& reg,
                     const ModelConfig& cfg, std::vector<EncoderCache>* caches = nullptr);

struct FusionLayerCache {
  Tensor input;          // [M,C,H,W]
  Tensor q, k, v;        // [M,A,H,W], [M,A,H,W], [M,C,H,W]
  std::vector<double> attn;  // [M,M,H*W]
  Tensor pre_adapter;    // layer output before the optional adapter
  AdapterCache adapter;
};

struct FusionCache {
  std::vector<FusionLayerCache> layers;
};

// Optional collaboration adapters run after each fusion layer.
struct FusionHooks {
  std::vector<AdapterWeights> layer_adapters;  // empty, or one per layer
  AdapterFlags flags;
};

// Per-cell scaled dot-product self-attention across the agent rows, repeated
// `layers` times; returns the ego row [C,H,W] of the final stack.
Tensor attention_fuse(const Tensor& stack, const ParamRegistry& reg, const ModelConfig& cfg,
                      const FusionHooks& hooks = {}, FusionCache* cache = nullptr);

Tensor attention_fuse_backward(const FusionCache& cache, const ParamRegistry& reg, const ModelConfig& cfg,
                               const FusionHooks& hooks, const Tensor& dfused, GradMap& grads,
                               bool need_input);

HeadOutputs decode_heads(const Tensor& fused, const ParamRegistry& reg);
Tensor decode_heads_backward(const Tensor& fused, const ParamRegistry& reg, const HeadOutputs& dheads,
                             GradMap& grads, bool need_input);

// ---------------------------------------------------------------------------

DetectionTargets make_targets(std::span<const Box> boxes, const ModelConfig& cfg);

struct LossResult {
  double total = 0.0;
  double cls = 0.0;
  double reg = 0.0;
  HeadOutputs grad;  // d total / d heads
};

struct LossOptions {
  double reg_weight = 1.0;
  double reg_beta = 1.0;  // smooth-L1 transition, in target units
};

// Positive-weighted BCE-with-logits over all cells plus smooth-L1 on the
// regression of positive cells, both normalised by max(1, #positives).
LossResult detection_loss(const HeadOutputs& heads, const DetectionTargets& targets, const LossOptions& opt = {});

// ---------------------------------------------------------------------------

struct ForwardTrace {
  std::vector<EncoderCache> encoder;  // empty when features were supplied
  Tensor features;     // F
  Tensor ssf1_input;
  Tensor adapted;      // F_hat
  AdapterCache adapter1;
  PromptCache prompt;
  Tensor fusion_input; // I
  FusionCache fusion;
  Tensor fused;        // H
  Tensor ssf2_input;
  AdapterCache adapter2;
  Tensor head_input;   // H_hat
};

// Full pipeline from raw per-agent observations (ego first).
HeadOutputs pipeline_forward(const Model& model, std::span<const Tensor> observations,
                             ForwardTrace* trace = nullptr);

// Same pipeline starting after the encoder from a precomputed [N,C,H,W] stack.
HeadOutputs pipeline_forward_features(const Model& model, const Tensor& features,
                                      ForwardTrace* trace = nullptr);

// Gradients of the trainable parameters given d loss / d heads.
GradMap pipeline_backward(const Model& model, const ForwardTrace& trace, const HeadOutputs& dheads);

}  // namespace copeft
