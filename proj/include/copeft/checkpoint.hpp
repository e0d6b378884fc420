#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "copeft/peft.hpp"
#include "copeft/pipeline.hpp"

namespace copeft {

enum class CheckpointKind : std::uint32_t { kFull = 0, kDelta = 1 };

// Raw container contents.
struct Checkpoint {
  CheckpointKind kind = CheckpointKind::kFull;
  std::array<std::uint8_t, 32> config_hash{};
  std::vector<std::pair<std::string, Tensor>> tensors;  // in file order
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
// Reserved names describing the architecture and the adaptation method.
inline constexpr const char* kMetaArch = "meta.arch";
inline constexpr const char* kMetaMethod = "meta.method";

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Encodes the parts of ModelConfig / MethodConfig that tensor shapes cannot
// express. Grid geometry is not stored.
Tensor encode_arch(const ModelConfig& cfg);
ModelConfig decode_arch(const Tensor& t);
Tensor encode_method(const MethodConfig& m);
MethodConfig decode_method(const Tensor& t);

// Full: every registry tensor. Delta: exactly the names in `mask` (non-empty).
Checkpoint make_checkpoint(const Model& model, CheckpointKind kind, const FreezeMask& mask = {});

// Overwrites exactly the stored (non-meta) names. Unknown names and shape
// mismatches are errors; a full checkpoint must also cover every name.
void load_tensors(const Checkpoint& ckpt, ParamRegistry& reg);

// Rebuilds a model from a full checkpoint; `grid` supplies the geometry.
Model model_from_checkpoint(const Checkpoint& ckpt, const GridGeometry& grid);
// Applies a delta on top of `base` (hash must match); the result carries the
// delta's method and freeze mask as trainable flags.
Model apply_delta(const Model& base, const Checkpoint& delta);

void save_model(const std::filesystem::path& path, const Model& model);
void save_delta(const std::filesystem::path& path, const Model& model, const FreezeMask& mask);
Model load_model(const std::filesystem::path& path, const GridGeometry& grid);
Model load_delta(const Model& base, const std::filesystem::path& path);

}  // namespace copeft
