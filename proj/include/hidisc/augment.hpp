#pragma once

#include "hidisc/corpus.hpp"
#include "hidisc/rng.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace hidisc {

enum class AugKind { None, Weak, Strong };

enum class AugOp {
  HFlip,
  VFlip,
  GaussianNoise,
  IntensityJitter,
  GaussianBlur,
  RandomErasing,
  RandomResizedCrop,
};

const char* aug_op_name(AugOp op);

struct AugPolicy {
  AugKind kind = AugKind::Weak;
  double per_op_probability = 0.3;  // Strong only
  std::vector<AugOp> op_list;       // Strong only, applied in order
  std::uint64_t seed_namespace = 0;

  void validate() const;

  static AugPolicy none();
  static AugPolicy weak(std::uint64_t seed_namespace = 0);
  static AugPolicy strong(std::uint64_t seed_namespace = 0);
};

// Identifies one augmentation draw; identical keys give bit-identical outputs
// regardless of execution order or worker count.
struct StreamKey {
  std::uint64_t epoch = 0;
  std::uint64_t sample_index = 0;
  std::uint64_t replica = 0;
};

// Applies the policy to one patch. Weak: each flip independently with
// probability 0.5. Strong: ops from op_list in order, each activated with
// per_op_probability; pixel-value ops clamp to [0, 1]. None: identity.
// activations, when given, receives one 0/1 flag per op in the policy's
// effective op list (the two flips for Weak).
std::vector<float> augment(const std::vector<float>& patch, const PatchShape& shape,
                           const AugPolicy& policy, const StreamKey& key,
                           std::vector<std::uint8_t>* activations = nullptr);

// Overwrites one axis-aligned rectangle, fully inside the patch, whose pixel
// area is inside [area_lo, area_hi] * h * w (nearest realizable rectangle when
// the range hits no exact integer area). All channels are erased.
std::vector<float> erase_region(const std::vector<float>& patch, const PatchShape& shape,
                                double area_lo, double area_hi, float value,
                                StreamRng& rng);

}  // namespace hidisc
