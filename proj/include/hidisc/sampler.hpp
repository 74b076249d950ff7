#pragma once

#include "hidisc/augment.hpp"
#include "hidisc/corpus.hpp"
#include "hidisc/tensor.hpp"

#include <cstdint>
#include <vector>

namespace hidisc {

struct SampleSpec {
  int n = 8;    // patients per batch
  int n_s = 2;  // slides per patient
  int n_p = 2;  // patches per slide
  int n_a = 2;  // augmentations per patch
  AugPolicy policy = AugPolicy::weak();
  std::uint64_t seed = 0;

  int total() const { return n * n_s * n_p * n_a; }
  void validate() const;
};

// One sampled minibatch. Row order is the canonical (patient, slide, patch,
// augmentation) nesting, so row r maps to slots via div/mod. The *_idx arrays
// are dense batch-local ancestry ids: rows share an id iff they share the
// corresponding ancestor in the corpus (a repeated slide keeps one id).
struct HierBatch {
  TensorPtr images;  // [rows, h, w, c]
  std::vector<int> patient_idx;
  std::vector<int> slide_idx;
  std::vector<int> patch_idx;
  std::vector<int> class_idx;  // patient class labels, for SupCon and eval only
  std::vector<PatchRef> source_refs;

  int rows() const { return static_cast<int>(patient_idx.size()); }
  const std::vector<int>& level_idx(Level level) const;
};

// Pure function of (corpus, spec, batch_counter). Patients are drawn by
// shuffled epoch permutation; slides without replacement per patient, cycling
// through reshuffles when a patient has fewer than n_s slides; patches without
// replacement per slide across repeated occurrences when possible.
HierBatch sample_batch(const Corpus& corpus, const SampleSpec& spec,
                       std::int64_t batch_counter);

// P_l(i): rows sharing the l-level ancestry with row i, excluding i.
std::vector<std::vector<int>> positive_sets(const HierBatch& batch, Level level);

}  // namespace hidisc
