#include "doctest.h"
#include "hidisc/sampler.hpp"

#include <map>
#include <set>
#include <stdexcept>

using namespace hidisc;

namespace {

SynthConfig corpus_config(int classes = 2, int patients = 4, int slides = 3,
                          int patches = 8) {
  SynthConfig cfg;
  cfg.n_classes = classes;
  cfg.patients_per_class = patients;
  cfg.slides_per_patient = slides;
  cfg.patches_per_slide = patches;
  cfg.patch_shape = {6, 6, 1};
  cfg.seed = 21;
  return cfg;
}

std::map<int, int> group_sizes(const std::vector<int>& idx) {
  std::map<int, int> sizes;
  for (int v : idx) sizes[v] += 1;
  return sizes;
}

}  // namespace

TEST_CASE("batch matches the minibatch composition table") {
  auto corpus = generate_synthetic(corpus_config());
  SampleSpec spec{2, 2, 2, 2, AugPolicy::none(), 5};
  auto batch = sample_batch(corpus, spec, 0);
  REQUIRE(batch.rows() == 16);

  auto patients = group_sizes(batch.patient_idx);
  auto slides = group_sizes(batch.slide_idx);
  auto patches = group_sizes(batch.patch_idx);
  CHECK(patients.size() == 2);
  CHECK(slides.size() == 4);
  CHECK(patches.size() == 8);
  for (auto [id, size] : patients) CHECK(size == 8);
  for (auto [id, size] : slides) CHECK(size == 4);
  for (auto [id, size] : patches) CHECK(size == 2);
}

TEST_CASE("row order is the canonical nesting") {
  auto corpus = generate_synthetic(corpus_config());
  SampleSpec spec{2, 2, 2, 2, AugPolicy::none(), 5};
  auto batch = sample_batch(corpus, spec, 3);
  for (int r = 0; r < batch.rows(); ++r) {
    CHECK(batch.patient_idx[r] == r / (spec.n_s * spec.n_p * spec.n_a));
    // augmentation replicas of one patch slot are adjacent
    if (r % spec.n_a != 0) CHECK(batch.patch_idx[r] == batch.patch_idx[r - 1]);
  }
}

TEST_CASE("a 512-image batch with n_a=n_s=n_p=2 holds 64 patients") {
  auto corpus = generate_synthetic(corpus_config(2, 40, 2, 4));
  SampleSpec spec{64, 2, 2, 2, AugPolicy::none(), 1};
  CHECK(spec.total() == 512);
  auto batch = sample_batch(corpus, spec, 0);
  CHECK(batch.rows() == 512);
  CHECK(group_sizes(batch.patient_idx).size() == 64);
}

TEST_CASE("a patient with one slide fills both slide slots from it") {
  auto corpus = generate_synthetic(corpus_config(1, 2, 1, 8));
  SampleSpec spec{2, 2, 2, 1, AugPolicy::none(), 2};
  auto batch = sample_batch(corpus, spec, 0);
  // both slide slots of each patient reference the same slide id
  CHECK(group_sizes(batch.slide_idx).size() == 2);
  // but the patch draws across the two occurrences are distinct
  CHECK(group_sizes(batch.patch_idx).size() == 8);
}

TEST_CASE("positive set sizes follow the discrimination level") {
  auto corpus = generate_synthetic(corpus_config());
  SampleSpec spec{2, 2, 2, 2, AugPolicy::none(), 7};
  auto batch = sample_batch(corpus, spec, 1);

  auto patch_pos = positive_sets(batch, Level::Patch);
  auto slide_pos = positive_sets(batch, Level::Slide);
  auto patient_pos = positive_sets(batch, Level::Patient);
  for (int i = 0; i < batch.rows(); ++i) {
    CHECK(patch_pos[i].size() == spec.n_a - 1);
    CHECK(slide_pos[i].size() == spec.n_p * spec.n_a - 1);
    CHECK(patient_pos[i].size() == spec.n_s * spec.n_p * spec.n_a - 1);
  }
}

TEST_CASE("positive sets match pairwise ancestry comparison") {
  auto corpus = generate_synthetic(corpus_config(2, 3, 2, 6));
  SampleSpec spec{3, 2, 2, 2, AugPolicy::weak(4), 9};
  for (std::int64_t counter : {0, 1, 5}) {
    auto batch = sample_batch(corpus, spec, counter);
    for (Level level : {Level::Patch, Level::Slide, Level::Patient}) {
      auto pos = positive_sets(batch, level);
      for (int i = 0; i < batch.rows(); ++i) {
        std::set<int> brute;
        for (int j = 0; j < batch.rows(); ++j) {
          if (j == i) continue;
          bool same = false;
          switch (level) {
            case Level::Patient:
              same = batch.source_refs[i].patient == batch.source_refs[j].patient;
              break;
            case Level::Slide:
              same = batch.source_refs[i].patient == batch.source_refs[j].patient &&
                     batch.source_refs[i].slide == batch.source_refs[j].slide;
              break;
            case Level::Patch:
              same = batch.source_refs[i] == batch.source_refs[j];
              break;
          }
          if (same) brute.insert(j);
        }
        CHECK(std::set<int>(pos[i].begin(), pos[i].end()) == brute);
      }
    }
  }
}

TEST_CASE("positive sets form a coarsening chain") {
  auto corpus = generate_synthetic(corpus_config());
  SampleSpec spec{2, 3, 2, 2, AugPolicy::none(), 11};
  auto batch = sample_batch(corpus, spec, 2);
  auto patch_pos = positive_sets(batch, Level::Patch);
  auto slide_pos = positive_sets(batch, Level::Slide);
  auto patient_pos = positive_sets(batch, Level::Patient);
  for (int i = 0; i < batch.rows(); ++i) {
    std::set<int> sp(slide_pos[i].begin(), slide_pos[i].end());
    std::set<int> pp(patient_pos[i].begin(), patient_pos[i].end());
    for (int j : patch_pos[i]) CHECK(sp.count(j) == 1);
    for (int j : slide_pos[i]) CHECK(pp.count(j) == 1);
  }
}

TEST_CASE("identical seed and counter give bit-identical batches") {
  auto corpus = generate_synthetic(corpus_config());
  SampleSpec spec{2, 2, 2, 2, AugPolicy::strong(3), 13};
  auto a = sample_batch(corpus, spec, 17);
  auto b = sample_batch(corpus, spec, 17);
  CHECK(a.images->data == b.images->data);
  CHECK(a.patient_idx == b.patient_idx);
  CHECK(a.slide_idx == b.slide_idx);
  CHECK(a.patch_idx == b.patch_idx);
  auto c = sample_batch(corpus, spec, 18);
  CHECK(a.images->data != c.images->data);
}

TEST_CASE("single-slide patients make slide and patient partitions coincide") {
  auto corpus = generate_synthetic(corpus_config(2, 3, 1, 8));
  SampleSpec spec{3, 2, 2, 2, AugPolicy::none(), 15};
  auto batch = sample_batch(corpus, spec, 0);
  for (int i = 0; i < batch.rows(); ++i)
    for (int j = 0; j < batch.rows(); ++j)
      CHECK((batch.slide_idx[i] == batch.slide_idx[j]) ==
            (batch.patient_idx[i] == batch.patient_idx[j]));
}

TEST_CASE("an epoch permutation covers every patient before repeating") {
  auto corpus = generate_synthetic(corpus_config(2, 4, 2, 8));  // 8 patients
  SampleSpec spec{2, 1, 1, 1, AugPolicy::none(), 19};
  std::set<int> seen;
  for (std::int64_t counter = 0; counter < 4; ++counter) {
    auto batch = sample_batch(corpus, spec, counter);
    for (const auto& ref : batch.source_refs) seen.insert(ref.patient);
  }
  CHECK(seen.size() == 8);
}

TEST_CASE("sampler errors on too few patients or patches") {
  auto corpus = generate_synthetic(corpus_config(1, 2, 2, 3));
  SampleSpec spec{5, 1, 1, 1, AugPolicy::none(), 0};
  CHECK_THROWS_WITH_AS(sample_batch(corpus, spec, 0), doctest::Contains("patients"),
                       std::invalid_argument);
  SampleSpec spec2{2, 1, 4, 1, AugPolicy::none(), 0};
  CHECK_THROWS_WITH_AS(sample_batch(corpus, spec2, 0), doctest::Contains("patches"),
                       std::invalid_argument);
}
