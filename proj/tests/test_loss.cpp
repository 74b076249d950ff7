#include "doctest.h"
#include "hidisc/loss.hpp"
#include "hidisc/rng.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

using namespace hidisc;

namespace {

TensorPtr random_unit_rows(int n, int d, std::uint64_t seed, bool requires_grad = false) {
  StreamRng rng(seed);
  std::vector<float> data(static_cast<std::size_t>(n) * d);
  for (int i = 0; i < n; ++i) {
    double sq = 0.0;
    std::vector<double> row(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) {
      row[static_cast<std::size_t>(j)] = rng.normal();
      sq += row[static_cast<std::size_t>(j)] * row[static_cast<std::size_t>(j)];
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (int j = 0; j < d; ++j)
      data[static_cast<std::size_t>(i) * d + j] =
          static_cast<float>(row[static_cast<std::size_t>(j)] * inv);
  }
  return Tensor::leaf({n, d}, std::move(data), requires_grad);
}

// Direct transcription of the definition: for each anchor i with a nonempty
// positive set, average over positives of -log softmax over all other rows.
double oracle_loss(const TensorPtr& z, const std::vector<std::vector<int>>& positives,
                   double tau) {
  const int n = z->shape[0], d = z->shape[1];
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    if (positives[static_cast<std::size_t>(i)].empty()) continue;
    double denom = 0.0;
    for (int a = 0; a < n; ++a) {
      if (a == i) continue;
      double dot = 0.0;
      for (int t = 0; t < d; ++t)
        dot += static_cast<double>(z->data[static_cast<std::size_t>(i) * d + t]) *
               z->data[static_cast<std::size_t>(a) * d + t];
      denom += std::exp(dot / tau);
    }
    double anchor = 0.0;
    for (int p : positives[static_cast<std::size_t>(i)]) {
      double dot = 0.0;
      for (int t = 0; t < d; ++t)
        dot += static_cast<double>(z->data[static_cast<std::size_t>(i) * d + t]) *
               z->data[static_cast<std::size_t>(p) * d + t];
      anchor += std::log(std::exp(dot / tau) / denom);
    }
    total -= anchor / static_cast<double>(positives[static_cast<std::size_t>(i)].size());
  }
  return total;
}

std::vector<std::vector<int>> random_positives(int n, std::uint64_t seed) {
  StreamRng rng(seed);
  std::vector<std::vector<int>> pos(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (j != i && rng.bernoulli(0.4)) pos[static_cast<std::size_t>(i)].push_back(j);
  return pos;
}

HierBatch sampled_batch(int classes, int patients, int slides, int patches,
                        const SampleSpec& spec, std::int64_t counter = 0) {
  SynthConfig cfg;
  cfg.n_classes = classes;
  cfg.patients_per_class = patients;
  cfg.slides_per_patient = slides;
  cfg.patches_per_slide = patches;
  cfg.patch_shape = {6, 6, 1};
  cfg.seed = 33;
  auto corpus = generate_synthetic(cfg);
  return sample_batch(corpus, spec, counter);
}

}  // namespace

TEST_CASE("four identical embeddings give 4 ln 3 at any positive structure") {
  std::vector<float> data;
  const std::vector<float> row = {0.6f, 0.8f};
  for (int i = 0; i < 4; ++i) data.insert(data.end(), row.begin(), row.end());
  auto z = Tensor::leaf({4, 2}, std::move(data));
  // [DERIVED] all similarities coincide, so each anchor's softmax is uniform
  // over its 3 candidates and every positive term is -log(1/3).
  Tape tape;
  auto loss = level_loss(tape, z, {{1}, {0}, {3}, {2}}, 0.7);
  CHECK(loss->scalar_value() == doctest::Approx(4.0 * std::log(3.0)).epsilon(1e-9));
  Tape tape2;
  auto loss2 = level_loss(tape2, z, {{1, 2, 3}, {0}, {0, 1}, {2}}, 0.25);
  CHECK(loss2->scalar_value() == doctest::Approx(4.0 * std::log(3.0)).epsilon(1e-9));
}

TEST_CASE("level loss matches a brute-force oracle") {
  for (std::uint64_t trial = 0; trial < 30; ++trial) {
    const int n = 2 + static_cast<int>(trial % 13);
    auto z = random_unit_rows(n, 5, 100 + trial);
    auto pos = random_positives(n, 200 + trial);
    Tape tape;
    int skipped = 0;
    auto loss = level_loss(tape, z, pos, 0.7, &skipped);
    CHECK(loss->scalar_value() == doctest::Approx(oracle_loss(z, pos, 0.7)).epsilon(1e-6));
    int expect_skipped = 0;
    for (const auto& p : pos) expect_skipped += p.empty() ? 1 : 0;
    CHECK(skipped == expect_skipped);
  }
}

TEST_CASE("anchors without positives contribute zero") {
  auto z = random_unit_rows(6, 4, 7);
  std::vector<std::vector<int>> sparse = {{1}, {0}, {}, {}, {5}, {4}};
  std::vector<std::vector<int>> dense = {{1}, {0}, {3}, {2}, {5}, {4}};
  Tape t1, t2;
  int skipped = 0;
  auto a = level_loss(t1, z, sparse, 0.7, &skipped);
  CHECK(skipped == 2);
  // removing the middle pair's terms changes the loss by exactly those terms
  auto b = level_loss(t2, z, dense, 0.7);
  const double middle = oracle_loss(z, {{}, {}, {3}, {2}, {}, {}}, 0.7);
  CHECK(a->scalar_value() == doctest::Approx(b->scalar_value() - middle).epsilon(1e-9));

  Tape t3;
  int all_skipped = 0;
  auto zero = level_loss(t3, z, std::vector<std::vector<int>>(6), 0.7, &all_skipped);
  CHECK(zero->scalar_value() == 0.0);
  CHECK(all_skipped == 6);
}

TEST_CASE("loss is invariant under a consistent row permutation") {
  auto z = random_unit_rows(8, 6, 11);
  auto pos = random_positives(8, 12);
  std::vector<int> perm = {3, 7, 1, 0, 5, 2, 6, 4};
  std::vector<int> inv(8);
  for (int i = 0; i < 8; ++i) inv[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i;
  std::vector<float> pdata(z->data.size());
  std::vector<std::vector<int>> ppos(8);
  for (int i = 0; i < 8; ++i) {
    for (int t = 0; t < 6; ++t)
      pdata[static_cast<std::size_t>(i) * 6 + t] =
          z->data[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]) * 6 + t];
    for (int p : pos[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])])
      ppos[static_cast<std::size_t>(i)].push_back(inv[static_cast<std::size_t>(p)]);
  }
  auto zp = Tensor::leaf({8, 6}, std::move(pdata));
  Tape t1, t2;
  CHECK(level_loss(t1, z, pos, 0.7)->scalar_value() ==
        doctest::Approx(level_loss(t2, zp, ppos, 0.7)->scalar_value()).epsilon(1e-9));
}

TEST_CASE("hidisc total is the lambda-weighted sum of level losses") {
  SampleSpec spec{2, 2, 2, 2, AugPolicy::none(), 41};
  auto batch = sampled_batch(2, 3, 2, 6, spec);
  auto z = random_unit_rows(batch.rows(), 8, 17);

  LossConfig cfg;
  cfg.lambda_patch = 1.0;
  cfg.lambda_slide = 0.5;
  cfg.lambda_patient = 2.0;
  Tape tape;
  auto breakdown = hidisc_loss(tape, z, batch, cfg);
  const double expect = 1.0 * breakdown.level_value(Level::Patch) +
                        0.5 * breakdown.level_value(Level::Slide) +
                        2.0 * breakdown.level_value(Level::Patient);
  CHECK(breakdown.total_value() == doctest::Approx(expect).epsilon(1e-6));

  // each level value matches the oracle on that level's positive sets
  for (Level level : {Level::Patch, Level::Slide, Level::Patient})
    CHECK(breakdown.level_value(level) ==
          doctest::Approx(oracle_loss(z, positive_sets(batch, level), cfg.tau)).epsilon(1e-6));
}

TEST_CASE("disabled levels are absent from the breakdown") {
  SampleSpec spec{2, 2, 2, 2, AugPolicy::none(), 43};
  auto batch = sampled_batch(2, 3, 2, 6, spec);
  auto z = random_unit_rows(batch.rows(), 8, 19);
  Tape tape;
  auto breakdown = hidisc_loss(tape, z, batch, LossConfig::patch_only());
  CHECK(breakdown.per_level.size() == 1);
  CHECK(breakdown.per_level.count(Level::Patch) == 1);
  CHECK(breakdown.total_value() ==
        doctest::Approx(breakdown.level_value(Level::Patch)).epsilon(1e-9));
}

TEST_CASE("single-slide patients make slide and patient losses coincide") {
  SampleSpec spec{3, 2, 2, 2, AugPolicy::none(), 47};
  auto batch = sampled_batch(2, 3, 1, 8, spec);
  auto z = random_unit_rows(batch.rows(), 8, 23);
  Tape tape;
  auto breakdown = hidisc_loss(tape, z, batch, LossConfig{});
  CHECK(breakdown.level_value(Level::Slide) ==
        doctest::Approx(breakdown.level_value(Level::Patient)).epsilon(1e-9));
}

TEST_CASE("supcon with all-distinct labels is zero with every anchor skipped") {
  auto z = random_unit_rows(5, 4, 29);
  Tape tape;
  int skipped = 0;
  auto loss = supcon_loss(tape, z, {0, 1, 2, 3, 4}, 0.7, &skipped);
  CHECK(loss->scalar_value() == 0.0);
  CHECK(skipped == 5);
}

TEST_CASE("supcon on patient labels equals the patient level loss") {
  SampleSpec spec{2, 2, 2, 2, AugPolicy::none(), 53};
  auto batch = sampled_batch(2, 3, 2, 6, spec);
  auto z = random_unit_rows(batch.rows(), 8, 31);
  Tape t1, t2;
  auto a = supcon_loss(t1, z, batch.patient_idx, 0.7);
  auto b = level_loss(t2, z, positive_sets(batch, Level::Patient), 0.7);
  CHECK(a->scalar_value() == doctest::Approx(b->scalar_value()).epsilon(1e-9));
}

TEST_CASE("analytic gradient matches finite differences") {
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    const int n = 4 + static_cast<int>(trial * 2);
    // perturb away from unit norm; the function under test normalizes first,
    // so finite-difference steps stay in the loss domain
    auto x = random_unit_rows(n, 5, 300 + trial, true);
    for (auto& v : x->data) v *= 1.5f;
    auto pos = random_positives(n, 400 + trial);
    const double err = grad_check(
        [&pos](Tape& tape, const TensorPtr& in) {
          return level_loss(tape, l2_normalize(tape, in), pos, 0.7);
        },
        x, 1e-3);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("a gradient step decreases the loss") {
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    const int n = 6;
    auto x = random_unit_rows(n, 4, 500 + trial, true);
    auto pos = random_positives(n, 600 + trial);
    bool any = false;
    for (const auto& p : pos) any |= !p.empty();
    if (!any) continue;
    Tape tape;
    auto z = l2_normalize(tape, x);
    auto loss = level_loss(tape, z, pos, 0.7);
    const double before = loss->scalar_value();
    tape.backward(loss);
    std::vector<float> stepped(x->data.size());
    for (std::size_t i = 0; i < stepped.size(); ++i)
      stepped[i] = x->data[i] - 0.01f * x->grad[i];
    auto x2 = Tensor::leaf({n, 4}, std::move(stepped));
    Tape tape2;
    auto loss2 = level_loss(tape2, l2_normalize(tape2, x2), pos, 0.7);
    CHECK(loss2->scalar_value() < before);
  }
}

TEST_CASE("backward distributes lambda weights across levels") {
  SampleSpec spec{2, 2, 1, 2, AugPolicy::none(), 59};
  auto batch = sampled_batch(2, 3, 2, 6, spec);
  auto x = random_unit_rows(batch.rows(), 6, 37, true);
  for (auto& v : x->data) v *= 2.0f;

  LossConfig cfg;
  cfg.lambda_slide = 0.25;
  cfg.lambda_patient = 3.0;
  const double err = grad_check(
      [&batch, &cfg](Tape& tape, const TensorPtr& in) {
        return hidisc_loss(tape, l2_normalize(tape, in), batch, cfg).total;
      },
      x, 1e-3);
  // three level losses accumulate into the same f32 gradient buffer, so the
  // composite check carries a little more rounding than a single level
  CHECK(err < 5e-4);
}

TEST_CASE("loss input validation") {
  auto z = random_unit_rows(4, 3, 61);
  Tape tape;
  CHECK_THROWS_AS(level_loss(tape, z, {{1}, {0}, {3}, {2}}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(level_loss(tape, z, {{1}, {0}}, 0.7), std::invalid_argument);
  CHECK_THROWS_WITH_AS(level_loss(tape, z, {{1}, {0}, {4}, {2}}, 0.7),
                       doctest::Contains("invalid positive index"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(level_loss(tape, z, {{1}, {1}, {3}, {2}}, 0.7),
                       doctest::Contains("invalid positive index"), std::invalid_argument);

  auto bad = Tensor::leaf({2, 2}, {1.0f, 1.0f, 0.0f, 1.0f});
  CHECK_THROWS_WITH_AS(level_loss(tape, bad, {{1}, {0}}, 0.7),
                       doctest::Contains("unit-norm"), std::invalid_argument);

  auto one = Tensor::leaf({1, 2}, {1.0f, 0.0f});
  CHECK_THROWS_WITH_AS(level_loss(tape, one, {{}}, 0.7),
                       doctest::Contains("at least 2"), std::invalid_argument);

  LossConfig none;
  none.enable_patch = none.enable_slide = none.enable_patient = false;
  CHECK_THROWS_AS(none.validate(), std::invalid_argument);
  SampleSpec spec{2, 1, 1, 2, AugPolicy::none(), 0};
  auto batch = sampled_batch(2, 2, 1, 4, spec);
  auto zb = random_unit_rows(batch.rows(), 4, 67);
  CHECK_THROWS_WITH_AS(hidisc_loss(tape, zb, batch, LossConfig::supcon_only()),
                       doctest::Contains("supcon"), std::invalid_argument);
}
