#include "doctest.h"
#include "hidisc/eval.hpp"
#include "hidisc/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

using namespace hidisc;

namespace {

EmbeddingSet unit_set(int n, int d, std::uint64_t seed) {
  EmbeddingSet set;
  set.dim = d;
  StreamRng rng(seed);
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(static_cast<std::size_t>(d));
    double sq = 0.0;
    for (auto& v : row) {
      v = rng.normal();
      sq += v * v;
    }
    for (double v : row) set.vectors.push_back(static_cast<float>(v / std::sqrt(sq)));
    set.labels.push_back(static_cast<int>(rng.uniform_int(2)));
    set.refs.push_back({0, 0, i});
  }
  return set;
}

// Full-sort transcription of the scoring rule, kept independent of the
// implementation under test.
std::pair<std::vector<double>, int> oracle_knn_row(const EmbeddingSet& train,
                                                   const float* query, int k,
                                                   int n_classes) {
  struct Entry {
    double sim;
    int idx;
  };
  std::vector<Entry> entries;
  for (int j = 0; j < train.rows(); ++j) {
    double dot = 0.0;
    for (int t = 0; t < train.dim; ++t)
      dot += static_cast<double>(query[t]) * train.row(j)[t];
    entries.push_back({dot, j});
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    return a.idx < b.idx;
  });
  const int used = std::min(k, train.rows());
  std::vector<double> score(static_cast<std::size_t>(n_classes), 0.0);
  double denom = 0.0;
  for (int r = 0; r < used; ++r) {
    score[static_cast<std::size_t>(
        train.labels[static_cast<std::size_t>(entries[static_cast<std::size_t>(r)].idx)])] +=
        entries[static_cast<std::size_t>(r)].sim;
    denom += entries[static_cast<std::size_t>(r)].sim;
  }
  if (denom > 0.0) {
    for (auto& s : score) s /= denom;
  } else {
    std::fill(score.begin(), score.end(), 0.0);
    for (int r = 0; r < used; ++r)
      score[static_cast<std::size_t>(
          train.labels[static_cast<std::size_t>(
              entries[static_cast<std::size_t>(r)].idx)])] += 1.0 / used;
  }
  int pred = 0;
  for (int c = 1; c < n_classes; ++c)
    if (score[static_cast<std::size_t>(c)] > score[static_cast<std::size_t>(pred)]) pred = c;
  return {score, pred};
}

double oracle_auroc_pairs(const std::vector<double>& scores,
                          const std::vector<int>& labels) {
  double wins = 0.0;
  std::int64_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[i] != 1 || labels[j] != 0) continue;
      pairs += 1;
      if (scores[i] > scores[j])
        wins += 1.0;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  return wins / static_cast<double>(pairs);
}

double oracle_auprc(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<double> thresholds = scores;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  std::int64_t total_pos = std::count(labels.begin(), labels.end(), 1);
  double area = 0.0, prev_recall = 0.0;
  for (double th : thresholds) {
    std::int64_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (scores[i] >= th) (labels[i] == 1 ? tp : fp) += 1;
    const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return area;
}

Corpus eval_corpus(int classes = 2, int patients = 3, int slides = 2, int patches = 5) {
  SynthConfig cfg;
  cfg.n_classes = classes;
  cfg.patients_per_class = patients;
  cfg.slides_per_patient = slides;
  cfg.patches_per_slide = patches;
  cfg.patch_shape = {6, 6, 1};
  cfg.seed = 5;
  return generate_synthetic(cfg);
}

}  // namespace

TEST_CASE("a test row identical to a train row wins with k=1") {
  auto train = unit_set(10, 4, 1);
  EmbeddingSet test;
  test.dim = 4;
  test.vectors.assign(train.row(3), train.row(3) + 4);
  test.labels = {0};
  test.refs = {{0, 0, 0}};
  auto res = knn_scores(train, test, 1, 2);
  CHECK(res.predicted[0] == train.labels[3]);
  CHECK(res.scores[0][static_cast<std::size_t>(train.labels[3])] ==
        doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("symmetric classes tie and break to the smaller index") {
  // two train points mirror-imaged about the query direction
  EmbeddingSet train;
  train.dim = 2;
  train.vectors = {1.0f, 0.0f, 0.0f, 1.0f};
  train.labels = {1, 0};
  train.refs = {{0, 0, 0}, {0, 0, 1}};
  EmbeddingSet test;
  test.dim = 2;
  const float r = static_cast<float>(1.0 / std::sqrt(2.0));
  test.vectors = {r, r};
  test.labels = {0};
  test.refs = {{0, 0, 0}};
  auto res = knn_scores(train, test, 2, 2);
  CHECK(res.scores[0][0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(res.scores[0][1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(res.predicted[0] == 0);
}

TEST_CASE("knn matches the full-sort oracle on random sets") {
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    auto train = unit_set(50, 6, 100 + trial);
    auto test = unit_set(20, 6, 200 + trial);
    auto res = knn_scores(train, test, 5, 2);
    for (int i = 0; i < test.rows(); ++i) {
      auto [score, pred] = oracle_knn_row(train, test.row(i), 5, 2);
      CHECK(res.predicted[static_cast<std::size_t>(i)] == pred);
      for (int c = 0; c < 2; ++c)
        CHECK(res.scores[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] ==
              doctest::Approx(score[static_cast<std::size_t>(c)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("k larger than the train set is clamped with a flag") {
  auto train = unit_set(4, 3, 7);
  auto test = unit_set(2, 3, 8);
  auto res = knn_scores(train, test, 10, 2);
  CHECK(res.k_used == 4);
  CHECK(res.k_clamped);
  CHECK_THROWS_AS(knn_scores(train, test, 0, 2), std::invalid_argument);
}

TEST_CASE("pooling averages member scores per ancestry group") {
  auto corpus = eval_corpus(2, 1, 1, 3);  // 2 patients, 1 slide each, 3 patches
  EmbeddingSet test;
  test.dim = 2;
  KnnResult knn;
  const double vals[2][3] = {{0.2, 0.4, 0.6}, {1.0, 1.0, 1.0}};
  for (int p = 0; p < 2; ++p)
    for (int t = 0; t < 3; ++t) {
      test.vectors.insert(test.vectors.end(), {1.0f, 0.0f});
      test.labels.push_back(p);
      test.refs.push_back({p, 0, t});
      knn.scores.push_back({1.0 - vals[p][t], vals[p][t]});
      knn.predicted.push_back(vals[p][t] > 0.5 ? 1 : 0);
    }
  auto pooled = pool_scores(knn, test, corpus, Level::Slide);
  REQUIRE(pooled.scores.size() == 2);
  // groups come back sorted by ancestry key, patient 0 first
  CHECK(pooled.scores[0][1] == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(pooled.scores[1][1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pooled.predicted[0] == 0);
  CHECK(pooled.predicted[1] == 1);
}

TEST_CASE("pooling matches an independent group-by over the corpus") {
  auto corpus = eval_corpus(2, 3, 2, 5);
  StreamRng rng(17);
  EmbeddingSet test;
  test.dim = 2;
  KnnResult knn;
  for (std::size_t pi = 0; pi < corpus.patients.size(); ++pi)
    for (std::size_t si = 0; si < corpus.patients[pi].slides.size(); ++si)
      for (std::size_t ti = 0; ti < corpus.patients[pi].slides[si].patches.size(); ++ti) {
        test.vectors.insert(test.vectors.end(), {1.0f, 0.0f});
        test.labels.push_back(corpus.patients[pi].class_label);
        test.refs.push_back({static_cast<int>(pi), static_cast<int>(si),
                             static_cast<int>(ti)});
        const double s = rng.uniform();
        knn.scores.push_back({1.0 - s, s});
        knn.predicted.push_back(s > 0.5 ? 1 : 0);
      }
  for (Level level : {Level::Slide, Level::Patient}) {
    auto pooled = pool_scores(knn, test, corpus, level);
    std::map<std::string, std::pair<double, int>> brute;  // key -> (sum, count)
    for (int i = 0; i < test.rows(); ++i) {
      auto key = ancestry(corpus, test.refs[static_cast<std::size_t>(i)], level);
      brute[key].first += knn.scores[static_cast<std::size_t>(i)][1];
      brute[key].second += 1;
    }
    REQUIRE(pooled.group_ids.size() == brute.size());
    for (std::size_t g = 0; g < pooled.group_ids.size(); ++g) {
      const auto& [sum, count] = brute.at(pooled.group_ids[g]);
      CHECK(pooled.scores[g][1] == doctest::Approx(sum / count).epsilon(1e-12));
    }
  }
}

TEST_CASE("perfect predictions score one on every metric") {
  std::vector<std::vector<double>> scores = {{0.9, 0.1}, {0.2, 0.8}, {0.8, 0.2}, {0.3, 0.7}};
  std::vector<int> predicted = {0, 1, 0, 1};
  std::vector<int> labels = {0, 1, 0, 1};
  auto m = compute_metrics(scores, predicted, labels, 2);
  CHECK(m.accuracy == 1.0);
  CHECK(m.mca == 1.0);
  CHECK(m.auroc == 1.0);
  CHECK(m.auprc == 1.0);
  CHECK(m.sensitivity == 1.0);
  CHECK(m.specificity == 1.0);
}

TEST_CASE("the four-point auroc example scores 0.75") {
  // [DERIVED] positives 0.9, 0.7 against negatives 0.8, 0.1: three of the
  // four ordered pairs are correct
  std::vector<double> scores = {0.9, 0.8, 0.7, 0.1};
  std::vector<int> labels = {1, 0, 1, 0};
  CHECK(auroc_rank(scores, labels) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("constant scores on balanced labels give auroc one half") {
  std::vector<double> scores(8, 0.3);
  std::vector<int> labels = {0, 1, 0, 1, 0, 1, 0, 1};
  CHECK(auroc_rank(scores, labels) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("rank metrics match exhaustive oracles on random instances") {
  for (std::uint64_t trial = 0; trial < 40; ++trial) {
    StreamRng rng(300 + trial);
    const int n = 5 + static_cast<int>(rng.uniform_int(60));
    std::vector<double> scores;
    std::vector<int> labels;
    bool seen[2] = {false, false};
    for (int i = 0; i < n; ++i) {
      // quantized scores to exercise tie handling
      scores.push_back(rng.uniform_int(10) / 10.0);
      labels.push_back(static_cast<int>(rng.uniform_int(2)));
      seen[labels.back()] = true;
    }
    if (!seen[0] || !seen[1]) continue;
    CHECK(auroc_rank(scores, labels) ==
          doctest::Approx(oracle_auroc_pairs(scores, labels)).epsilon(1e-9));
    CHECK(auprc_step(scores, labels) ==
          doctest::Approx(oracle_auprc(scores, labels)).epsilon(1e-9));
  }
}

TEST_CASE("mca ignores class imbalance from duplicated examples") {
  std::vector<std::vector<double>> scores = {{0.9, 0.1}, {0.4, 0.6}, {0.6, 0.4}};
  std::vector<int> predicted = {0, 1, 0};
  std::vector<int> labels = {0, 1, 1};
  auto base = compute_metrics(scores, predicted, labels, 2);
  // duplicate the class-0 example three more times
  for (int i = 0; i < 3; ++i) {
    scores.push_back(scores[0]);
    predicted.push_back(predicted[0]);
    labels.push_back(labels[0]);
  }
  auto fat = compute_metrics(scores, predicted, labels, 2);
  CHECK(fat.mca == doctest::Approx(base.mca).epsilon(1e-12));
  CHECK(fat.accuracy != base.accuracy);
  // confusion rows sum to class counts
  CHECK(fat.confusion[0][0] + fat.confusion[0][1] == 4);
  CHECK(fat.confusion[1][0] + fat.confusion[1][1] == 2);
}

TEST_CASE("single-class input leaves rank metrics undefined but reports the rest") {
  std::vector<std::vector<double>> scores = {{0.9, 0.1}, {0.8, 0.2}};
  std::vector<int> predicted = {0, 0};
  std::vector<int> labels = {0, 0};
  auto m = compute_metrics(scores, predicted, labels, 2);
  CHECK_FALSE(m.has_binary);
  CHECK(m.undefined_metrics.find("one class") != std::string::npos);
  CHECK(m.accuracy == 1.0);
  CHECK(m.mca == 1.0);
}

TEST_CASE("identical embeddings collapse to cosine one and rank one") {
  EmbeddingSet set;
  set.dim = 3;
  for (int i = 0; i < 6; ++i) {
    set.vectors.insert(set.vectors.end(), {0.6f, 0.8f, 0.0f});
    set.labels.push_back(0);
    set.refs.push_back({0, 0, i});
  }
  auto diag = collapse_diagnostics(set, 6);
  CHECK(diag.mean_cosine == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(diag.effective_rank == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("an orthonormal probe has zero mean cosine and full centered rank") {
  const int d = 8;
  EmbeddingSet set;
  set.dim = d;
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) set.vectors.push_back(i == j ? 1.0f : 0.0f);
    set.labels.push_back(0);
    set.refs.push_back({0, 0, i});
  }
  auto diag = collapse_diagnostics(set, d);
  CHECK(diag.mean_cosine == doctest::Approx(0.0).epsilon(1e-12));
  // centering removes the mean direction, so d orthonormal vectors span
  // exactly d-1 centered dimensions
  CHECK(diag.effective_rank == doctest::Approx(d - 1).epsilon(1e-6));
}

TEST_CASE("effective rank matches a dense svd oracle") {
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    const int m = 30, d = 12;
    auto set = unit_set(m, d, 400 + trial);
    auto diag = collapse_diagnostics(set, m);

    Eigen::MatrixXd x(m, d);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < d; ++j) x(i, j) = set.row(i)[j];
    x.rowwise() -= x.colwise().mean();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(x);
    const auto sv = svd.singularValues();
    const double total = sv.sum();
    double entropy = 0.0;
    for (int i = 0; i < sv.size(); ++i) {
      const double p = sv(i) / total;
      if (p > 1e-300) entropy -= p * std::log(p);
    }
    CHECK(diag.effective_rank == doctest::Approx(std::exp(entropy)).epsilon(1e-6));
  }
}

TEST_CASE("embedding a corpus is deterministic and augmentation-free") {
  auto corpus = eval_corpus(2, 2, 2, 5);
  EncoderConfig cfg;
  cfg.backbone = "mlp";
  cfg.widths = {8};
  cfg.projection_dim = 6;
  cfg.patch_shape = {6, 6, 1};
  cfg.init_seed = 2;
  Encoder enc(cfg);

  auto a = embed_corpus(enc, corpus, 0, 9, "all");
  auto b = embed_corpus(enc, corpus, 0, 9, "all");
  CHECK(a.vectors == b.vectors);
  CHECK(a.rows() == corpus.patch_count());
  auto threaded = embed_corpus(enc, corpus, 0, 9, "all", 4);
  CHECK(a.vectors == threaded.vectors);

  // each row equals the direct encoding of its raw patch
  for (int i : {0, 7, a.rows() - 1}) {
    auto pixels = corpus.load_patch(a.refs[static_cast<std::size_t>(i)]);
    Tape tape;
    auto z = enc.encode(tape, Tensor::leaf({1, 6, 6, 1}, pixels));
    for (int j = 0; j < 6; ++j)
      CHECK(z->data[static_cast<std::size_t>(j)] ==
            a.vectors[static_cast<std::size_t>(i) * 6 + j]);
  }

  // subsampling caps at availability and otherwise reduces the count
  auto capped = embed_corpus(enc, corpus, 400, 9);
  CHECK(capped.rows() == corpus.patch_count());
  auto sub = embed_corpus(enc, corpus, 3, 9);
  CHECK(sub.rows() == 4 * 2 * 3);  // 4 patients, 2 slides, 3 kept per slide
  auto sub2 = embed_corpus(enc, corpus, 3, 9);
  CHECK(sub.vectors == sub2.vectors);
}

TEST_CASE("the assembled report carries all three levels") {
  auto corpus = eval_corpus(2, 3, 2, 5);
  EncoderConfig cfg;
  cfg.backbone = "mlp";
  cfg.widths = {8};
  cfg.projection_dim = 6;
  cfg.patch_shape = {6, 6, 1};
  Encoder enc(cfg);
  auto emb = embed_corpus(enc, corpus, 0, 1);
  auto report = evaluate(emb, emb, corpus, 3);
  CHECK(report.per_level.count("patch") == 1);
  CHECK(report.per_level.count("slide") == 1);
  CHECK(report.per_level.count("patient") == 1);
  auto json = report_json(report);
  CHECK(json.find("\"patient\"") != std::string::npos);
  CHECK(json == report_json(report));
  auto table = report_table(report);
  CHECK(table.find("patch") != std::string::npos);
}
