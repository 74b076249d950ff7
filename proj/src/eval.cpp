#include "hidisc/eval.hpp"

#include "hidisc/rng.hpp"
#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

namespace hidisc {

void EmbeddingSet::validate() const {
  if (dim < 1) throw std::invalid_argument("embedding set: dim must be positive");
  if (vectors.size() != static_cast<std::size_t>(rows()) * dim ||
      refs.size() != labels.size())
    throw std::invalid_argument("embedding set: inconsistent sizes");
  for (int i = 0; i < rows(); ++i) {
    double sq = 0.0;
    for (int j = 0; j < dim; ++j)
      sq += static_cast<double>(row(i)[j]) * row(i)[j];
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-4)
      throw std::invalid_argument("embedding set: row " + std::to_string(i) +
                                  " is not unit-norm");
  }
}

EmbeddingSet embed_corpus(const Encoder& encoder, const Corpus& corpus,
                          int per_slide_subsample, std::uint64_t seed,
                          const std::string& split_tag, int workers) {
  if (per_slide_subsample < 0)
    throw std::invalid_argument("embed_corpus: negative subsample");
  if (workers < 1) throw std::invalid_argument("embed_corpus: workers must be >= 1");
  EmbeddingSet out;
  out.dim = encoder.config().projection_dim;
  out.split_tag = split_tag;

  for (std::size_t pi = 0; pi < corpus.patients.size(); ++pi) {
    const auto& patient = corpus.patients[pi];
    for (std::size_t si = 0; si < patient.slides.size(); ++si) {
      const int avail = static_cast<int>(patient.slides[si].patches.size());
      std::vector<int> chosen(static_cast<std::size_t>(avail));
      std::iota(chosen.begin(), chosen.end(), 0);
      if (per_slide_subsample > 0 && per_slide_subsample < avail) {
        StreamRng rng(seed, {StreamRng::hash_tag("subsample"),
                             static_cast<std::uint64_t>(pi),
                             static_cast<std::uint64_t>(si)});
        rng.shuffle(chosen);
        chosen.resize(static_cast<std::size_t>(per_slide_subsample));
        std::sort(chosen.begin(), chosen.end());
      }
      for (int ti : chosen) {
        out.refs.push_back({static_cast<int>(pi), static_cast<int>(si), ti});
        out.labels.push_back(patient.class_label);
      }
    }
  }
  if (out.refs.empty()) throw std::invalid_argument("embed_corpus: empty corpus");

  const auto& ps = corpus.patch_shape;
  const int total = static_cast<int>(out.refs.size());
  const int chunk = 64;
  out.vectors.resize(static_cast<std::size_t>(total) * out.dim);
  auto encode_chunk = [&](int start) {
    const int b = std::min(chunk, total - start);
    std::vector<float> pixels;
    pixels.reserve(static_cast<std::size_t>(b) * ps.numel());
    for (int i = 0; i < b; ++i) {
      auto patch = corpus.load_patch(out.refs[static_cast<std::size_t>(start + i)]);
      pixels.insert(pixels.end(), patch.begin(), patch.end());
    }
    Tape tape;
    auto z = encoder.encode(tape, Tensor::leaf({b, ps.h, ps.w, ps.c},
                                               std::move(pixels)));
    std::copy(z->data.begin(), z->data.end(),
              out.vectors.begin() + static_cast<std::size_t>(start) * out.dim);
  };
  if (workers == 1 || total <= chunk) {
    for (int start = 0; start < total; start += chunk) encode_chunk(start);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        while (true) {
          const int idx = next.fetch_add(1);
          const int start = idx * chunk;
          if (start >= total) return;
          encode_chunk(start);
        }
      });
    for (auto& t : pool) t.join();
  }
  out.validate();
  return out;
}

void export_embeddings(const EmbeddingSet& set, const Corpus& corpus,
                       const std::string& path_prefix, std::uint64_t config_digest) {
  {
    std::ofstream bin(path_prefix + ".bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw std::runtime_error("cannot write " + path_prefix + ".bin");
    bin.write(reinterpret_cast<const char*>(set.vectors.data()),
              static_cast<std::streamsize>(set.vectors.size() * sizeof(float)));
  }
  nlohmann::json side;
  side["rows"] = set.rows();
  side["dim"] = set.dim;
  side["split"] = set.split_tag;
  side["config_digest"] = config_digest;
  side["labels"] = set.labels;
  auto refs = nlohmann::json::array();
  for (const auto& ref : set.refs) {
    const auto& patient = corpus.patients[static_cast<std::size_t>(ref.patient)];
    const auto& slide = patient.slides[static_cast<std::size_t>(ref.slide)];
    refs.push_back({{"patient_id", patient.patient_id},
                    {"slide_id", slide.slide_id},
                    {"patch_id", slide.patches[static_cast<std::size_t>(ref.patch)].patch_id}});
  }
  side["refs"] = std::move(refs);
  std::ofstream json_out(path_prefix + ".json", std::ios::trunc);
  if (!json_out) throw std::runtime_error("cannot write " + path_prefix + ".json");
  json_out << side.dump(2) << "\n";
}

KnnResult knn_scores(const EmbeddingSet& train, const EmbeddingSet& test, int k,
                     int n_classes) {
  if (k < 1) throw std::invalid_argument("knn: k must be >= 1");
  if (train.rows() == 0) throw std::invalid_argument("knn: empty train set");
  if (train.dim != test.dim)
    throw std::invalid_argument("knn: dimension mismatch " + std::to_string(train.dim) +
                                " vs " + std::to_string(test.dim));
  for (int label : train.labels)
    if (label < 0 || label >= n_classes)
      throw std::invalid_argument("knn: train label out of range");

  KnnResult out;
  out.k_used = k;
  if (k > train.rows()) {
    out.k_used = train.rows();
    out.k_clamped = true;
  }
  const int m = train.rows();
  out.scores.reserve(static_cast<std::size_t>(test.rows()));
  out.predicted.reserve(static_cast<std::size_t>(test.rows()));
  std::vector<int> order(static_cast<std::size_t>(m));
  for (int i = 0; i < test.rows(); ++i) {
    std::vector<double> sims(static_cast<std::size_t>(m));
    for (int j = 0; j < m; ++j) {
      double dot = 0.0;
      for (int t = 0; t < train.dim; ++t)
        dot += static_cast<double>(test.row(i)[t]) * train.row(j)[t];
      sims[static_cast<std::size_t>(j)] = dot;
    }
    std::iota(order.begin(), order.end(), 0);
    auto better = [&](int a, int b) {
      if (sims[static_cast<std::size_t>(a)] != sims[static_cast<std::size_t>(b)])
        return sims[static_cast<std::size_t>(a)] > sims[static_cast<std::size_t>(b)];
      return a < b;  // ties by ascending train index
    };
    std::partial_sort(order.begin(), order.begin() + out.k_used, order.end(), better);

    std::vector<double> score(static_cast<std::size_t>(n_classes), 0.0);
    double denom = 0.0;
    for (int r = 0; r < out.k_used; ++r) {
      const int j = order[static_cast<std::size_t>(r)];
      score[static_cast<std::size_t>(train.labels[static_cast<std::size_t>(j)])] +=
          sims[static_cast<std::size_t>(j)];
      denom += sims[static_cast<std::size_t>(j)];
    }
    if (denom > 0.0) {
      for (auto& s : score) s /= denom;
    } else {
      // degenerate all-non-positive neighborhood: count-based vote instead
      std::fill(score.begin(), score.end(), 0.0);
      for (int r = 0; r < out.k_used; ++r) {
        const int j = order[static_cast<std::size_t>(r)];
        score[static_cast<std::size_t>(train.labels[static_cast<std::size_t>(j)])] +=
            1.0 / out.k_used;
      }
    }
    int pred = 0;
    for (int c = 1; c < n_classes; ++c)
      if (score[static_cast<std::size_t>(c)] > score[static_cast<std::size_t>(pred)])
        pred = c;
    out.scores.push_back(std::move(score));
    out.predicted.push_back(pred);
  }
  return out;
}

PooledScores pool_scores(const KnnResult& knn, const EmbeddingSet& test,
                         const Corpus& corpus, Level level) {
  if (level == Level::Patch)
    throw std::invalid_argument("pool_scores: pooling is for slide or patient level");
  std::map<std::string, std::vector<int>> groups;
  for (int i = 0; i < test.rows(); ++i)
    groups[ancestry(corpus, test.refs[static_cast<std::size_t>(i)], level)].push_back(i);

  PooledScores out;
  for (const auto& [key, members] : groups) {
    const auto n_classes = knn.scores.front().size();
    std::vector<double> mean(n_classes, 0.0);
    for (int i : members)
      for (std::size_t c = 0; c < n_classes; ++c)
        mean[c] += knn.scores[static_cast<std::size_t>(i)][c];
    for (auto& v : mean) v /= static_cast<double>(members.size());
    int pred = 0;
    for (std::size_t c = 1; c < n_classes; ++c)
      if (mean[c] > mean[static_cast<std::size_t>(pred)]) pred = static_cast<int>(c);
    out.group_ids.push_back(key);
    out.scores.push_back(std::move(mean));
    out.predicted.push_back(pred);
    out.labels.push_back(test.labels[static_cast<std::size_t>(members.front())]);
  }
  return out;
}

double auroc_rank(const std::vector<double>& scores, const std::vector<int>& labels) {
  const int n = static_cast<int>(scores.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] < scores[static_cast<std::size_t>(b)];
  });
  std::vector<double> rank(static_cast<std::size_t>(n), 0.0);
  int i = 0;
  while (i < n) {
    int j = i;
    while (j < n && scores[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])] ==
                        scores[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])])
      ++j;
    const double avg = (static_cast<double>(i) + j + 1.0) / 2.0;  // 1-based mean rank
    for (int t = i; t < j; ++t)
      rank[static_cast<std::size_t>(order[static_cast<std::size_t>(t)])] = avg;
    i = j;
  }
  double rank_sum = 0.0;
  std::int64_t pos = 0;
  for (int t = 0; t < n; ++t)
    if (labels[static_cast<std::size_t>(t)] == 1) {
      rank_sum += rank[static_cast<std::size_t>(t)];
      ++pos;
    }
  const std::int64_t neg = n - pos;
  if (pos == 0 || neg == 0)
    throw std::invalid_argument("auroc: both classes must be present");
  const double u = rank_sum - static_cast<double>(pos) * (pos + 1) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

double auprc_step(const std::vector<double>& scores, const std::vector<int>& labels) {
  const int n = static_cast<int>(scores.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  std::int64_t total_pos = 0;
  for (int label : labels) total_pos += label == 1 ? 1 : 0;
  if (total_pos == 0 || total_pos == n)
    throw std::invalid_argument("auprc: both classes must be present");

  double area = 0.0, prev_recall = 0.0;
  std::int64_t tp = 0, fp = 0;
  int i = 0;
  while (i < n) {
    int j = i;  // advance through a tie group as one threshold
    while (j < n && scores[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])] ==
                        scores[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])])
      ++j;
    for (int t = i; t < j; ++t) {
      if (labels[static_cast<std::size_t>(order[static_cast<std::size_t>(t)])] == 1)
        ++tp;
      else
        ++fp;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return area;
}

MetricsSlice compute_metrics(const std::vector<std::vector<double>>& scores,
                             const std::vector<int>& predicted,
                             const std::vector<int>& labels, int n_classes) {
  const int n = static_cast<int>(labels.size());
  if (n == 0) throw std::invalid_argument("compute_metrics: empty input");
  if (scores.size() != labels.size() || predicted.size() != labels.size())
    throw std::invalid_argument("compute_metrics: inconsistent sizes");

  MetricsSlice out;
  out.n = n;
  out.confusion.assign(static_cast<std::size_t>(n_classes),
                       std::vector<int>(static_cast<std::size_t>(n_classes), 0));
  for (int i = 0; i < n; ++i) {
    const int t = labels[static_cast<std::size_t>(i)];
    const int p = predicted[static_cast<std::size_t>(i)];
    if (t < 0 || t >= n_classes || p < 0 || p >= n_classes)
      throw std::invalid_argument("compute_metrics: label out of range");
    out.confusion[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)] += 1;
  }

  int correct = 0, present = 0;
  double recall_sum = 0.0;
  out.per_class_accuracy.assign(static_cast<std::size_t>(n_classes), 0.0);
  for (int c = 0; c < n_classes; ++c) {
    const auto& row = out.confusion[static_cast<std::size_t>(c)];
    const int count = std::accumulate(row.begin(), row.end(), 0);
    correct += row[static_cast<std::size_t>(c)];
    if (count > 0) {
      out.per_class_accuracy[static_cast<std::size_t>(c)] =
          static_cast<double>(row[static_cast<std::size_t>(c)]) / count;
      recall_sum += out.per_class_accuracy[static_cast<std::size_t>(c)];
      present += 1;
    }
  }
  out.accuracy = static_cast<double>(correct) / n;
  out.mca = recall_sum / present;

  if (n_classes == 2) {
    std::vector<double> pos_scores(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
      pos_scores[static_cast<std::size_t>(i)] = scores[static_cast<std::size_t>(i)][1];
    if (present < 2) {
      out.undefined_metrics = "auroc/auprc undefined: only one class present";
    } else {
      out.auroc = auroc_rank(pos_scores, labels);
      out.auprc = auprc_step(pos_scores, labels);
      out.sensitivity = out.per_class_accuracy[1];
      out.specificity = out.per_class_accuracy[0];
      out.has_binary = true;
    }
  }
  return out;
}

std::vector<double> symmetric_eigenvalues(std::vector<double> a, int d) {
  if (static_cast<int>(a.size()) != d * d)
    throw std::invalid_argument("symmetric_eigenvalues: bad size");
  auto at = [&](int i, int j) -> double& { return a[static_cast<std::size_t>(i) * d + j]; };
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < d; ++p)
      for (int q = p + 1; q < d; ++q) off += at(p, q) * at(p, q);
    double diag = 1.0;
    for (int p = 0; p < d; ++p) diag += at(p, p) * at(p, p);
    if (off <= 1e-26 * diag) break;
    for (int p = 0; p < d; ++p)
      for (int q = p + 1; q < d; ++q) {
        const double apq = at(p, q);
        if (apq == 0.0) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int i = 0; i < d; ++i) {
          const double aip = at(i, p), aiq = at(i, q);
          at(i, p) = c * aip - s * aiq;
          at(i, q) = s * aip + c * aiq;
        }
        for (int i = 0; i < d; ++i) {
          const double api = at(p, i), aqi = at(q, i);
          at(p, i) = c * api - s * aqi;
          at(q, i) = s * api + c * aqi;
        }
      }
  }
  std::vector<double> ev(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) ev[static_cast<std::size_t>(i)] = at(i, i);
  std::sort(ev.begin(), ev.end());
  return ev;
}

CollapseDiagnostics collapse_diagnostics(const EmbeddingSet& set, int probe_size,
                                         std::uint64_t seed) {
  if (probe_size < 2)
    throw std::invalid_argument("collapse_diagnostics: probe size must be >= 2");
  std::vector<int> probe(static_cast<std::size_t>(set.rows()));
  std::iota(probe.begin(), probe.end(), 0);
  if (probe_size < set.rows()) {
    StreamRng rng(seed, {StreamRng::hash_tag("probe")});
    rng.shuffle(probe);
    probe.resize(static_cast<std::size_t>(probe_size));
    std::sort(probe.begin(), probe.end());
  }
  const int m = static_cast<int>(probe.size());
  const int d = set.dim;

  CollapseDiagnostics out;
  out.probe_size = m;
  double cos_sum = 0.0;
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      double dot = 0.0;
      for (int t = 0; t < d; ++t)
        dot += static_cast<double>(set.row(probe[static_cast<std::size_t>(i)])[t]) *
               set.row(probe[static_cast<std::size_t>(j)])[t];
      cos_sum += dot;
    }
  out.mean_cosine = 2.0 * cos_sum / (static_cast<double>(m) * (m - 1));

  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < m; ++i)
    for (int t = 0; t < d; ++t)
      mean[static_cast<std::size_t>(t)] +=
          set.row(probe[static_cast<std::size_t>(i)])[t] / static_cast<double>(m);
  std::vector<double> gram(static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < m; ++i) {
    const float* r = set.row(probe[static_cast<std::size_t>(i)]);
    for (int t = 0; t < d; ++t) {
      const double xt = r[t] - mean[static_cast<std::size_t>(t)];
      for (int u = t; u < d; ++u)
        gram[static_cast<std::size_t>(t) * d + u] +=
            xt * (r[u] - mean[static_cast<std::size_t>(u)]);
    }
  }
  for (int t = 0; t < d; ++t)
    for (int u = 0; u < t; ++u)
      gram[static_cast<std::size_t>(t) * d + u] = gram[static_cast<std::size_t>(u) * d + t];

  auto ev = symmetric_eigenvalues(std::move(gram), d);
  std::vector<double> sigma;
  double total = 0.0;
  for (double v : ev) {
    const double s = std::sqrt(std::max(v, 0.0));
    sigma.push_back(s);
    total += s;
  }
  if (total < 1e-12) {
    out.effective_rank = 1.0;  // identical-vector limit
    return out;
  }
  double entropy = 0.0;
  for (double s : sigma) {
    const double p = s / total;
    if (p > 0.0) entropy -= p * std::log(p);
  }
  out.effective_rank = std::exp(entropy);
  return out;
}

EvalReport evaluate(const EmbeddingSet& train, const EmbeddingSet& test,
                    const Corpus& corpus, int k, int collapse_probe,
                    std::uint64_t seed) {
  const int n_classes = static_cast<int>(corpus.classes.size());
  auto knn = knn_scores(train, test, k, n_classes);

  EvalReport report;
  report.k_used = knn.k_used;
  report.k_clamped = knn.k_clamped;
  if (knn.k_clamped)
    report.notes = "k clamped to train set size " + std::to_string(knn.k_used);
  report.per_level["patch"] =
      compute_metrics(knn.scores, knn.predicted, test.labels, n_classes);
  for (Level level : {Level::Slide, Level::Patient}) {
    auto pooled = pool_scores(knn, test, corpus, level);
    report.per_level[level == Level::Slide ? "slide" : "patient"] =
        compute_metrics(pooled.scores, pooled.predicted, pooled.labels, n_classes);
  }
  report.collapse = collapse_diagnostics(
      test, std::min(collapse_probe, std::max(2, test.rows())), seed);
  return report;
}

namespace {

nlohmann::json slice_json(const MetricsSlice& slice) {
  nlohmann::json j;
  j["n"] = slice.n;
  j["accuracy"] = slice.accuracy;
  j["mca"] = slice.mca;
  j["per_class_accuracy"] = slice.per_class_accuracy;
  j["confusion"] = slice.confusion;
  if (slice.has_binary) {
    j["auroc"] = slice.auroc;
    j["auprc"] = slice.auprc;
    j["sensitivity"] = slice.sensitivity;
    j["specificity"] = slice.specificity;
  }
  if (!slice.undefined_metrics.empty()) j["undefined_metrics"] = slice.undefined_metrics;
  return j;
}

}  // namespace

std::string report_json(const EvalReport& report) {
  nlohmann::json j;
  for (const auto& [name, slice] : report.per_level) j["levels"][name] = slice_json(slice);
  j["collapse"]["mean_cosine"] = report.collapse.mean_cosine;
  j["collapse"]["effective_rank"] = report.collapse.effective_rank;
  j["collapse"]["probe_size"] = report.collapse.probe_size;
  j["k"] = report.k_used;
  j["k_clamped"] = report.k_clamped;
  j["subsample"] = report.subsample;
  if (!report.notes.empty()) j["notes"] = report.notes;
  return j.dump(2) + "\n";
}

std::string report_table(const EvalReport& report) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-8s %6s %8s %8s %8s\n", "level", "n", "acc",
                "mca", "auroc");
  out += buf;
  for (const auto& name : {"patch", "slide", "patient"}) {
    auto it = report.per_level.find(name);
    if (it == report.per_level.end()) continue;
    const auto& s = it->second;
    if (s.has_binary)
      std::snprintf(buf, sizeof(buf), "%-8s %6d %8.4f %8.4f %8.4f\n", name, s.n,
                    s.accuracy, s.mca, s.auroc);
    else
      std::snprintf(buf, sizeof(buf), "%-8s %6d %8.4f %8.4f %8s\n", name, s.n,
                    s.accuracy, s.mca, "-");
    out += buf;
  }
  std::snprintf(buf, sizeof(buf),
                "collapse: mean cosine %.4f, effective rank %.2f (probe %d)\n",
                report.collapse.mean_cosine, report.collapse.effective_rank,
                report.collapse.probe_size);
  out += buf;
  return out;
}

}  // namespace hidisc
