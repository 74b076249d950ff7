#pragma once

#include "hidisc/corpus.hpp"
#include "hidisc/trainer.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace hidisc {

struct EmbeddingSet {
  std::vector<float> vectors;  // [rows, dim] row-major, unit-norm rows
  int dim = 0;
  std::vector<PatchRef> refs;
  std::vector<int> labels;
  std::string split_tag;

  int rows() const { return static_cast<int>(labels.size()); }
  const float* row(int i) const {
    return vectors.data() + static_cast<std::size_t>(i) * dim;
  }
  void validate() const;  // consistent sizes, rows unit-norm within 1e-4
};

// Frozen-encoder embeddings for a corpus split, no augmentation. When
// per_slide_subsample > 0, at most that many patches per slide are used,
// chosen by seeded draw; 0 means every patch. Chunks of rows may be encoded
// by parallel workers; each chunk writes its own slots, so the result is
// bit-identical for any worker count.
EmbeddingSet embed_corpus(const Encoder& encoder, const Corpus& corpus,
                          int per_slide_subsample, std::uint64_t seed,
                          const std::string& split_tag = "", int workers = 1);

// f32 binary [rows x dim] plus a JSON sidecar with refs, labels, and digest.
void export_embeddings(const EmbeddingSet& set, const Corpus& corpus,
                       const std::string& path_prefix, std::uint64_t config_digest);

struct KnnResult {
  std::vector<std::vector<double>> scores;  // [test rows][classes], sums to 1
  std::vector<int> predicted;
  int k_used = 0;
  bool k_clamped = false;
};

// Exact cosine kNN. Neighbor ties break by ascending train index, argmax
// ties by ascending class index. k larger than the train set is clamped
// with k_clamped set.
KnnResult knn_scores(const EmbeddingSet& train, const EmbeddingSet& test, int k,
                     int n_classes);

struct PooledScores {
  std::vector<std::string> group_ids;       // sorted ancestry keys
  std::vector<std::vector<double>> scores;  // mean of member patch scores
  std::vector<int> predicted;
  std::vector<int> labels;
};

// Average pooling of patch score vectors by slide or patient ancestry.
PooledScores pool_scores(const KnnResult& knn, const EmbeddingSet& test,
                         const Corpus& corpus, Level level);

struct MetricsSlice {
  int n = 0;
  double accuracy = 0.0;
  double mca = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<std::vector<int>> confusion;  // [true class][predicted class]
  bool has_binary = false;  // AUROC/AUPRC/sens/spec populated
  double auroc = 0.0;
  double auprc = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  std::string undefined_metrics;  // reason when binary metrics are undefined
};

// scores[i][c] ranks example i for class c; binary rank metrics use class 1
// as positive. Single-class input leaves AUROC/AUPRC undefined (reason
// recorded) while the confusion-derived metrics are still reported.
MetricsSlice compute_metrics(const std::vector<std::vector<double>>& scores,
                             const std::vector<int>& predicted,
                             const std::vector<int>& labels, int n_classes);

// Mann-Whitney AUROC with ties counted one half.
double auroc_rank(const std::vector<double>& scores, const std::vector<int>& labels);
// Average precision by precision-recall step integration.
double auprc_step(const std::vector<double>& scores, const std::vector<int>& labels);

struct CollapseDiagnostics {
  double mean_cosine = 0.0;     // mean off-diagonal cosine over the probe
  double effective_rank = 0.0;  // exp(entropy of normalized singular values)
  int probe_size = 0;
};

// Probe is a seeded subset of the rows (all rows when probe_size >= rows).
// Singular values are taken from the centered probe matrix, which removes
// one dimension; an identical-vector probe is reported as rank one.
CollapseDiagnostics collapse_diagnostics(const EmbeddingSet& set, int probe_size,
                                         std::uint64_t seed = 0);

// Eigenvalues of a symmetric d x d matrix, ascending (cyclic Jacobi).
std::vector<double> symmetric_eigenvalues(std::vector<double> a, int d);

struct EvalReport {
  std::map<std::string, MetricsSlice> per_level;  // patch, slide, patient
  CollapseDiagnostics collapse;
  int k_used = 0;
  bool k_clamped = false;
  int subsample = 0;
  std::string notes;
};

EvalReport evaluate(const EmbeddingSet& train, const EmbeddingSet& test,
                    const Corpus& corpus, int k, int collapse_probe = 256,
                    std::uint64_t seed = 0);

std::string report_json(const EvalReport& report);
std::string report_table(const EvalReport& report);

}  // namespace hidisc
