#include "hidisc/loss.hpp"

#include <cmath>
#include <stdexcept>

namespace hidisc {

void LossConfig::validate() const {
  if (tau <= 0.0) throw std::invalid_argument("loss config: tau must be positive");
  if (lambda_patch < 0.0 || lambda_slide < 0.0 || lambda_patient < 0.0)
    throw std::invalid_argument("loss config: negative lambda");
  if (!supcon && !enable_patch && !enable_slide && !enable_patient)
    throw std::invalid_argument("loss config: no level enabled and supcon not selected");
}

bool LossConfig::enabled(Level level) const {
  switch (level) {
    case Level::Patch: return enable_patch;
    case Level::Slide: return enable_slide;
    case Level::Patient: return enable_patient;
  }
  return false;
}

double LossConfig::lambda(Level level) const {
  switch (level) {
    case Level::Patch: return lambda_patch;
    case Level::Slide: return lambda_slide;
    case Level::Patient: return lambda_patient;
  }
  return 0.0;
}

LossConfig LossConfig::patch_only() {
  LossConfig c;
  c.enable_slide = c.enable_patient = false;
  return c;
}

LossConfig LossConfig::slide_only() {
  LossConfig c;
  c.enable_patient = false;
  return c;
}

LossConfig LossConfig::patient_all() { return LossConfig{}; }

LossConfig LossConfig::supcon_only() {
  LossConfig c;
  c.enable_patch = c.enable_slide = c.enable_patient = false;
  c.supcon = true;
  return c;
}

namespace {

// Shared forward/backward for the contrastive form; HiDisc levels and SupCon
// differ only in how the positive sets are built.
TensorPtr contrastive_loss(Tape& tape, const TensorPtr& z,
                           const std::vector<std::vector<int>>& positives, double tau,
                           int* skipped) {
  if (tau <= 0.0) throw std::invalid_argument("contrastive loss: tau must be positive");
  if (z->shape.size() != 2)
    throw std::invalid_argument("contrastive loss: embeddings must be [N, d], got " +
                                shape_str(z->shape));
  const int n = z->shape[0], d = z->shape[1];
  if (n < 2) throw std::invalid_argument("contrastive loss: need at least 2 rows");
  if (static_cast<int>(positives.size()) != n)
    throw std::invalid_argument("contrastive loss: positive sets do not match rows");
  for (int i = 0; i < n; ++i) {
    const float* row = z->data.data() + static_cast<std::size_t>(i) * d;
    double sq = 0.0;
    for (int j = 0; j < d; ++j) sq += static_cast<double>(row[j]) * row[j];
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-4)
      throw std::invalid_argument("contrastive loss: row " + std::to_string(i) +
                                  " is not unit-norm (norm " + std::to_string(std::sqrt(sq)) +
                                  ")");
    for (int p : positives[static_cast<std::size_t>(i)])
      if (p == i || p < 0 || p >= n)
        throw std::invalid_argument("contrastive loss: invalid positive index " +
                                    std::to_string(p) + " for anchor " + std::to_string(i));
  }

  // Similarities and the softmax over each anchor's candidate set A(i).
  std::vector<double> sims(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      const float* zi = z->data.data() + static_cast<std::size_t>(i) * d;
      const float* zj = z->data.data() + static_cast<std::size_t>(j) * d;
      for (int t = 0; t < d; ++t) acc += static_cast<double>(zi[t]) * zj[t];
      sims[static_cast<std::size_t>(i) * n + j] = acc / tau;
    }

  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * n, 0.0);
  double loss = 0.0;
  int n_skipped = 0;
  for (int i = 0; i < n; ++i) {
    double mx = -1e300;
    for (int j = 0; j < n; ++j)
      if (j != i) mx = std::max(mx, sims[static_cast<std::size_t>(i) * n + j]);
    double denom = 0.0;
    for (int j = 0; j < n; ++j)
      if (j != i) denom += std::exp(sims[static_cast<std::size_t>(i) * n + j] - mx);
    const double lse = mx + std::log(denom);
    for (int j = 0; j < n; ++j)
      if (j != i)
        (*probs)[static_cast<std::size_t>(i) * n + j] =
            std::exp(sims[static_cast<std::size_t>(i) * n + j] - lse);
    const auto& pos = positives[static_cast<std::size_t>(i)];
    if (pos.empty()) {
      ++n_skipped;
      continue;
    }
    double anchor = 0.0;
    for (int p : pos) anchor += sims[static_cast<std::size_t>(i) * n + p] - lse;
    loss -= anchor / static_cast<double>(pos.size());
  }
  if (skipped) *skipped = n_skipped;
  if (!std::isfinite(loss))
    throw std::runtime_error("contrastive loss: non-finite value");

  auto node = Tensor::leaf({1}, {static_cast<float>(loss)});
  node->has_shadow = true;
  node->shadow = loss;
  if (z->requires_grad) {
    node->requires_grad = true;
    node->parents = {z};
    auto pos_copy = std::make_shared<std::vector<std::vector<int>>>(positives);
    node->backward_fn = [n, d, tau, probs, pos_copy](Tensor& out) {
      auto& z = out.parents[0];
      z->ensure_grad();
      const double gout = out.grad[0];
      std::vector<double> dz(static_cast<std::size_t>(n) * d, 0.0);
      std::vector<double> coeff(static_cast<std::size_t>(n), 0.0);
      for (int i = 0; i < n; ++i) {
        const auto& pos = (*pos_copy)[static_cast<std::size_t>(i)];
        if (pos.empty()) continue;
        const double inv = 1.0 / static_cast<double>(pos.size());
        for (int j = 0; j < n; ++j) coeff[static_cast<std::size_t>(j)] = 0.0;
        for (int j = 0; j < n; ++j)
          if (j != i) coeff[static_cast<std::size_t>(j)] = (*probs)[static_cast<std::size_t>(i) * n + j];
        for (int p : pos) coeff[static_cast<std::size_t>(p)] -= inv;
        for (int j = 0; j < n; ++j) {
          const double g = coeff[static_cast<std::size_t>(j)];
          if (g == 0.0) continue;
          const float* zi = z->data.data() + static_cast<std::size_t>(i) * d;
          const float* zj = z->data.data() + static_cast<std::size_t>(j) * d;
          for (int t = 0; t < d; ++t) {
            dz[static_cast<std::size_t>(i) * d + t] += g * zj[t];
            dz[static_cast<std::size_t>(j) * d + t] += g * zi[t];
          }
        }
      }
      const double inv_tau = gout / tau;
      for (std::size_t t = 0; t < dz.size(); ++t)
        z->grad[t] += static_cast<float>(dz[t] * inv_tau);
    };
  }
  return tape.record(std::move(node));
}

}  // namespace

TensorPtr level_loss(Tape& tape, const TensorPtr& z,
                     const std::vector<std::vector<int>>& positives, double tau,
                     int* skipped) {
  return contrastive_loss(tape, z, positives, tau, skipped);
}

LossBreakdown hidisc_loss(Tape& tape, const TensorPtr& z, const HierBatch& batch,
                          const LossConfig& cfg) {
  cfg.validate();
  if (cfg.supcon)
    throw std::invalid_argument("hidisc_loss: config selects supcon, use supcon_loss");
  if (z->shape.size() != 2 || z->shape[0] != batch.rows())
    throw std::invalid_argument("hidisc_loss: embeddings " + shape_str(z->shape) +
                                " do not match batch rows " + std::to_string(batch.rows()));
  LossBreakdown out;
  TensorPtr total;
  for (Level level : {Level::Patch, Level::Slide, Level::Patient}) {
    if (!cfg.enabled(level)) continue;
    int skipped = 0;
    auto level_value = level_loss(tape, z, positive_sets(batch, level), cfg.tau, &skipped);
    out.per_level[level] = level_value;
    out.skipped_anchor_count[level] = skipped;
    auto weighted = scale(tape, level_value, static_cast<float>(cfg.lambda(level)));
    total = total ? add(tape, total, weighted) : weighted;
  }
  out.total = total;
  return out;
}

TensorPtr supcon_loss(Tape& tape, const TensorPtr& z, const std::vector<int>& class_labels,
                      double tau, int* skipped) {
  if (z->shape.size() != 2 || z->shape[0] != static_cast<int>(class_labels.size()))
    throw std::invalid_argument("supcon_loss: labels do not match embedding rows");
  const int n = static_cast<int>(class_labels.size());
  std::vector<std::vector<int>> positives(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (j != i && class_labels[static_cast<std::size_t>(i)] ==
                        class_labels[static_cast<std::size_t>(j)])
        positives[static_cast<std::size_t>(i)].push_back(j);
  return contrastive_loss(tape, z, positives, tau, skipped);
}

}  // namespace hidisc
