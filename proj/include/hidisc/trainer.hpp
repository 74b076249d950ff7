#pragma once

#include "hidisc/loss.hpp"
#include "hidisc/sampler.hpp"
#include "hidisc/tensor.hpp"

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace hidisc {

struct EncoderConfig {
  std::string backbone = "tiny_cnn";  // "tiny_cnn" or "mlp"
  std::vector<int> widths = {8, 16, 32};
  int projection_dim = 128;
  PatchShape patch_shape{32, 32, 1};
  std::uint64_t init_seed = 0;

  void validate() const;
};

// Backbone plus a single affine projection to unit-norm embeddings. The
// tiny_cnn backbone is a stack of 3x3 stride-2 conv blocks (conv, per-channel
// affine, relu); mlp is a stack of affine+relu layers on flattened pixels.
// No batch normalization anywhere, so rows never couple across the batch.
class Encoder {
 public:
  explicit Encoder(EncoderConfig cfg);

  // images: [b, h, w, c] matching cfg.patch_shape. Returns [b, projection_dim]
  // with unit-norm rows.
  TensorPtr encode(Tape& tape, const TensorPtr& images) const;

  const EncoderConfig& config() const { return cfg_; }
  const std::vector<TensorPtr>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }

 private:
  EncoderConfig cfg_;
  std::vector<TensorPtr> params_;
  std::vector<std::string> names_;
};

struct OptimConfig {
  double peak_lr = 1e-3;
  double weight_decay = 1e-4;  // unstated upstream; surfaced here, not asserted
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t total_iterations = 2000;
  double warmup_fraction = 0.10;

  void validate() const;
};

// Linear warmup from 0 to peak over the first floor(warmup_fraction * total)
// iterations, then cosine decay to 0 at the final iteration.
double lr_at(std::int64_t iter, const OptimConfig& cfg);

// Decoupled weight decay applied before the adaptive step.
class AdamW {
 public:
  AdamW(std::vector<TensorPtr> params, OptimConfig cfg);

  // Consumes and clears param gradients. iter is reported in errors only.
  void step(double lr, std::int64_t iter);

  std::int64_t t() const { return t_; }

  // exposed for checkpoint serialization
  std::vector<std::vector<float>>& moment1() { return m_; }
  std::vector<std::vector<float>>& moment2() { return v_; }
  void set_t(std::int64_t t) { t_ = t; }

 private:
  std::vector<TensorPtr> params_;
  OptimConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  std::int64_t t_ = 0;
};

struct MetricsRow {
  std::int64_t iteration = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_patch = 0.0;
  double loss_slide = 0.0;
  double loss_patient = 0.0;
  int skipped_anchors = 0;
};

extern const char* const kMetricsHeader;
std::string metrics_csv_line(const MetricsRow& row);

// Raised when a checkpoint's recorded config digest does not match the
// configuration it is being restored into.
struct DigestMismatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Trainer {
 public:
  Trainer(const Corpus& corpus, SampleSpec sample, LossConfig loss,
          EncoderConfig encoder, OptimConfig optim, std::uint64_t config_digest = 0);

  // Runs from the current iteration to total_iterations. sink receives one
  // row per iteration. If checkpoint_dir is non-empty, checkpoints land there
  // every checkpoint_every iterations (0 means every 10% of the total) and at
  // the end.
  void run(const std::function<void(const MetricsRow&)>& sink,
           const std::string& checkpoint_dir = "",
           std::int64_t checkpoint_every = 0);

  // One optimizer step at the given batch counter; returns the metrics row.
  MetricsRow step_once(std::int64_t iter);

  std::int64_t iteration() const { return iteration_; }
  const Encoder& encoder() const { return encoder_; }
  const OptimConfig& optim_config() const { return optim_; }

  void save_checkpoint(const std::string& path) const;
  void restore_checkpoint(const std::string& path);

 private:
  const Corpus& corpus_;
  SampleSpec sample_;
  LossConfig loss_;
  Encoder encoder_;
  OptimConfig optim_;
  AdamW adam_;
  std::uint64_t digest_;
  std::int64_t iteration_ = 0;
};

}  // namespace hidisc
