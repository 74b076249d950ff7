#include "hidisc/trainer.hpp"

#include "hidisc/rng.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <stdexcept>

namespace hidisc {

void EncoderConfig::validate() const {
  if (backbone != "tiny_cnn" && backbone != "mlp")
    throw std::invalid_argument("encoder config: unknown backbone '" + backbone + "'");
  if (widths.empty()) throw std::invalid_argument("encoder config: widths is empty");
  for (int w : widths)
    if (w < 1) throw std::invalid_argument("encoder config: widths must be positive");
  if (projection_dim < 1)
    throw std::invalid_argument("encoder config: projection_dim must be positive");
  if (patch_shape.h < 1 || patch_shape.w < 1 || patch_shape.c < 1)
    throw std::invalid_argument("encoder config: bad patch shape");
  if (backbone == "tiny_cnn") {
    const int min_size = 1 << widths.size();
    if (patch_shape.h < min_size || patch_shape.w < min_size)
      throw std::invalid_argument("encoder config: patch too small for " +
                                  std::to_string(widths.size()) + " conv blocks");
  }
}

namespace {

TensorPtr init_param(const Shape& shape, int fan_in, std::uint64_t seed, int layer) {
  StreamRng rng(seed, {StreamRng::hash_tag("init"), static_cast<std::uint64_t>(layer)});
  const double limit = std::sqrt(1.0 / fan_in);
  std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<float>(rng.uniform(-limit, limit));
  return Tensor::leaf(shape, std::move(data), true);
}

}  // namespace

Encoder::Encoder(EncoderConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  int layer = 0;
  auto push = [&](const std::string& name, TensorPtr p) {
    names_.push_back(name);
    params_.push_back(std::move(p));
  };
  if (cfg_.backbone == "tiny_cnn") {
    int c = cfg_.patch_shape.c;
    for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
      const int oc = cfg_.widths[i];
      const int fan_in = 3 * 3 * c;
      const std::string tag = "block" + std::to_string(i);
      push(tag + ".weight", init_param({fan_in, oc}, fan_in, cfg_.init_seed, layer++));
      push(tag + ".gamma", Tensor::full({oc}, 1.0f, true));
      push(tag + ".beta", Tensor::zeros({oc}, true));
      c = oc;
    }
    int h = cfg_.patch_shape.h, w = cfg_.patch_shape.w;
    for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
      h = (h - 1) / 2 + 1;
      w = (w - 1) / 2 + 1;
    }
    const int feat = h * w * c;
    push("proj.weight",
         init_param({feat, cfg_.projection_dim}, feat, cfg_.init_seed, layer++));
    push("proj.bias", Tensor::zeros({cfg_.projection_dim}, true));
  } else {
    int feat = cfg_.patch_shape.numel();
    for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
      const int out = cfg_.widths[i];
      const std::string tag = "layer" + std::to_string(i);
      push(tag + ".weight", init_param({feat, out}, feat, cfg_.init_seed, layer++));
      push(tag + ".bias", Tensor::zeros({out}, true));
      feat = out;
    }
    push("proj.weight",
         init_param({feat, cfg_.projection_dim}, feat, cfg_.init_seed, layer++));
    push("proj.bias", Tensor::zeros({cfg_.projection_dim}, true));
  }
}

TensorPtr Encoder::encode(Tape& tape, const TensorPtr& images) const {
  const auto& ps = cfg_.patch_shape;
  if (images->shape.size() != 4 || images->shape[1] != ps.h ||
      images->shape[2] != ps.w || images->shape[3] != ps.c)
    throw std::invalid_argument("encode: images " + shape_str(images->shape) +
                                " do not match patch shape [" + std::to_string(ps.h) +
                                ", " + std::to_string(ps.w) + ", " +
                                std::to_string(ps.c) + "]");
  const int b = images->shape[0];
  std::size_t pi = 0;
  auto next = [&] { return params_[pi++]; };

  TensorPtr x = images;
  if (cfg_.backbone == "tiny_cnn") {
    int h = ps.h, w = ps.w, c = ps.c;
    for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
      const int oc = cfg_.widths[i];
      auto cols = im2col(tape, x, b, h, w, c, 3, 3, 2, 1);
      auto weight = next();
      auto gamma = next();
      auto beta = next();
      auto conv = matmul(tape, cols, weight);
      x = relu(tape, add_bias(tape, col_scale(tape, conv, gamma), beta));
      h = (h - 1) / 2 + 1;
      w = (w - 1) / 2 + 1;
      c = oc;
    }
    x = reshape_view(tape, x, {b, h * w * c});
  } else {
    x = reshape_view(tape, x, {b, static_cast<int>(ps.numel())});
    for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
      auto weight = next();
      auto bias = next();
      x = relu(tape, add_bias(tape, matmul(tape, x, weight), bias));
    }
  }
  auto proj_w = next();
  auto proj_b = next();
  auto proj = add_bias(tape, matmul(tape, x, proj_w), proj_b);
  return l2_normalize(tape, proj);
}

void OptimConfig::validate() const {
  if (peak_lr <= 0.0) throw std::invalid_argument("optim config: peak_lr must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("optim config: negative weight_decay");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw std::invalid_argument("optim config: betas must lie in [0, 1)");
  if (eps <= 0.0) throw std::invalid_argument("optim config: eps must be positive");
  if (total_iterations < 0)
    throw std::invalid_argument("optim config: negative total_iterations");
  if (warmup_fraction <= 0.0 || warmup_fraction >= 1.0)
    throw std::invalid_argument("optim config: warmup_fraction must lie in (0, 1)");
}

double lr_at(std::int64_t iter, const OptimConfig& cfg) {
  if (iter < 0 || iter >= cfg.total_iterations)
    throw std::invalid_argument("lr_at: iteration " + std::to_string(iter) +
                                " outside [0, " + std::to_string(cfg.total_iterations) +
                                ")");
  const auto warmup = static_cast<std::int64_t>(cfg.warmup_fraction *
                                                static_cast<double>(cfg.total_iterations));
  if (iter < warmup)
    return cfg.peak_lr * static_cast<double>(iter) / static_cast<double>(warmup);
  const std::int64_t span = cfg.total_iterations - 1 - warmup;
  if (span <= 0) return cfg.peak_lr;
  const double progress = static_cast<double>(iter - warmup) / static_cast<double>(span);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(std::vector<TensorPtr> params, OptimConfig cfg)
    : params_(std::move(params)), cfg_(std::move(cfg)) {
  cfg_.validate();
  for (const auto& p : params_) {
    m_.emplace_back(p->data.size(), 0.0f);
    v_.emplace_back(p->data.size(), 0.0f);
  }
}

void AdamW::step(double lr, std::int64_t iter) {
  t_ += 1;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const double g = p.grad.empty() ? 0.0 : static_cast<double>(p.grad[i]);
      if (!std::isfinite(g))
        throw std::runtime_error("adamw: non-finite gradient in parameter " +
                                 std::to_string(k) + " at iteration " +
                                 std::to_string(iter));
      double param = static_cast<double>(p.data[i]) * (1.0 - lr * cfg_.weight_decay);
      const double m = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g;
      const double v = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g * g;
      m_[k][i] = static_cast<float>(m);
      v_[k][i] = static_cast<float>(v);
      param -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
      p.data[i] = static_cast<float>(param);
    }
    p.zero_grad();
  }
}

const char* const kMetricsHeader =
    "iteration,lr,loss_total,loss_patch,loss_slide,loss_patient,skipped_anchors";

std::string metrics_csv_line(const MetricsRow& row) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%d",
                static_cast<long long>(row.iteration), row.lr, row.loss_total,
                row.loss_patch, row.loss_slide, row.loss_patient, row.skipped_anchors);
  return buf;
}

Trainer::Trainer(const Corpus& corpus, SampleSpec sample, LossConfig loss,
                 EncoderConfig encoder, OptimConfig optim, std::uint64_t config_digest)
    : corpus_(corpus),
      sample_(std::move(sample)),
      loss_(std::move(loss)),
      encoder_(std::move(encoder)),
      optim_(std::move(optim)),
      adam_(encoder_.params(), optim_),
      digest_(config_digest) {
  sample_.validate();
  loss_.validate();
  optim_.validate();
  if (corpus_.patch_shape.h != encoder_.config().patch_shape.h ||
      corpus_.patch_shape.w != encoder_.config().patch_shape.w ||
      corpus_.patch_shape.c != encoder_.config().patch_shape.c)
    throw std::invalid_argument("trainer: corpus patch shape does not match encoder");
}

MetricsRow Trainer::step_once(std::int64_t iter) {
  const double lr = lr_at(iter, optim_);
  auto batch = sample_batch(corpus_, sample_, iter);
  MetricsRow row;
  row.iteration = iter;
  row.lr = lr;
  Tape tape;
  try {
    auto z = encoder_.encode(tape, batch.images);
    if (loss_.supcon) {
      int skipped = 0;
      auto total = supcon_loss(tape, z, batch.class_idx, loss_.tau, &skipped);
      row.loss_total = total->scalar_value();
      row.skipped_anchors = skipped;
      tape.backward(total);
    } else {
      auto breakdown = hidisc_loss(tape, z, batch, loss_);
      row.loss_total = breakdown.total_value();
      if (breakdown.per_level.count(Level::Patch))
        row.loss_patch = breakdown.level_value(Level::Patch);
      if (breakdown.per_level.count(Level::Slide))
        row.loss_slide = breakdown.level_value(Level::Slide);
      if (breakdown.per_level.count(Level::Patient))
        row.loss_patient = breakdown.level_value(Level::Patient);
      for (auto [level, count] : breakdown.skipped_anchor_count)
        row.skipped_anchors += count;
      tape.backward(breakdown.total);
    }
  } catch (const std::runtime_error& e) {
    std::set<int> patients;
    for (const auto& ref : batch.source_refs) patients.insert(ref.patient);
    std::string dump;
    for (int p : patients)
      dump += (dump.empty() ? "" : ", ") +
              corpus_.patients[static_cast<std::size_t>(p)].patient_id;
    throw std::runtime_error(std::string(e.what()) + " at iteration " +
                             std::to_string(iter) + " (batch patients: " + dump + ")");
  }
  adam_.step(lr, iter);
  return row;
}

void Trainer::run(const std::function<void(const MetricsRow&)>& sink,
                  const std::string& checkpoint_dir, std::int64_t checkpoint_every) {
  std::int64_t cadence = checkpoint_every;
  if (cadence <= 0) cadence = std::max<std::int64_t>(1, optim_.total_iterations / 10);
  const std::string path =
      checkpoint_dir.empty() ? "" : checkpoint_dir + "/checkpoint.bin";
  while (iteration_ < optim_.total_iterations) {
    auto row = step_once(iteration_);
    iteration_ += 1;
    if (sink) sink(row);
    if (!path.empty() && iteration_ % cadence == 0 &&
        iteration_ != optim_.total_iterations)
      save_checkpoint(path);
  }
  if (!path.empty()) save_checkpoint(path);
}

namespace {

constexpr char kCkptMagic[8] = {'H', 'I', 'D', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
}

void write_floats(std::ofstream& out, const std::vector<float>& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(float)));
}

void read_floats(std::ifstream& in, std::vector<float>& v) {
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(v.size() * sizeof(float)));
}

}  // namespace

void Trainer::save_checkpoint(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp);
    out.write(kCkptMagic, sizeof(kCkptMagic));
    write_pod(out, kCkptVersion);
    write_pod(out, digest_);
    write_pod(out, iteration_);
    const std::int64_t t = adam_.t();
    write_pod(out, t);
    const auto& params = encoder_.params();
    const auto& names = encoder_.param_names();
    auto& adam = const_cast<AdamW&>(adam_);
    write_pod(out, static_cast<std::uint32_t>(params.size()));
    for (std::size_t k = 0; k < params.size(); ++k) {
      const auto name = names[k];
      write_pod(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_pod(out, static_cast<std::uint32_t>(params[k]->shape.size()));
      for (int d : params[k]->shape) write_pod(out, static_cast<std::int32_t>(d));
      write_floats(out, params[k]->data);
      write_floats(out, adam.moment1()[k]);
      write_floats(out, adam.moment2()[k]);
    }
    if (!out) throw std::runtime_error("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void Trainer::restore_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  std::uint32_t version = 0;
  read_pod(in, version);
  if (version != kCkptVersion)
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version));
  std::uint64_t digest = 0;
  read_pod(in, digest);
  if (digest != digest_)
    throw DigestMismatchError("checkpoint config digest " + std::to_string(digest) +
                              " does not match configured digest " +
                              std::to_string(digest_));
  std::int64_t iter = 0, t = 0;
  read_pod(in, iter);
  read_pod(in, t);
  std::uint32_t count = 0;
  read_pod(in, count);
  const auto& params = encoder_.params();
  if (count != params.size())
    throw std::runtime_error("checkpoint holds " + std::to_string(count) +
                             " parameters, encoder has " +
                             std::to_string(params.size()));
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::uint32_t name_len = 0;
    read_pod(in, name_len);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (name != encoder_.param_names()[k])
      throw std::runtime_error("checkpoint parameter '" + name +
                               "' does not match encoder parameter '" +
                               encoder_.param_names()[k] + "'");
    std::uint32_t ndim = 0;
    read_pod(in, ndim);
    Shape shape(ndim);
    for (auto& d : shape) {
      std::int32_t v = 0;
      read_pod(in, v);
      d = v;
    }
    if (shape != params[k]->shape)
      throw std::runtime_error("checkpoint shape mismatch for '" + name + "'");
    read_floats(in, params[k]->data);
    read_floats(in, adam_.moment1()[k]);
    read_floats(in, adam_.moment2()[k]);
  }
  if (!in) throw std::runtime_error("truncated checkpoint " + path);
  iteration_ = iter;
  adam_.set_t(t);
}

}  // namespace hidisc
