#include "hidisc/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hidisc {

const char* aug_op_name(AugOp op) {
  switch (op) {
    case AugOp::HFlip: return "hflip";
    case AugOp::VFlip: return "vflip";
    case AugOp::GaussianNoise: return "gaussian_noise";
    case AugOp::IntensityJitter: return "intensity_jitter";
    case AugOp::GaussianBlur: return "gaussian_blur";
    case AugOp::RandomErasing: return "random_erasing";
    case AugOp::RandomResizedCrop: return "random_resized_crop";
  }
  return "?";
}

void AugPolicy::validate() const {
  if (per_op_probability < 0.0 || per_op_probability > 1.0)
    throw std::invalid_argument("augment policy: per-op probability outside [0, 1]");
  if (kind == AugKind::Strong && op_list.empty())
    throw std::invalid_argument("augment policy: strong policy with empty op list");
}

AugPolicy AugPolicy::none() {
  AugPolicy p;
  p.kind = AugKind::None;
  return p;
}

AugPolicy AugPolicy::weak(std::uint64_t seed_namespace) {
  AugPolicy p;
  p.kind = AugKind::Weak;
  p.seed_namespace = seed_namespace;
  return p;
}

AugPolicy AugPolicy::strong(std::uint64_t seed_namespace) {
  AugPolicy p;
  p.kind = AugKind::Strong;
  p.seed_namespace = seed_namespace;
  p.op_list = {AugOp::HFlip,          AugOp::VFlip,        AugOp::GaussianNoise,
               AugOp::IntensityJitter, AugOp::GaussianBlur, AugOp::RandomErasing,
               AugOp::RandomResizedCrop};
  return p;
}

namespace {

std::size_t at(const PatchShape& s, int y, int x, int c) {
  return (static_cast<std::size_t>(y) * s.w + x) * s.c + c;
}

void hflip(std::vector<float>& p, const PatchShape& s) {
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w / 2; ++x)
      for (int c = 0; c < s.c; ++c)
        std::swap(p[at(s, y, x, c)], p[at(s, y, s.w - 1 - x, c)]);
}

void vflip(std::vector<float>& p, const PatchShape& s) {
  for (int y = 0; y < s.h / 2; ++y)
    for (int x = 0; x < s.w; ++x)
      for (int c = 0; c < s.c; ++c)
        std::swap(p[at(s, y, x, c)], p[at(s, s.h - 1 - y, x, c)]);
}

void clamp01(std::vector<float>& p) {
  for (auto& v : p) v = std::clamp(v, 0.0f, 1.0f);
}

void gaussian_noise(std::vector<float>& p, StreamRng& rng) {
  constexpr double kSigma = 0.05;
  for (auto& v : p) v = static_cast<float>(v + kSigma * rng.normal());
  clamp01(p);
}

void intensity_jitter(std::vector<float>& p, StreamRng& rng) {
  double brightness = rng.uniform(-0.2, 0.2);
  double contrast = rng.uniform(0.8, 1.2);
  double mean = 0.0;
  for (float v : p) mean += v;
  mean /= static_cast<double>(p.size());
  for (auto& v : p)
    v = static_cast<float>(mean + contrast * (v - mean) + brightness);
  clamp01(p);
}

// 5x5 separable kernel, sigma 1, clamp-to-edge padding.
void gaussian_blur(std::vector<float>& p, const PatchShape& s) {
  double k[5];
  double norm = 0.0;
  for (int i = 0; i < 5; ++i) {
    double d = i - 2;
    k[i] = std::exp(-0.5 * d * d);
    norm += k[i];
  }
  for (double& v : k) v /= norm;

  std::vector<float> tmp(p.size());
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      for (int c = 0; c < s.c; ++c) {
        double acc = 0.0;
        for (int i = 0; i < 5; ++i)
          acc += k[i] * p[at(s, y, std::clamp(x + i - 2, 0, s.w - 1), c)];
        tmp[at(s, y, x, c)] = static_cast<float>(acc);
      }
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      for (int c = 0; c < s.c; ++c) {
        double acc = 0.0;
        for (int i = 0; i < 5; ++i)
          acc += k[i] * tmp[at(s, std::clamp(y + i - 2, 0, s.h - 1), x, c)];
        p[at(s, y, x, c)] = static_cast<float>(acc);
      }
}

float bilinear(const std::vector<float>& p, const PatchShape& s, double y, double x, int c) {
  int y0 = std::clamp(static_cast<int>(std::floor(y)), 0, s.h - 1);
  int x0 = std::clamp(static_cast<int>(std::floor(x)), 0, s.w - 1);
  int y1 = std::min(y0 + 1, s.h - 1);
  int x1 = std::min(x0 + 1, s.w - 1);
  double fy = y - y0, fx = x - x0;
  double top = (1.0 - fx) * p[at(s, y0, x0, c)] + fx * p[at(s, y0, x1, c)];
  double bot = (1.0 - fx) * p[at(s, y1, x0, c)] + fx * p[at(s, y1, x1, c)];
  return static_cast<float>((1.0 - fy) * top + fy * bot);
}

// Crop a random sub-rectangle covering 50-100% of the area, then resample it
// back to the full patch size bilinearly.
void random_resized_crop(std::vector<float>& p, const PatchShape& s, StreamRng& rng) {
  double area_frac = rng.uniform(0.5, 1.0);
  double aspect = std::exp(rng.uniform(std::log(0.75), std::log(4.0 / 3.0)));
  double ch = std::sqrt(area_frac / aspect) * s.h;
  double cw = std::sqrt(area_frac * aspect) * s.w;
  ch = std::clamp(ch, 1.0, static_cast<double>(s.h));
  cw = std::clamp(cw, 1.0, static_cast<double>(s.w));
  double y0 = rng.uniform(0.0, s.h - ch);
  double x0 = rng.uniform(0.0, s.w - cw);
  std::vector<float> out(p.size());
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      double sy = y0 + (ch - 1.0) * (s.h > 1 ? static_cast<double>(y) / (s.h - 1) : 0.0);
      double sx = x0 + (cw - 1.0) * (s.w > 1 ? static_cast<double>(x) / (s.w - 1) : 0.0);
      for (int c = 0; c < s.c; ++c) out[at(s, y, x, c)] = bilinear(p, s, sy, sx, c);
    }
  p = std::move(out);
}

void apply_op(AugOp op, std::vector<float>& p, const PatchShape& s, StreamRng& rng) {
  switch (op) {
    case AugOp::HFlip: hflip(p, s); break;
    case AugOp::VFlip: vflip(p, s); break;
    case AugOp::GaussianNoise: gaussian_noise(p, rng); break;
    case AugOp::IntensityJitter: intensity_jitter(p, rng); break;
    case AugOp::GaussianBlur: gaussian_blur(p, s); break;
    case AugOp::RandomErasing: p = erase_region(p, s, 0.02, 0.2, 0.0f, rng); break;
    case AugOp::RandomResizedCrop: random_resized_crop(p, s, rng); break;
  }
}

}  // namespace

std::vector<float> augment(const std::vector<float>& patch, const PatchShape& shape,
                           const AugPolicy& policy, const StreamKey& key,
                           std::vector<std::uint8_t>* activations) {
  policy.validate();
  if (static_cast<std::int64_t>(patch.size()) != shape.numel())
    throw std::invalid_argument("augment: patch has " + std::to_string(patch.size()) +
                                " values, expected " + std::to_string(shape.numel()));
  if (activations) activations->clear();
  std::vector<float> out = patch;
  if (policy.kind == AugKind::None) return out;

  StreamRng rng(policy.seed_namespace,
                {StreamRng::hash_tag("augment"), key.epoch, key.sample_index, key.replica});
  if (policy.kind == AugKind::Weak) {
    for (AugOp op : {AugOp::HFlip, AugOp::VFlip}) {
      bool on = rng.bernoulli(0.5);
      if (activations) activations->push_back(on ? 1 : 0);
      if (on) apply_op(op, out, shape, rng);
    }
    return out;
  }
  for (AugOp op : policy.op_list) {
    bool on = rng.bernoulli(policy.per_op_probability);
    if (activations) activations->push_back(on ? 1 : 0);
    if (on) apply_op(op, out, shape, rng);
  }
  return out;
}

std::vector<float> erase_region(const std::vector<float>& patch, const PatchShape& shape,
                                double area_lo, double area_hi, float value,
                                StreamRng& rng) {
  if (!(area_lo > 0.0 && area_hi < 1.0 && area_lo <= area_hi))
    throw std::invalid_argument("erase_region: area range must be a subset of (0, 1)");
  if (static_cast<std::int64_t>(patch.size()) != shape.numel())
    throw std::invalid_argument("erase_region: patch does not match shape");

  const double total = static_cast<double>(shape.h) * shape.w;
  const double lo = area_lo * total, hi = area_hi * total;
  // Pick uniformly among the realizable rectangles closest to the target range.
  double best = 1e300;
  std::vector<std::pair<int, int>> candidates;
  for (int eh = 1; eh <= shape.h; ++eh)
    for (int ew = 1; ew <= shape.w; ++ew) {
      double area = static_cast<double>(eh) * ew;
      double dist = std::max({lo - area, area - hi, 0.0});
      if (dist < best - 1e-9) {
        best = dist;
        candidates.clear();
      }
      if (dist <= best + 1e-9) candidates.emplace_back(eh, ew);
    }
  auto [eh, ew] = candidates[static_cast<std::size_t>(rng.uniform_int(candidates.size()))];
  int y0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(shape.h - eh + 1)));
  int x0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(shape.w - ew + 1)));

  std::vector<float> out = patch;
  for (int y = y0; y < y0 + eh; ++y)
    for (int x = x0; x < x0 + ew; ++x)
      for (int c = 0; c < shape.c; ++c) out[at(shape, y, x, c)] = value;
  return out;
}

}  // namespace hidisc
