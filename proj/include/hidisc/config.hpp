#pragma once

#include "hidisc/corpus.hpp"
#include "hidisc/loss.hpp"
#include "hidisc/sampler.hpp"
#include "hidisc/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace hidisc {

struct EvalSettings {
  int k = 10;  // unreported upstream; exposed here
  int subsample = 400;
  double test_fraction = 0.3;
  std::uint64_t seed = 0;
  int collapse_probe = 256;

  void validate() const;
};

// Axis sweep description for the ablate subcommand. Values are free-form
// JSON fragments interpreted per axis.
struct AblationPlan {
  std::string axis;                 // variant, lambda, lr, batch, augment, iterations
  std::vector<std::string> values;  // serialized JSON per value
  std::vector<std::uint64_t> seeds;
};

struct RunConfig {
  std::string run_name = "run";
  std::string out_dir = "runs/run";
  std::string manifest;  // empty means synthetic corpus
  SynthConfig synth;
  std::string variant = "hidisc-patient";
  SampleSpec sample;
  LossConfig loss;
  EncoderConfig encoder;
  OptimConfig optim;
  EvalSettings eval;
  bool has_ablation = false;
  AblationPlan ablation;

  void validate() const;  // throws invalid_argument naming the field path
};

// Parsing applies the variant preset first (loss levels and batch counts per
// the standard variants), then explicit sample/loss fields override it.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);

// Sorted-key single-line serialization of every effective field.
std::string canonical_config(const RunConfig& cfg);
// FNV-1a over the canonical serialization.
std::uint64_t config_digest(const RunConfig& cfg);

// Applies a variant name to loss enables and batch composition.
void apply_variant(RunConfig& cfg, const std::string& variant);

}  // namespace hidisc
