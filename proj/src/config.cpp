#include "hidisc/config.hpp"

#include "json.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace hidisc {

using nlohmann::json;

void EvalSettings::validate() const {
  if (k < 1) throw std::invalid_argument("eval.k must be >= 1");
  if (subsample < 0) throw std::invalid_argument("eval.subsample must be >= 0");
  if (test_fraction <= 0.0 || test_fraction >= 1.0)
    throw std::invalid_argument("eval.test_fraction must lie in (0, 1)");
  if (collapse_probe < 2)
    throw std::invalid_argument("eval.collapse_probe must be >= 2");
}

void RunConfig::validate() const {
  if (run_name.empty()) throw std::invalid_argument("run_name must not be empty");
  if (out_dir.empty()) throw std::invalid_argument("out_dir must not be empty");
  if (manifest.empty()) synth.validate();
  try {
    sample.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string("sample: ") + e.what());
  }
  try {
    loss.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string("loss: ") + e.what());
  }
  encoder.validate();
  optim.validate();
  eval.validate();
  if (manifest.empty() && !(encoder.patch_shape == synth.patch_shape))
    throw std::invalid_argument("encoder.patch_shape must match the corpus patch shape");
  if (has_ablation) {
    static const std::set<std::string> axes = {"variant", "lambda",  "lr",
                                              "batch",   "augment", "iterations"};
    if (!axes.count(ablation.axis))
      throw std::invalid_argument("ablation.axis '" + ablation.axis + "' is unknown");
    if (ablation.values.empty())
      throw std::invalid_argument("ablation.values must not be empty");
    if (ablation.seeds.empty())
      throw std::invalid_argument("ablation.seeds must not be empty");
  }
}

void apply_variant(RunConfig& cfg, const std::string& variant) {
  if (variant == "hidisc-patch") {
    cfg.loss = LossConfig::patch_only();
    cfg.sample.n_a = 2;
    cfg.sample.n_s = 1;
    cfg.sample.n_p = 1;
  } else if (variant == "hidisc-slide") {
    cfg.loss = LossConfig::slide_only();
    cfg.sample.n_a = 2;
    cfg.sample.n_s = 2;
    cfg.sample.n_p = 1;
  } else if (variant == "hidisc-patient") {
    cfg.loss = LossConfig::patient_all();
    cfg.sample.n_a = 2;
    cfg.sample.n_s = 2;
    cfg.sample.n_p = 2;
  } else if (variant == "supcon") {
    cfg.loss = LossConfig::supcon_only();
    cfg.sample.n_a = 2;
    cfg.sample.n_s = 2;
    cfg.sample.n_p = 2;
  } else {
    throw std::invalid_argument("variant '" + variant + "' is unknown");
  }
  cfg.variant = variant;
}

namespace {

void check_keys(const json& obj, const std::string& path,
                const std::set<std::string>& allowed) {
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key))
      throw std::invalid_argument("unknown field '" + path + key + "'");
}

template <typename T>
void read_field(const json& obj, const std::string& path, const std::string& key,
                T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument("field '" + path + key + "' has the wrong type");
  }
}

AugPolicy parse_policy(const std::string& name, std::uint64_t seed,
                       const std::string& path) {
  if (name == "none") {
    auto p = AugPolicy::none();
    p.seed_namespace = seed;
    return p;
  }
  if (name == "weak") return AugPolicy::weak(seed);
  if (name == "strong") return AugPolicy::strong(seed);
  throw std::invalid_argument("field '" + path + "' must be none, weak, or strong");
}

const char* policy_name(const AugPolicy& policy) {
  switch (policy.kind) {
    case AugKind::None: return "none";
    case AugKind::Weak: return "weak";
    case AugKind::Strong: return "strong";
  }
  return "none";
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw std::invalid_argument("config root must be an object");
  check_keys(root, "", {"run_name", "out_dir", "corpus", "variant", "sample", "loss",
                        "encoder", "optim", "eval", "ablation"});

  RunConfig cfg;
  read_field(root, "", "run_name", cfg.run_name);
  read_field(root, "", "out_dir", cfg.out_dir);

  if (root.contains("corpus")) {
    const auto& corpus = root.at("corpus");
    check_keys(corpus, "corpus.", {"manifest", "synthetic"});
    if (corpus.contains("manifest") && corpus.contains("synthetic"))
      throw std::invalid_argument("corpus: give either manifest or synthetic, not both");
    read_field(corpus, "corpus.", "manifest", cfg.manifest);
    if (corpus.contains("synthetic")) {
      const auto& synth = corpus.at("synthetic");
      check_keys(synth, "corpus.synthetic.",
                 {"n_classes", "patients_per_class", "slides_per_patient",
                  "patches_per_slide", "sigma_class", "sigma_patient", "sigma_slide",
                  "sigma_patch", "patch_h", "patch_w", "patch_c", "seed"});
      read_field(synth, "corpus.synthetic.", "n_classes", cfg.synth.n_classes);
      read_field(synth, "corpus.synthetic.", "patients_per_class",
                 cfg.synth.patients_per_class);
      read_field(synth, "corpus.synthetic.", "slides_per_patient",
                 cfg.synth.slides_per_patient);
      read_field(synth, "corpus.synthetic.", "patches_per_slide",
                 cfg.synth.patches_per_slide);
      read_field(synth, "corpus.synthetic.", "sigma_class", cfg.synth.sigma_class);
      read_field(synth, "corpus.synthetic.", "sigma_patient", cfg.synth.sigma_patient);
      read_field(synth, "corpus.synthetic.", "sigma_slide", cfg.synth.sigma_slide);
      read_field(synth, "corpus.synthetic.", "sigma_patch", cfg.synth.sigma_patch);
      read_field(synth, "corpus.synthetic.", "patch_h", cfg.synth.patch_shape.h);
      read_field(synth, "corpus.synthetic.", "patch_w", cfg.synth.patch_shape.w);
      read_field(synth, "corpus.synthetic.", "patch_c", cfg.synth.patch_shape.c);
      read_field(synth, "corpus.synthetic.", "seed", cfg.synth.seed);
    }
  }

  std::string variant = cfg.variant;
  read_field(root, "", "variant", variant);
  apply_variant(cfg, variant);

  std::string augment = "strong";
  if (root.contains("sample")) {
    const auto& sample = root.at("sample");
    check_keys(sample, "sample.", {"n", "n_s", "n_p", "n_a", "augment", "seed"});
    read_field(sample, "sample.", "n", cfg.sample.n);
    read_field(sample, "sample.", "n_s", cfg.sample.n_s);
    read_field(sample, "sample.", "n_p", cfg.sample.n_p);
    read_field(sample, "sample.", "n_a", cfg.sample.n_a);
    read_field(sample, "sample.", "seed", cfg.sample.seed);
    read_field(sample, "sample.", "augment", augment);
  }
  cfg.sample.policy = parse_policy(augment, cfg.sample.seed, "sample.augment");

  if (root.contains("loss")) {
    const auto& loss = root.at("loss");
    check_keys(loss, "loss.",
               {"tau", "lambda_patch", "lambda_slide", "lambda_patient"});
    read_field(loss, "loss.", "tau", cfg.loss.tau);
    read_field(loss, "loss.", "lambda_patch", cfg.loss.lambda_patch);
    read_field(loss, "loss.", "lambda_slide", cfg.loss.lambda_slide);
    read_field(loss, "loss.", "lambda_patient", cfg.loss.lambda_patient);
  }

  if (root.contains("encoder")) {
    const auto& enc = root.at("encoder");
    check_keys(enc, "encoder.", {"backbone", "widths", "projection_dim", "init_seed"});
    read_field(enc, "encoder.", "backbone", cfg.encoder.backbone);
    read_field(enc, "encoder.", "widths", cfg.encoder.widths);
    read_field(enc, "encoder.", "projection_dim", cfg.encoder.projection_dim);
    read_field(enc, "encoder.", "init_seed", cfg.encoder.init_seed);
  }
  if (cfg.manifest.empty()) cfg.encoder.patch_shape = cfg.synth.patch_shape;

  if (root.contains("optim")) {
    const auto& opt = root.at("optim");
    check_keys(opt, "optim.",
               {"peak_lr", "weight_decay", "beta1", "beta2", "eps",
                "total_iterations", "warmup_fraction"});
    read_field(opt, "optim.", "peak_lr", cfg.optim.peak_lr);
    read_field(opt, "optim.", "weight_decay", cfg.optim.weight_decay);
    read_field(opt, "optim.", "beta1", cfg.optim.beta1);
    read_field(opt, "optim.", "beta2", cfg.optim.beta2);
    read_field(opt, "optim.", "eps", cfg.optim.eps);
    read_field(opt, "optim.", "total_iterations", cfg.optim.total_iterations);
    read_field(opt, "optim.", "warmup_fraction", cfg.optim.warmup_fraction);
  }

  if (root.contains("eval")) {
    const auto& ev = root.at("eval");
    check_keys(ev, "eval.",
               {"k", "subsample", "test_fraction", "seed", "collapse_probe"});
    read_field(ev, "eval.", "k", cfg.eval.k);
    read_field(ev, "eval.", "subsample", cfg.eval.subsample);
    read_field(ev, "eval.", "test_fraction", cfg.eval.test_fraction);
    read_field(ev, "eval.", "seed", cfg.eval.seed);
    read_field(ev, "eval.", "collapse_probe", cfg.eval.collapse_probe);
  }

  if (root.contains("ablation")) {
    const auto& ab = root.at("ablation");
    check_keys(ab, "ablation.", {"axis", "values", "seeds"});
    cfg.has_ablation = true;
    read_field(ab, "ablation.", "axis", cfg.ablation.axis);
    if (!ab.contains("values") || !ab.at("values").is_array())
      throw std::invalid_argument("field 'ablation.values' must be an array");
    for (const auto& v : ab.at("values")) cfg.ablation.values.push_back(v.dump());
    read_field(ab, "ablation.", "seeds", cfg.ablation.seeds);
  }

  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

std::string canonical_config(const RunConfig& cfg) {
  json j;
  j["run_name"] = cfg.run_name;
  j["out_dir"] = cfg.out_dir;
  j["variant"] = cfg.variant;
  if (cfg.manifest.empty()) {
    j["corpus"]["synthetic"] = {{"n_classes", cfg.synth.n_classes},
                                {"patients_per_class", cfg.synth.patients_per_class},
                                {"slides_per_patient", cfg.synth.slides_per_patient},
                                {"patches_per_slide", cfg.synth.patches_per_slide},
                                {"sigma_class", cfg.synth.sigma_class},
                                {"sigma_patient", cfg.synth.sigma_patient},
                                {"sigma_slide", cfg.synth.sigma_slide},
                                {"sigma_patch", cfg.synth.sigma_patch},
                                {"patch_h", cfg.synth.patch_shape.h},
                                {"patch_w", cfg.synth.patch_shape.w},
                                {"patch_c", cfg.synth.patch_shape.c},
                                {"seed", cfg.synth.seed}};
  } else {
    j["corpus"]["manifest"] = cfg.manifest;
  }
  j["sample"] = {{"n", cfg.sample.n},
                 {"n_s", cfg.sample.n_s},
                 {"n_p", cfg.sample.n_p},
                 {"n_a", cfg.sample.n_a},
                 {"augment", policy_name(cfg.sample.policy)},
                 {"seed", cfg.sample.seed}};
  j["loss"] = {{"tau", cfg.loss.tau},
               {"lambda_patch", cfg.loss.lambda_patch},
               {"lambda_slide", cfg.loss.lambda_slide},
               {"lambda_patient", cfg.loss.lambda_patient},
               {"enable_patch", cfg.loss.enable_patch},
               {"enable_slide", cfg.loss.enable_slide},
               {"enable_patient", cfg.loss.enable_patient},
               {"supcon", cfg.loss.supcon}};
  j["encoder"] = {{"backbone", cfg.encoder.backbone},
                  {"widths", cfg.encoder.widths},
                  {"projection_dim", cfg.encoder.projection_dim},
                  {"patch_h", cfg.encoder.patch_shape.h},
                  {"patch_w", cfg.encoder.patch_shape.w},
                  {"patch_c", cfg.encoder.patch_shape.c},
                  {"init_seed", cfg.encoder.init_seed}};
  j["optim"] = {{"peak_lr", cfg.optim.peak_lr},
                {"weight_decay", cfg.optim.weight_decay},
                {"beta1", cfg.optim.beta1},
                {"beta2", cfg.optim.beta2},
                {"eps", cfg.optim.eps},
                {"total_iterations", cfg.optim.total_iterations},
                {"warmup_fraction", cfg.optim.warmup_fraction}};
  j["eval"] = {{"k", cfg.eval.k},
               {"subsample", cfg.eval.subsample},
               {"test_fraction", cfg.eval.test_fraction},
               {"seed", cfg.eval.seed},
               {"collapse_probe", cfg.eval.collapse_probe}};
  return j.dump();
}

std::uint64_t config_digest(const RunConfig& cfg) {
  const std::string text = canonical_config(cfg);
  std::uint64_t hash = 1469598103934665603ull;
  for (unsigned char ch : text) {
    hash ^= ch;
    hash *= 1099511628211ull;
  }
  return hash;
}

}  // namespace hidisc
