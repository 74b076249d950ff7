#include "CLI11.hpp"
#include "json.hpp"

#include "hidisc/config.hpp"
#include "hidisc/eval.hpp"
#include "hidisc/trainer.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using namespace hidisc;

namespace {

int env_workers() {
  const char* raw = std::getenv("HIDISC_WORKERS");
  if (!raw) return 1;
  const int n = std::atoi(raw);
  return n < 1 ? 1 : n;
}

void override_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.sample.seed = seed;
  cfg.sample.policy.seed_namespace = seed;
  cfg.encoder.init_seed = seed;
  cfg.eval.seed = seed;
}

Corpus load_corpus_for(RunConfig& cfg) {
  if (cfg.manifest.empty()) return generate_synthetic(cfg.synth);
  auto corpus = load_manifest(cfg.manifest);
  cfg.encoder.patch_shape = corpus.patch_shape;
  return corpus;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void cmd_generate(RunConfig& cfg, const std::string& out_override, bool force) {
  if (!cfg.manifest.empty())
    throw std::invalid_argument("generate needs a synthetic corpus config");
  const fs::path dir =
      out_override.empty() ? fs::path(cfg.out_dir) / "corpus" : fs::path(out_override);
  if (fs::exists(dir / "manifest.jsonl") && !force)
    throw std::invalid_argument("refusing to overwrite " +
                                (dir / "manifest.jsonl").string() +
                                " (use --force)");
  auto corpus = generate_synthetic(cfg.synth);
  fs::create_directories(dir);
  export_corpus(corpus, dir);
  nlohmann::json prov;
  prov["n_classes"] = cfg.synth.n_classes;
  prov["patients_per_class"] = cfg.synth.patients_per_class;
  prov["slides_per_patient"] = cfg.synth.slides_per_patient;
  prov["patches_per_slide"] = cfg.synth.patches_per_slide;
  prov["sigma_class"] = cfg.synth.sigma_class;
  prov["sigma_patient"] = cfg.synth.sigma_patient;
  prov["sigma_slide"] = cfg.synth.sigma_slide;
  prov["sigma_patch"] = cfg.synth.sigma_patch;
  prov["patch_shape"] = {cfg.synth.patch_shape.h, cfg.synth.patch_shape.w,
                         cfg.synth.patch_shape.c};
  prov["seed"] = cfg.synth.seed;
  write_text(dir / "provenance.json", prov.dump(2) + "\n");
  std::cout << "wrote " << corpus.patch_count() << " patches to " << dir.string()
            << "\n";
}

void cmd_train(RunConfig& cfg) {
  auto corpus = load_corpus_for(cfg);
  cfg.validate();
  auto [train_part, test_part] =
      split_corpus(corpus, cfg.eval.test_fraction, cfg.eval.seed);
  (void)test_part;
  const std::uint64_t digest = config_digest(cfg);

  fs::create_directories(cfg.out_dir);
  write_text(fs::path(cfg.out_dir) / "config.json",
             nlohmann::json::parse(canonical_config(cfg)).dump(2) + "\n");
  write_text(fs::path(cfg.out_dir) / "digest.txt", std::to_string(digest) + "\n");

  std::ofstream metrics(fs::path(cfg.out_dir) / "metrics.csv", std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write metrics.csv");
  metrics << kMetricsHeader << "\n";

  Trainer trainer(train_part, cfg.sample, cfg.loss, cfg.encoder, cfg.optim, digest);
  trainer.run([&](const MetricsRow& row) { metrics << metrics_csv_line(row) << "\n"; },
              cfg.out_dir);
  metrics.close();
  std::cout << "trained " << cfg.optim.total_iterations << " iterations into "
            << cfg.out_dir << "\n";
}

void cmd_eval(RunConfig& cfg) {
  auto corpus = load_corpus_for(cfg);
  cfg.validate();
  auto [train_part, test_part] =
      split_corpus(corpus, cfg.eval.test_fraction, cfg.eval.seed);
  const std::uint64_t digest = config_digest(cfg);

  Trainer trainer(train_part, cfg.sample, cfg.loss, cfg.encoder, cfg.optim, digest);
  trainer.restore_checkpoint((fs::path(cfg.out_dir) / "checkpoint.bin").string());

  const int workers = env_workers();
  auto train_set = embed_corpus(trainer.encoder(), train_part, cfg.eval.subsample,
                                cfg.eval.seed, "train", workers);
  auto test_set = embed_corpus(trainer.encoder(), test_part, cfg.eval.subsample,
                               cfg.eval.seed, "test", workers);

  auto report = evaluate(train_set, test_set, test_part, cfg.eval.k,
                         cfg.eval.collapse_probe, cfg.eval.seed);
  report.subsample = cfg.eval.subsample;
  write_text(fs::path(cfg.out_dir) / "report.json", report_json(report));
  export_embeddings(train_set, train_part,
                    (fs::path(cfg.out_dir) / "embeddings_train").string(), digest);
  export_embeddings(test_set, test_part,
                    (fs::path(cfg.out_dir) / "embeddings_test").string(), digest);
  std::cout << report_table(report);
}

void cmd_embed(RunConfig& cfg, const std::string& out_override) {
  auto corpus = load_corpus_for(cfg);
  cfg.validate();
  auto [train_part, test_part] =
      split_corpus(corpus, cfg.eval.test_fraction, cfg.eval.seed);
  (void)test_part;
  const std::uint64_t digest = config_digest(cfg);
  Trainer trainer(train_part, cfg.sample, cfg.loss, cfg.encoder, cfg.optim, digest);
  trainer.restore_checkpoint((fs::path(cfg.out_dir) / "checkpoint.bin").string());
  auto set = embed_corpus(trainer.encoder(), corpus, cfg.eval.subsample, cfg.eval.seed,
                          "all", env_workers());
  const std::string prefix = out_override.empty()
                                 ? (fs::path(cfg.out_dir) / "embeddings").string()
                                 : out_override;
  export_embeddings(set, corpus, prefix, digest);
  std::cout << "wrote " << set.rows() << " embeddings to " << prefix << ".bin\n";
}

std::string sanitize(std::string text) {
  for (auto& ch : text)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '.')
      ch = '_';
  return text.substr(0, 40);
}

RunConfig ablation_cell(const RunConfig& base, const std::string& value_json,
                        std::size_t value_index, std::uint64_t seed) {
  RunConfig cfg = base;
  cfg.has_ablation = false;
  const auto value = nlohmann::json::parse(value_json);
  const auto& axis = base.ablation.axis;
  if (axis == "variant") {
    apply_variant(cfg, value.get<std::string>());
  } else if (axis == "lambda") {
    const auto lams = value.get<std::vector<double>>();
    if (lams.size() != 3)
      throw std::invalid_argument(
          "ablation lambda values must be [patient, slide, patch] triples");
    cfg.loss.lambda_patient = lams[0];
    cfg.loss.lambda_slide = lams[1];
    cfg.loss.lambda_patch = lams[2];
  } else if (axis == "lr") {
    cfg.optim.peak_lr = value.get<double>();
  } else if (axis == "batch") {
    cfg.sample.n = value.get<int>();
  } else if (axis == "augment") {
    const auto name = value.get<std::string>();
    if (name == "none")
      cfg.sample.policy = AugPolicy::none();
    else if (name == "weak")
      cfg.sample.policy = AugPolicy::weak();
    else if (name == "strong")
      cfg.sample.policy = AugPolicy::strong();
    else
      throw std::invalid_argument("ablation augment value '" + name + "' is unknown");
  } else if (axis == "iterations") {
    cfg.optim.total_iterations = value.get<std::int64_t>();
  }
  override_seed(cfg, seed);
  cfg.run_name = base.run_name + "-" + sanitize(value_json) + "-s" +
                 std::to_string(seed);
  cfg.out_dir = (fs::path(base.out_dir) /
                 (base.ablation.axis + "-" + std::to_string(value_index) + "-" +
                  sanitize(value_json) + "-seed" + std::to_string(seed)))
                    .string();
  cfg.validate();
  return cfg;
}

struct CellMetrics {
  bool ok = false;
  bool corrupt = false;
  double patch_acc = 0.0, patch_mca = 0.0, slide_acc = 0.0, patient_acc = 0.0;
};

CellMetrics read_cell(const fs::path& run_dir) {
  CellMetrics out;
  std::ifstream in(run_dir / "report.json");
  if (!in) {
    out.corrupt = true;
    return out;
  }
  try {
    const auto j = nlohmann::json::parse(in);
    out.patch_acc = j.at("levels").at("patch").at("accuracy").get<double>();
    out.patch_mca = j.at("levels").at("patch").at("mca").get<double>();
    out.slide_acc = j.at("levels").at("slide").at("accuracy").get<double>();
    out.patient_acc = j.at("levels").at("patient").at("accuracy").get<double>();
    out.ok = true;
  } catch (const nlohmann::json::exception&) {
    out.corrupt = true;
  }
  return out;
}

std::string mean_stddev(const std::vector<double>& values) {
  double mean = 0.0;
  for (double v : values) mean += v / static_cast<double>(values.size());
  double var = 0.0;
  if (values.size() > 1) {
    for (double v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size() - 1);
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f (%.4f)", mean, std::sqrt(var));
  return buf;
}

void cmd_ablate(RunConfig& base, bool force, int parallel) {
  if (!base.has_ablation)
    throw std::invalid_argument("config has no ablation section");

  struct Cell {
    RunConfig cfg;
    std::size_t value_index;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (std::size_t vi = 0; vi < base.ablation.values.size(); ++vi)
    for (std::uint64_t seed : base.ablation.seeds)
      cells.push_back({ablation_cell(base, base.ablation.values[vi], vi, seed), vi,
                       seed});

  std::mutex log_mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      auto cfg = cells[i].cfg;  // per-cell copy, runs are directory-isolated
      if (!force && fs::exists(fs::path(cfg.out_dir) / "report.json")) {
        std::lock_guard lock(log_mu);
        std::cout << "skipping completed " << cfg.out_dir << "\n";
        continue;
      }
      cmd_train(cfg);
      cmd_eval(cfg);
    }
  };
  if (parallel <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < parallel; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::ofstream agg(fs::path(base.out_dir) / "aggregate.csv", std::ios::trunc);
  if (!agg) throw std::runtime_error("cannot write aggregate.csv");
  agg << "axis,value,runs,patch_acc,patch_mca,slide_acc,patient_acc,status\n";
  for (std::size_t vi = 0; vi < base.ablation.values.size(); ++vi) {
    std::vector<double> pa, pm, sa, ta;
    bool corrupt = false;
    for (const auto& cell : cells) {
      if (cell.value_index != vi) continue;
      auto m = read_cell(cell.cfg.out_dir);
      if (!m.ok) {
        corrupt = true;
        continue;
      }
      pa.push_back(m.patch_acc);
      pm.push_back(m.patch_mca);
      sa.push_back(m.slide_acc);
      ta.push_back(m.patient_acc);
    }
    std::string label = base.ablation.values[vi];
    if (label.size() >= 2 && label.front() == '"' && label.back() == '"')
      label = label.substr(1, label.size() - 2);
    agg << base.ablation.axis << ",\"" << label << "\"," << pa.size() << ",";
    if (pa.empty())
      agg << "-,-,-,-,corrupt\n";
    else
      agg << mean_stddev(pa) << "," << mean_stddev(pm) << "," << mean_stddev(sa)
          << "," << mean_stddev(ta) << "," << (corrupt ? "partial" : "ok") << "\n";
  }
  std::cout << "ablation table written to "
            << (fs::path(base.out_dir) / "aggregate.csv").string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchical discriminative pretraining at desk scale"};
  app.require_subcommand(1);

  std::string config_path, out_override;
  std::uint64_t seed = 0;
  bool has_seed = false, force = false;
  int parallel = 1;
  app.add_option("--config", config_path, "run configuration file")->required();
  app.add_option("--out", out_override, "override the output location");
  app.add_option("--seed", seed, "override run seeds")->each([&](const std::string&) {
    has_seed = true;
  });
  app.add_flag("--force", force, "overwrite existing outputs");
  app.add_option("--parallel", parallel, "parallel ablation runs");

  auto* generate = app.add_subcommand("generate", "write a synthetic corpus to disk");
  auto* train = app.add_subcommand("train", "run the training loop");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a trained checkpoint");
  auto* embed = app.add_subcommand("embed", "export embeddings for a checkpoint");
  auto* ablate = app.add_subcommand("ablate", "run an ablation sweep");
  for (auto* sub : {generate, train, eval_cmd, embed, ablate}) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    auto cfg = load_run_config(config_path);
    if (has_seed) override_seed(cfg, seed);
    if (!out_override.empty() && !generate->parsed() && !embed->parsed())
      cfg.out_dir = out_override;

    if (generate->parsed())
      cmd_generate(cfg, out_override, force);
    else if (train->parsed())
      cmd_train(cfg);
    else if (eval_cmd->parsed())
      cmd_eval(cfg);
    else if (embed->parsed())
      cmd_embed(cfg, out_override);
    else if (ablate->parsed())
      cmd_ablate(cfg, force, parallel);
  } catch (const DigestMismatchError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
