#include "hidisc/corpus.hpp"

#include "hidisc/rng.hpp"
#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

namespace hidisc {

namespace fs = std::filesystem;
using nlohmann::json;

const char* level_name(Level level) {
  switch (level) {
    case Level::Patch: return "patch";
    case Level::Slide: return "slide";
    case Level::Patient: return "patient";
  }
  return "?";
}

void MemoryPatchSource::put(const std::string& key, std::vector<float> pixels) {
  patches_[key] = std::make_shared<const std::vector<float>>(std::move(pixels));
}

std::shared_ptr<const std::vector<float>> MemoryPatchSource::load(const std::string& key) const {
  auto it = patches_.find(key);
  if (it == patches_.end())
    throw std::runtime_error("patch key not found in memory source: " + key);
  return it->second;
}

FilePatchSource::FilePatchSource(fs::path base_dir, std::size_t capacity)
    : base_dir_(std::move(base_dir)), capacity_(std::max<std::size_t>(1, capacity)) {}

std::shared_ptr<const std::vector<float>> FilePatchSource::load(const std::string& key) const {
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = cache_.find(key);
    if (it != cache_.end()) {
      order_.splice(order_.begin(), order_, it->second.second);
      return it->second.first;
    }
  }
  PatchShape shape;
  auto pixels = std::make_shared<const std::vector<float>>(
      read_patch_file(base_dir_ / key, &shape));
  std::lock_guard<std::mutex> lock(mu_);
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second.first;  // raced, keep the resident copy
  order_.push_front(key);
  cache_.emplace(key, std::make_pair(pixels, order_.begin()));
  while (cache_.size() > capacity_) {
    cache_.erase(order_.back());
    order_.pop_back();
  }
  return pixels;
}

void Corpus::validate() const {
  if (patients.empty()) throw std::invalid_argument("corpus has no patients");
  if (classes.empty()) throw std::invalid_argument("corpus has no classes");
  std::set<std::string> patient_ids;
  std::map<std::string, std::string> patch_owner;  // patch_id -> slide_id
  for (const auto& p : patients) {
    if (!patient_ids.insert(p.patient_id).second)
      throw std::invalid_argument("duplicate patient id: " + p.patient_id);
    if (p.class_label < 0 || p.class_label >= static_cast<int>(classes.size()))
      throw std::invalid_argument("patient " + p.patient_id + " has class label " +
                                  std::to_string(p.class_label) + " outside " +
                                  std::to_string(classes.size()) + " classes");
    if (p.slides.empty())
      throw std::invalid_argument("patient " + p.patient_id + " has no slides");
    std::set<std::string> slide_ids;
    for (const auto& s : p.slides) {
      if (!slide_ids.insert(s.slide_id).second)
        throw std::invalid_argument("duplicate slide id " + s.slide_id + " in patient " +
                                    p.patient_id);
      if (s.patches.empty())
        throw std::invalid_argument("slide " + s.slide_id + " of patient " + p.patient_id +
                                    " has no patches");
      for (const auto& t : s.patches) {
        auto [it, inserted] = patch_owner.emplace(t.patch_id, s.slide_id);
        if (!inserted)
          throw std::invalid_argument("patch " + t.patch_id + " listed under two slides: " +
                                      it->second + " and " + s.slide_id);
      }
    }
  }
}

const PatientRecord& Corpus::patient(const PatchRef& ref) const {
  if (ref.patient < 0 || ref.patient >= static_cast<int>(patients.size()))
    throw std::out_of_range("patch ref not in corpus: patient index " +
                            std::to_string(ref.patient));
  return patients[static_cast<std::size_t>(ref.patient)];
}

const SlideRecord& Corpus::slide(const PatchRef& ref) const {
  const auto& p = patient(ref);
  if (ref.slide < 0 || ref.slide >= static_cast<int>(p.slides.size()))
    throw std::out_of_range("patch ref not in corpus: slide index " +
                            std::to_string(ref.slide) + " of patient " + p.patient_id);
  return p.slides[static_cast<std::size_t>(ref.slide)];
}

const PatchRecord& Corpus::patch(const PatchRef& ref) const {
  const auto& s = slide(ref);
  if (ref.patch < 0 || ref.patch >= static_cast<int>(s.patches.size()))
    throw std::out_of_range("patch ref not in corpus: patch index " +
                            std::to_string(ref.patch) + " of slide " + s.slide_id);
  return s.patches[static_cast<std::size_t>(ref.patch)];
}

std::vector<float> Corpus::load_patch(const PatchRef& ref) const {
  auto pixels = source->load(patch(ref).key);
  if (static_cast<std::int64_t>(pixels->size()) != patch_shape.numel())
    throw std::runtime_error("patch " + patch(ref).patch_id + " has " +
                             std::to_string(pixels->size()) + " values, expected " +
                             std::to_string(patch_shape.numel()));
  return *pixels;
}

std::vector<PatchRef> Corpus::all_patches() const {
  std::vector<PatchRef> out;
  for (int pi = 0; pi < static_cast<int>(patients.size()); ++pi)
    for (int si = 0; si < static_cast<int>(patients[pi].slides.size()); ++si)
      for (int ti = 0; ti < static_cast<int>(patients[pi].slides[si].patches.size()); ++ti)
        out.push_back({pi, si, ti});
  return out;
}

std::int64_t Corpus::patch_count() const {
  std::int64_t n = 0;
  for (const auto& p : patients)
    for (const auto& s : p.slides) n += static_cast<std::int64_t>(s.patches.size());
  return n;
}

std::int64_t Corpus::slide_count() const {
  std::int64_t n = 0;
  for (const auto& p : patients) n += static_cast<std::int64_t>(p.slides.size());
  return n;
}

std::string ancestry(const Corpus& corpus, const PatchRef& ref, Level level) {
  const auto& p = corpus.patient(ref);
  if (level == Level::Patient) return p.patient_id;
  const auto& s = corpus.slide(ref);
  if (level == Level::Slide) return p.patient_id + "/" + s.slide_id;
  const auto& t = corpus.patch(ref);
  return p.patient_id + "/" + s.slide_id + "/" + t.patch_id;
}

void SynthConfig::validate() const {
  if (n_classes < 1 || patients_per_class < 1 || slides_per_patient < 1 ||
      patches_per_slide < 1)
    throw std::invalid_argument("synthetic config: all counts must be >= 1");
  if (patch_shape.h < 1 || patch_shape.w < 1 || patch_shape.c < 1)
    throw std::invalid_argument("synthetic config: bad patch shape");
  if (sigma_patch < 0.0)
    throw std::invalid_argument("synthetic config: negative sigma");
  if (!(sigma_class > sigma_patient && sigma_patient >= sigma_slide &&
        sigma_slide >= sigma_patch))
    throw std::invalid_argument(
        "synthetic config: separability requires sigma_class > sigma_patient >= "
        "sigma_slide >= sigma_patch");
}

namespace {

// Per-class texture prototype: a small stack of sinusoidal gratings whose
// frequencies live in a class-specific band. Zero-mean, scaled by sigma_class.
std::vector<double> class_prototype(const SynthConfig& cfg, int cls) {
  const auto& sh = cfg.patch_shape;
  std::vector<double> proto(static_cast<std::size_t>(sh.numel()), 0.0);
  StreamRng rng(cfg.seed, {StreamRng::hash_tag("class"), static_cast<std::uint64_t>(cls)});
  constexpr int kWaves = 3;
  const double extent = static_cast<double>(std::max(sh.h, sh.w));
  for (int wave = 0; wave < kWaves; ++wave) {
    double freq = (cls + 1) + rng.uniform();  // cycles per image, class band
    double theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    double chan_shift = rng.uniform(0.0, 1.0);
    double kx = 2.0 * 3.14159265358979323846 * freq * std::cos(theta) / extent;
    double ky = 2.0 * 3.14159265358979323846 * freq * std::sin(theta) / extent;
    std::size_t idx = 0;
    for (int y = 0; y < sh.h; ++y)
      for (int x = 0; x < sh.w; ++x)
        for (int ch = 0; ch < sh.c; ++ch, ++idx)
          proto[idx] += std::sin(kx * x + ky * y + phase + chan_shift * ch);
  }
  const double amp = cfg.sigma_class / std::sqrt(kWaves * 0.5);
  for (auto& v : proto) v *= amp;
  return proto;
}

void add_noise(std::vector<double>& field, double sigma, StreamRng rng) {
  if (sigma == 0.0) return;
  for (auto& v : field) v += sigma * rng.normal();
}

}  // namespace

Corpus generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  auto source = std::make_shared<MemoryPatchSource>();
  Corpus corpus;
  corpus.patch_shape = cfg.patch_shape;
  corpus.source = source;
  for (int cls = 0; cls < cfg.n_classes; ++cls)
    corpus.classes.push_back("class" + std::to_string(cls));

  constexpr double kGain = 0.2;
  const std::uint64_t kPatient = StreamRng::hash_tag("patient");
  const std::uint64_t kSlide = StreamRng::hash_tag("slide");
  const std::uint64_t kPatch = StreamRng::hash_tag("patch");

  for (int cls = 0; cls < cfg.n_classes; ++cls) {
    const auto proto = class_prototype(cfg, cls);
    for (int pi = 0; pi < cfg.patients_per_class; ++pi) {
      PatientRecord patient;
      patient.patient_id =
          "class" + std::to_string(cls) + "_patient" + std::to_string(pi);
      patient.class_label = cls;
      auto patient_field = proto;
      add_noise(patient_field, cfg.sigma_patient,
                StreamRng(cfg.seed, {kPatient, static_cast<std::uint64_t>(cls),
                                     static_cast<std::uint64_t>(pi)}));
      for (int si = 0; si < cfg.slides_per_patient; ++si) {
        SlideRecord slide;
        slide.slide_id = "slide" + std::to_string(si);
        auto slide_field = patient_field;
        add_noise(slide_field, cfg.sigma_slide,
                  StreamRng(cfg.seed, {kSlide, static_cast<std::uint64_t>(cls),
                                       static_cast<std::uint64_t>(pi),
                                       static_cast<std::uint64_t>(si)}));
        for (int ti = 0; ti < cfg.patches_per_slide; ++ti) {
          auto patch_field = slide_field;
          add_noise(patch_field, cfg.sigma_patch,
                    StreamRng(cfg.seed, {kPatch, static_cast<std::uint64_t>(cls),
                                         static_cast<std::uint64_t>(pi),
                                         static_cast<std::uint64_t>(si),
                                         static_cast<std::uint64_t>(ti)}));
          std::vector<float> pixels(patch_field.size());
          for (std::size_t i = 0; i < pixels.size(); ++i)
            pixels[i] = static_cast<float>(
                std::clamp(0.5 + kGain * patch_field[i], 0.0, 1.0));
          PatchRecord patch;
          patch.patch_id = patient.patient_id + "_" + slide.slide_id + "_patch" +
                           std::to_string(ti);
          patch.key = patient.patient_id + "/" + slide.slide_id + "/patch" +
                      std::to_string(ti);
          source->put(patch.key, std::move(pixels));
          slide.patches.push_back(std::move(patch));
        }
        patient.slides.push_back(std::move(slide));
      }
      corpus.patients.push_back(std::move(patient));
    }
  }
  corpus.validate();
  return corpus;
}

namespace {
constexpr char kPatchMagic[8] = {'H', 'I', 'D', 'P', 'T', 'C', 'H', '\0'};

void read_patch_header(std::ifstream& in, const fs::path& path, PatchShape* shape) {
  char magic[8];
  std::uint32_t dims[3];
  if (!in.read(magic, 8) || std::memcmp(magic, kPatchMagic, 8) != 0)
    throw std::runtime_error("bad patch file magic: " + path.string());
  if (!in.read(reinterpret_cast<char*>(dims), sizeof(dims)))
    throw std::runtime_error("truncated patch header: " + path.string());
  shape->h = static_cast<int>(dims[0]);
  shape->w = static_cast<int>(dims[1]);
  shape->c = static_cast<int>(dims[2]);
}
}  // namespace

void write_patch_file(const fs::path& path, const PatchShape& shape,
                      const std::vector<float>& pixels) {
  if (static_cast<std::int64_t>(pixels.size()) != shape.numel())
    throw std::invalid_argument("pixel count does not match patch shape");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write patch file: " + path.string());
  out.write(kPatchMagic, 8);
  std::uint32_t dims[3] = {static_cast<std::uint32_t>(shape.h),
                           static_cast<std::uint32_t>(shape.w),
                           static_cast<std::uint32_t>(shape.c)};
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size() * sizeof(float)));
  if (!out) throw std::runtime_error("short write to patch file: " + path.string());
}

std::vector<float> read_patch_file(const fs::path& path, PatchShape* shape) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing patch file: " + path.string());
  PatchShape sh;
  read_patch_header(in, path, &sh);
  std::vector<float> pixels(static_cast<std::size_t>(sh.numel()));
  if (!in.read(reinterpret_cast<char*>(pixels.data()),
               static_cast<std::streamsize>(pixels.size() * sizeof(float))))
    throw std::runtime_error("truncated patch file: " + path.string());
  if (shape) *shape = sh;
  return pixels;
}

Corpus load_manifest(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open manifest: " + manifest_path.string());
  const fs::path base = manifest_path.parent_path();

  Corpus corpus;
  std::map<std::string, int> patient_index;
  std::map<std::string, std::string> patient_class;         // id -> class name
  std::map<std::string, std::string> patch_owner;           // patch_id -> slide_id
  std::set<std::string> class_names;
  bool have_shape = false;

  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("manifest line " + std::to_string(lineno) +
                               ": parse error: " + e.what());
    }
    for (const char* field : {"patch_path", "patch_id", "slide_id", "patient_id", "class_label"})
      if (!rec.contains(field))
        throw std::runtime_error("manifest line " + std::to_string(lineno) +
                                 ": missing field " + field);
    const std::string patch_path = rec["patch_path"].get<std::string>();
    const std::string patch_id = rec["patch_id"].get<std::string>();
    const std::string slide_id = rec["slide_id"].get<std::string>();
    const std::string patient_id = rec["patient_id"].get<std::string>();
    const std::string class_label = rec["class_label"].get<std::string>();
    if (patch_id.empty() || slide_id.empty() || patient_id.empty())
      throw std::runtime_error("manifest line " + std::to_string(lineno) +
                               ": orphan patch, empty ancestry id");

    auto [owner_it, fresh] = patch_owner.emplace(patch_id, slide_id);
    if (!fresh)
      throw std::runtime_error("patch " + patch_id + " listed under two slides: " +
                               owner_it->second + " and " + slide_id);

    auto [cls_it, cls_fresh] = patient_class.emplace(patient_id, class_label);
    if (!cls_fresh && cls_it->second != class_label)
      throw std::runtime_error("patient " + patient_id + " has conflicting class labels " +
                               cls_it->second + " and " + class_label);
    class_names.insert(class_label);

    PatchShape file_shape;
    {
      std::ifstream pf(base / patch_path, std::ios::binary);
      if (!pf) throw std::runtime_error("missing patch file: " + (base / patch_path).string());
      read_patch_header(pf, base / patch_path, &file_shape);
    }
    if (!have_shape) {
      corpus.patch_shape = file_shape;
      have_shape = true;
    } else if (!(file_shape == corpus.patch_shape)) {
      throw std::runtime_error("inconsistent patch shape in " + patch_path);
    }

    auto [pat_it, pat_fresh] =
        patient_index.emplace(patient_id, static_cast<int>(corpus.patients.size()));
    if (pat_fresh) {
      PatientRecord p;
      p.patient_id = patient_id;
      corpus.patients.push_back(std::move(p));
    }
    auto& patient = corpus.patients[static_cast<std::size_t>(pat_it->second)];
    SlideRecord* slide = nullptr;
    for (auto& s : patient.slides)
      if (s.slide_id == slide_id) slide = &s;
    if (!slide) {
      patient.slides.push_back({slide_id, {}});
      slide = &patient.slides.back();
    }
    slide->patches.push_back({patch_id, patch_path});
  }
  if (corpus.patients.empty())
    throw std::runtime_error("manifest is empty: " + manifest_path.string());

  corpus.classes.assign(class_names.begin(), class_names.end());
  for (auto& p : corpus.patients) {
    auto it = std::find(corpus.classes.begin(), corpus.classes.end(),
                        patient_class.at(p.patient_id));
    p.class_label = static_cast<int>(it - corpus.classes.begin());
  }
  corpus.source = std::make_shared<FilePatchSource>(base);
  corpus.validate();
  return corpus;
}

fs::path export_corpus(const Corpus& corpus, const fs::path& dir) {
  fs::create_directories(dir / "patches");
  const fs::path manifest_path = dir / "manifest.jsonl";
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest: " + manifest_path.string());
  for (const auto& ref : corpus.all_patches()) {
    const auto& patient = corpus.patient(ref);
    const auto& slide = corpus.slide(ref);
    const auto& patch = corpus.patch(ref);
    const std::string rel = "patches/" + patient.patient_id + "__" + slide.slide_id +
                            "__" + patch.patch_id + ".bin";
    write_patch_file(dir / rel, corpus.patch_shape, corpus.load_patch(ref));
    json rec = {{"patch_path", rel},
                {"patch_id", patch.patch_id},
                {"slide_id", slide.slide_id},
                {"patient_id", patient.patient_id},
                {"class_label", corpus.classes[static_cast<std::size_t>(patient.class_label)]}};
    out << rec.dump() << "\n";
  }
  return manifest_path;
}

std::pair<Corpus, Corpus> split_corpus(const Corpus& corpus, double test_fraction,
                                       std::uint64_t seed) {
  if (test_fraction <= 0.0 || test_fraction >= 1.0)
    throw std::invalid_argument("test fraction must be in (0, 1)");
  std::vector<char> is_test(corpus.patients.size(), 0);
  for (int cls = 0; cls < static_cast<int>(corpus.classes.size()); ++cls) {
    std::vector<int> members;
    for (int i = 0; i < static_cast<int>(corpus.patients.size()); ++i)
      if (corpus.patients[static_cast<std::size_t>(i)].class_label == cls)
        members.push_back(i);
    if (members.size() < 2) continue;  // too few to split, keep in train
    StreamRng rng(seed, {StreamRng::hash_tag("split"), static_cast<std::uint64_t>(cls)});
    rng.shuffle(members);
    auto n_test = static_cast<std::size_t>(
        std::clamp<double>(std::round(test_fraction * static_cast<double>(members.size())),
                           1.0, static_cast<double>(members.size()) - 1.0));
    for (std::size_t i = 0; i < n_test; ++i)
      is_test[static_cast<std::size_t>(members[i])] = 1;
  }
  Corpus train, test;
  for (Corpus* half : {&train, &test}) {
    half->classes = corpus.classes;
    half->patch_shape = corpus.patch_shape;
    half->source = corpus.source;
  }
  for (std::size_t i = 0; i < corpus.patients.size(); ++i)
    (is_test[i] ? test : train).patients.push_back(corpus.patients[i]);
  train.validate();
  test.validate();
  return {std::move(train), std::move(test)};
}

}  // namespace hidisc
