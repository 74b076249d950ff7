#pragma once

#include <cstdint>
#include <filesystem>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

namespace hidisc {

struct PatchShape {
  int h = 32;
  int w = 32;
  int c = 1;
  std::int64_t numel() const { return static_cast<std::int64_t>(h) * w * c; }
  bool operator==(const PatchShape&) const = default;
};

// Indices into a Corpus tree: patient, slide within patient, patch within slide.
struct PatchRef {
  int patient = -1;
  int slide = -1;
  int patch = -1;
  bool operator==(const PatchRef&) const = default;
};

struct PatchRecord {
  std::string patch_id;
  std::string key;  // storage key resolved by the corpus patch source
};

struct SlideRecord {
  std::string slide_id;
  std::vector<PatchRecord> patches;
};

struct PatientRecord {
  std::string patient_id;
  int class_label = 0;
  std::vector<SlideRecord> slides;
};

// Pixel storage behind a corpus. Implementations must be safe for concurrent
// readers.
class PatchSource {
 public:
  virtual ~PatchSource() = default;
  virtual std::shared_ptr<const std::vector<float>> load(const std::string& key) const = 0;
};

class MemoryPatchSource : public PatchSource {
 public:
  void put(const std::string& key, std::vector<float> pixels);
  std::shared_ptr<const std::vector<float>> load(const std::string& key) const override;

 private:
  std::unordered_map<std::string, std::shared_ptr<const std::vector<float>>> patches_;
};

// Reads patch files on demand, keeping the most recently used ones resident.
class FilePatchSource : public PatchSource {
 public:
  explicit FilePatchSource(std::filesystem::path base_dir, std::size_t capacity = 4096);
  std::shared_ptr<const std::vector<float>> load(const std::string& key) const override;

 private:
  std::filesystem::path base_dir_;
  std::size_t capacity_;
  mutable std::mutex mu_;
  mutable std::list<std::string> order_;  // most recent at front
  mutable std::unordered_map<
      std::string,
      std::pair<std::shared_ptr<const std::vector<float>>, std::list<std::string>::iterator>>
      cache_;
};

enum class Level { Patch, Slide, Patient };

const char* level_name(Level level);

// Immutable patient -> slide -> patch tree. The ancestry source of truth.
struct Corpus {
  std::vector<PatientRecord> patients;
  std::vector<std::string> classes;
  PatchShape patch_shape;
  std::shared_ptr<PatchSource> source;

  void validate() const;  // throws on any tree-invariant violation

  const PatientRecord& patient(const PatchRef& ref) const;
  const SlideRecord& slide(const PatchRef& ref) const;
  const PatchRecord& patch(const PatchRef& ref) const;
  std::vector<float> load_patch(const PatchRef& ref) const;

  std::vector<PatchRef> all_patches() const;  // canonical nesting order
  std::int64_t patch_count() const;
  std::int64_t slide_count() const;
};

// Level-l ancestry key; two patches compare equal at level l iff they share
// the l-level ancestor.
std::string ancestry(const Corpus& corpus, const PatchRef& ref, Level level);

struct SynthConfig {
  int n_classes = 4;
  int patients_per_class = 10;
  int slides_per_patient = 2;
  int patches_per_slide = 32;
  double sigma_class = 1.0;
  double sigma_patient = 0.3;
  double sigma_slide = 0.15;
  double sigma_patch = 0.05;
  PatchShape patch_shape{32, 32, 1};
  std::uint64_t seed = 0;

  void validate() const;
};

// Hierarchical generative process: per-class texture prototype, then additive
// perturbations at patient, slide, and patch level, clamped to [0, 1].
// Pure function of the config.
Corpus generate_synthetic(const SynthConfig& cfg);

// Patch file container: 8-byte magic, u32 h/w/c (little-endian), f32 pixels.
void write_patch_file(const std::filesystem::path& path, const PatchShape& shape,
                      const std::vector<float>& pixels);
std::vector<float> read_patch_file(const std::filesystem::path& path, PatchShape* shape);

// Manifest: JSON-lines, one record per patch with
// {patch_path, patch_id, slide_id, patient_id, class_label}, paths relative
// to the manifest file.
Corpus load_manifest(const std::filesystem::path& manifest_path);
// Writes patch files plus manifest.jsonl under dir; returns the manifest path.
std::filesystem::path export_corpus(const Corpus& corpus, const std::filesystem::path& dir);

// Patient-level stratified split; both halves share the patch source.
std::pair<Corpus, Corpus> split_corpus(const Corpus& corpus, double test_fraction,
                                       std::uint64_t seed);

}  // namespace hidisc
