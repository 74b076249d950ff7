#include "hidisc/sampler.hpp"

#include <map>
#include <stdexcept>

namespace hidisc {

void SampleSpec::validate() const {
  if (n < 1 || n_s < 1 || n_p < 1 || n_a < 1)
    throw std::invalid_argument("sample spec: all counts must be >= 1");
  policy.validate();
}

const std::vector<int>& HierBatch::level_idx(Level level) const {
  switch (level) {
    case Level::Patch: return patch_idx;
    case Level::Slide: return slide_idx;
    case Level::Patient: return patient_idx;
  }
  throw std::invalid_argument("bad level");
}

namespace {

// Draws `count` indices from [0, pool_size) by concatenated reshuffled cycles,
// so draws are distinct as long as count <= pool_size.
std::vector<int> cycle_draw(int pool_size, int count, StreamRng& rng) {
  std::vector<int> pool(static_cast<std::size_t>(pool_size));
  for (int i = 0; i < pool_size; ++i) pool[static_cast<std::size_t>(i)] = i;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(count));
  while (static_cast<int>(out.size()) < count) {
    rng.shuffle(pool);
    // avoid an immediate repeat across the cycle boundary
    if (!out.empty() && pool.size() > 1 && pool[0] == out.back())
      std::swap(pool[0], pool[1]);
    for (int v : pool) {
      out.push_back(v);
      if (static_cast<int>(out.size()) == count) break;
    }
  }
  return out;
}

}  // namespace

HierBatch sample_batch(const Corpus& corpus, const SampleSpec& spec,
                       std::int64_t batch_counter) {
  spec.validate();
  const int n_patients = static_cast<int>(corpus.patients.size());
  if (n_patients < spec.n)
    throw std::invalid_argument("sample_batch: corpus has " + std::to_string(n_patients) +
                                " patients, batch needs " + std::to_string(spec.n));
  const std::uint64_t counter = static_cast<std::uint64_t>(batch_counter);

  // Epoch permutation over patients; one epoch yields floor(P/n) batches.
  const std::int64_t batches_per_epoch = n_patients / spec.n;
  const std::uint64_t epoch = counter / static_cast<std::uint64_t>(batches_per_epoch);
  const int slot = static_cast<int>(counter % static_cast<std::uint64_t>(batches_per_epoch));
  std::vector<int> perm(static_cast<std::size_t>(n_patients));
  for (int i = 0; i < n_patients; ++i) perm[static_cast<std::size_t>(i)] = i;
  {
    StreamRng rng(spec.seed, {StreamRng::hash_tag("patients"), epoch});
    rng.shuffle(perm);
  }

  HierBatch batch;
  const int rows = spec.total();
  batch.patient_idx.reserve(static_cast<std::size_t>(rows));
  std::vector<float> images;
  images.reserve(static_cast<std::size_t>(rows) * corpus.patch_shape.numel());

  std::map<std::pair<int, int>, int> slide_ids;       // (patient, slide) -> dense id
  std::map<std::tuple<int, int, int>, int> patch_ids;  // (patient, slide, patch) -> dense id

  for (int pslot = 0; pslot < spec.n; ++pslot) {
    const int pidx = perm[static_cast<std::size_t>(slot * spec.n + pslot)];
    const auto& patient = corpus.patients[static_cast<std::size_t>(pidx)];
    const int n_slides = static_cast<int>(patient.slides.size());

    StreamRng slide_rng(spec.seed, {StreamRng::hash_tag("slides"), counter,
                                    static_cast<std::uint64_t>(pidx)});
    std::vector<int> slide_slots = cycle_draw(n_slides, spec.n_s, slide_rng);

    // Patch draws are shared across repeated occurrences of the same slide so
    // they stay distinct whenever the slide has enough patches.
    std::map<int, int> occurrences;
    for (int s : slide_slots) occurrences[s] += 1;
    std::map<int, std::vector<int>> slide_draws;
    for (auto [sidx, occ] : occurrences) {
      const auto& slide = patient.slides[static_cast<std::size_t>(sidx)];
      const int avail = static_cast<int>(slide.patches.size());
      if (avail < spec.n_p)
        throw std::invalid_argument("sample_batch: slide " + slide.slide_id +
                                    " of patient " + patient.patient_id + " has " +
                                    std::to_string(avail) + " patches, spec needs " +
                                    std::to_string(spec.n_p));
      StreamRng patch_rng(spec.seed, {StreamRng::hash_tag("patch_draw"), counter,
                                      static_cast<std::uint64_t>(pidx),
                                      static_cast<std::uint64_t>(sidx)});
      slide_draws[sidx] = cycle_draw(avail, occ * spec.n_p, patch_rng);
    }

    std::map<int, int> next_draw;
    for (int sslot = 0; sslot < spec.n_s; ++sslot) {
      const int sidx = slide_slots[static_cast<std::size_t>(sslot)];
      auto [sid_it, sid_fresh] =
          slide_ids.emplace(std::make_pair(pidx, sidx), static_cast<int>(slide_ids.size()));
      for (int tslot = 0; tslot < spec.n_p; ++tslot) {
        const int tidx = slide_draws[sidx][static_cast<std::size_t>(next_draw[sidx]++)];
        auto [tid_it, tid_fresh] = patch_ids.emplace(
            std::make_tuple(pidx, sidx, tidx), static_cast<int>(patch_ids.size()));
        PatchRef ref{pidx, sidx, tidx};
        const auto pixels = corpus.load_patch(ref);
        const std::uint64_t flat_patch_slot =
            (static_cast<std::uint64_t>(pslot) * spec.n_s + sslot) * spec.n_p + tslot;
        for (int a = 0; a < spec.n_a; ++a) {
          auto view = augment(pixels, corpus.patch_shape, spec.policy,
                              {counter, flat_patch_slot, static_cast<std::uint64_t>(a)});
          images.insert(images.end(), view.begin(), view.end());
          batch.patient_idx.push_back(pslot);
          batch.slide_idx.push_back(sid_it->second);
          batch.patch_idx.push_back(tid_it->second);
          batch.class_idx.push_back(patient.class_label);
          batch.source_refs.push_back(ref);
        }
      }
    }
  }

  batch.images = Tensor::leaf(
      {rows, corpus.patch_shape.h, corpus.patch_shape.w, corpus.patch_shape.c},
      std::move(images));
  return batch;
}

std::vector<std::vector<int>> positive_sets(const HierBatch& batch, Level level) {
  const auto& idx = batch.level_idx(level);
  const int n = batch.rows();
  std::map<int, std::vector<int>> groups;
  for (int i = 0; i < n; ++i) groups[idx[static_cast<std::size_t>(i)]].push_back(i);
  std::vector<std::vector<int>> out(static_cast<std::size_t>(n));
  for (const auto& [key, members] : groups)
    for (int i : members) {
      auto& set = out[static_cast<std::size_t>(i)];
      set.reserve(members.size() - 1);
      for (int j : members)
        if (j != i) set.push_back(j);
    }
  return out;
}

}  // namespace hidisc
