#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "grn/error.hpp"
#include "grn/signal.hpp"

namespace grn {

enum class Protocol { SD, LOSO };

inline std::string protocol_name(Protocol p) { return p == Protocol::SD ? "sd" : "loso"; }

inline Protocol parse_protocol(const std::string& s) {
  if (s == "sd") return Protocol::SD;
  if (s == "loso") return Protocol::LOSO;
  throw ConfigError("unknown protocol '" + s + "' (expected sd or loso)");
}

struct Fold {
  std::size_t fold_id = 0;
  Protocol protocol = Protocol::LOSO;
  std::vector<std::size_t> train_indices, val_indices, test_indices;
  std::set<std::uint32_t> train_subjects, test_subjects;
  // Trials references may be drawn from, and their subjects. For LOSO this is
  // the training split; for SD it is every trial of the other subjects.
  std::vector<std::size_t> reference_pool;
  std::set<std::uint32_t> reference_subjects;
};

namespace detail {

// Counts that keep each partition within one trial of its ideal fraction.
inline std::size_t frac_count(double frac, std::size_t n) {
  return static_cast<std::size_t>(std::llround(frac * static_cast<double>(n)));
}

inline std::map<std::uint32_t, std::vector<std::size_t>> by_subject(const Dataset& ds) {
  std::map<std::uint32_t, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < ds.size(); ++i) out[ds.segments[i].subject_id].push_back(i);
  return out;
}

inline std::map<std::uint32_t, std::vector<std::size_t>> by_label(const Dataset& ds, const std::vector<std::size_t>& idx) {
  std::map<std::uint32_t, std::vector<std::size_t>> out;
  for (auto i : idx) out[ds.segments[i].label].push_back(i);
  return out;
}

}  // namespace detail

// One fold per subject: that subject's trials, shuffled per class and split
// into train / val / test.
inline std::vector<Fold> split_sd(const Dataset& ds, double val_frac, double test_frac, std::uint64_t seed) {
  if (!(val_frac > 0.0 && val_frac < 1.0 && test_frac > 0.0 && test_frac < 1.0 && val_frac + test_frac < 1.0))
    throw ConfigError("split_sd: fractions must lie in (0,1) and sum to < 1");
  const auto subjects = detail::by_subject(ds);
  std::vector<Fold> folds;
  for (const auto& [sid, idx] : subjects) {
    Fold f;
    f.fold_id = folds.size();
    f.protocol = Protocol::SD;
    f.train_subjects = {sid};
    f.test_subjects = {sid};
    std::mt19937_64 rng(mix_seed(seed, 0x7364ULL, sid));
    for (auto& [label, trials] : detail::by_label(ds, idx)) {
      const std::size_t n = trials.size();
      if (n < 3)
        throw ConfigError("split_sd: subject " + std::to_string(sid) + " has only " + std::to_string(n) +
                          " trials of class " + std::to_string(label) + " (need >= 3)");
      std::shuffle(trials.begin(), trials.end(), rng);
      // every partition keeps at least one trial of each class
      const std::size_t n_test = std::clamp<std::size_t>(detail::frac_count(test_frac, n), 1, n - 2);
      const std::size_t n_val = std::clamp<std::size_t>(detail::frac_count(val_frac, n), 1, n - 1 - n_test);
      f.test_indices.insert(f.test_indices.end(), trials.begin(), trials.begin() + static_cast<std::ptrdiff_t>(n_test));
      f.val_indices.insert(f.val_indices.end(), trials.begin() + static_cast<std::ptrdiff_t>(n_test),
                           trials.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
      f.train_indices.insert(f.train_indices.end(), trials.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), trials.end());
    }
    for (const auto& [other, oidx] : subjects) {
      if (other == sid) continue;
      f.reference_subjects.insert(other);
      f.reference_pool.insert(f.reference_pool.end(), oidx.begin(), oidx.end());
    }
    std::sort(f.train_indices.begin(), f.train_indices.end());
    std::sort(f.val_indices.begin(), f.val_indices.end());
    std::sort(f.test_indices.begin(), f.test_indices.end());
    folds.push_back(std::move(f));
  }
  return folds;
}

// Leave-one-subject-out: the held-out subject is the test set; the remaining
// trials are split into train / val stratified by class.
inline std::vector<Fold> split_loso(const Dataset& ds, double val_frac, std::uint64_t seed) {
  if (!(val_frac >= 0.0 && val_frac < 1.0)) throw ConfigError("split_loso: val_frac must lie in [0, 1)");
  const auto subjects = detail::by_subject(ds);
  if (subjects.size() < 3)
    throw ConfigError("split_loso: need >= 3 subjects, dataset has " + std::to_string(subjects.size()));
  std::vector<Fold> folds;
  for (const auto& [held, held_idx] : subjects) {
    Fold f;
    f.fold_id = folds.size();
    f.protocol = Protocol::LOSO;
    f.test_subjects = {held};
    f.test_indices = held_idx;
    std::vector<std::size_t> rest;
    for (const auto& [sid, idx] : subjects) {
      if (sid == held) continue;
      f.train_subjects.insert(sid);
      rest.insert(rest.end(), idx.begin(), idx.end());
    }
    std::mt19937_64 rng(mix_seed(seed, 0x6c6f736fULL, held));
    for (auto& [label, trials] : detail::by_label(ds, rest)) {
      std::shuffle(trials.begin(), trials.end(), rng);
      const std::size_t n_val = std::min(trials.size() - 1, detail::frac_count(val_frac, trials.size()));
      f.val_indices.insert(f.val_indices.end(), trials.begin(), trials.begin() + static_cast<std::ptrdiff_t>(n_val));
      f.train_indices.insert(f.train_indices.end(), trials.begin() + static_cast<std::ptrdiff_t>(n_val), trials.end());
    }
    std::sort(f.train_indices.begin(), f.train_indices.end());
    std::sort(f.val_indices.begin(), f.val_indices.end());
    f.reference_pool = f.train_indices;
    f.reference_subjects = f.train_subjects;
    folds.push_back(std::move(f));
  }
  return folds;
}

// CSV rows: fold_id,partition,trial_index,subject_id,label
inline void write_fold_manifest(std::ostream& os, const Dataset& ds, const std::vector<Fold>& folds) {
  os << "fold_id,partition,trial_index,subject_id,label\n";
  for (const auto& f : folds) {
    auto emit = [&](const char* part, const std::vector<std::size_t>& idx) {
      for (auto i : idx)
        os << f.fold_id << ',' << part << ',' << i << ',' << ds.segments[i].subject_id << ',' << ds.segments[i].label
           << '\n';
    };
    emit("train", f.train_indices);
    emit("val", f.val_indices);
    emit("test", f.test_indices);
  }
}

// ---------------------------------------------------------------------------
// Reference sampling

struct ReferenceSet {
  std::vector<std::size_t> indices;  // dataset indices of the K_r reference trials
  std::vector<std::uint32_t> subject_ids;
  std::uint32_t label = 0;  // class the set was drawn for (training policy)
};

enum class ReferencePolicy {
  Training,    // label-matched, caller-supplied RNG
  Evaluation,  // label-blind, RNG seeded by (fold_id, trial_id)
};

// Counts every guard check and every violation. Thread-safe.
class LeakageMonitor {
 public:
  void record(bool violation) {
    checks_.fetch_add(1, std::memory_order_relaxed);
    if (violation) violations_.fetch_add(1, std::memory_order_relaxed);
  }
  std::uint64_t checks() const { return checks_.load(); }
  std::uint64_t violations() const { return violations_.load(); }

 private:
  std::atomic<std::uint64_t> checks_{0};
  std::atomic<std::uint64_t> violations_{0};
};

struct SamplerOptions {
  // Test hook: draw from the held-out trials, simulating a pool bug the guard must catch.
  bool inject_leak = false;
};

// Throws LeakageError if any reference subject is held out, outside the fold's
// reference subjects, or equal to the sample's own subject.
inline void check_reference_set(const Fold& fold, std::uint32_t sample_subject, const ReferenceSet& refs,
                                LeakageMonitor* monitor = nullptr) {
  for (auto sid : refs.subject_ids) {
    const bool bad = fold.test_subjects.count(sid) > 0 || fold.reference_subjects.count(sid) == 0 || sid == sample_subject;
    if (monitor) monitor->record(bad);
    if (bad)
      throw LeakageError("reference subject " + std::to_string(sid) + " is not allowed in fold " +
                         std::to_string(fold.fold_id) + " (held-out or own subject)");
  }
}

// Precomputed per-fold lookup for fast repeated sampling.
class ReferenceSampler {
 public:
  ReferenceSampler(const Fold& fold, const Dataset& ds, SamplerOptions opts = {}) : fold_(fold), ds_(ds), opts_(opts) {
    const auto& pool = opts.inject_leak ? fold.test_indices : fold.reference_pool;
    for (auto i : pool) {
      const auto& s = ds.segments[i];
      by_subject_[s.subject_id].push_back(i);
      by_subject_label_[{s.subject_id, s.label}].push_back(i);
    }
  }

  ReferenceSet sample(std::size_t sample_index, std::size_t K_r, ReferencePolicy policy, std::mt19937_64* rng,
                      LeakageMonitor* monitor = nullptr) const {
    const auto& s = ds_.segments.at(sample_index);
    std::vector<std::uint32_t> eligible;
    for (const auto& [sid, idx] : by_subject_)
      if (opts_.inject_leak || sid != s.subject_id) eligible.push_back(sid);
    // an injected pool may hold a single subject; reuse it so the guard, not the count check, fires
    if (opts_.inject_leak)
      while (!eligible.empty() && eligible.size() < K_r) eligible.push_back(eligible[eligible.size() % by_subject_.size()]);
    if (eligible.size() < K_r)
      throw ConfigError("sample_references: need " + std::to_string(K_r) + " distinct training subjects other than " +
                        std::to_string(s.subject_id) + ", fold " + std::to_string(fold_.fold_id) + " has " +
                        std::to_string(eligible.size()));
    std::mt19937_64 local;
    if (policy == ReferencePolicy::Evaluation) {
      local.seed(mix_seed(0x6576616cULL, fold_.fold_id, s.trial_id));
      rng = &local;
    } else if (rng == nullptr) {
      throw ConfigError("sample_references: training policy needs an RNG");
    }
    // partial Fisher-Yates over subjects
    for (std::size_t k = 0; k < K_r; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, eligible.size() - 1);
      std::swap(eligible[k], eligible[pick(*rng)]);
    }
    ReferenceSet out;
    out.label = s.label;
    for (std::size_t k = 0; k < K_r; ++k) {
      const auto sid = eligible[k];
      const std::vector<std::size_t>* cands = &by_subject_.at(sid);
      if (policy == ReferencePolicy::Training) {
        if (auto it = by_subject_label_.find({sid, s.label}); it != by_subject_label_.end()) cands = &it->second;
      }
      std::uniform_int_distribution<std::size_t> pick(0, cands->size() - 1);
      const auto idx = (*cands)[pick(*rng)];
      out.indices.push_back(idx);
      out.subject_ids.push_back(sid);
    }
    check_reference_set(fold_, s.subject_id, out, monitor);
    return out;
  }

  const Fold& fold() const { return fold_; }

 private:
  const Fold& fold_;
  const Dataset& ds_;
  SamplerOptions opts_;
  std::map<std::uint32_t, std::vector<std::size_t>> by_subject_;
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<std::size_t>> by_subject_label_;
};

inline ReferenceSet sample_references(const Fold& fold, const Dataset& ds, std::size_t sample_index, std::size_t K_r,
                                      ReferencePolicy policy, std::mt19937_64* rng = nullptr,
                                      LeakageMonitor* monitor = nullptr) {
  return ReferenceSampler(fold, ds).sample(sample_index, K_r, policy, rng, monitor);
}

}  // namespace grn
