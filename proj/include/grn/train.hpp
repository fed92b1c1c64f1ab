#pragma once

#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "grn/autograd.hpp"
#include "grn/error.hpp"
#include "grn/model.hpp"
#include "grn/protocol.hpp"
#include "grn/signal.hpp"
#include "grn/synchrony.hpp"

namespace grn {

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t max_epochs = 40;
  std::size_t patience = 10;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  Variant variant = Variant::Full;
  double val_frac = 0.125;
  double test_frac = 0.25;  // SD only
  bool inject_leak = false;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(patience < max_epochs)) throw ConfigError("patience must be < max_epochs");
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  }
};

// Stops once the monitored loss has failed to improve for `patience` consecutive epochs.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  // Returns true when training should stop after this epoch.
  bool update(std::size_t epoch, double loss) {
    if (loss < best_) {
      best_ = loss;
      best_epoch_ = epoch;
      stale_ = 0;
      improved_ = true;
    } else {
      ++stale_;
      improved_ = false;
    }
    return stale_ >= patience_;
  }

  bool improved() const { return improved_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t stale_ = 0;
  bool improved_ = false;
};

// Rows are true classes, columns predictions.
struct Confusion {
  std::size_t n_classes = 0;
  std::vector<std::size_t> counts;

  explicit Confusion(std::size_t n = 0) : n_classes(n), counts(n * n, 0) {}

  void add(std::uint32_t truth, std::uint32_t pred) { ++counts.at(truth * n_classes + pred); }
  std::size_t at(std::size_t t, std::size_t p) const { return counts[t * n_classes + p]; }
  std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }
  std::size_t trace() const {
    std::size_t s = 0;
    for (std::size_t i = 0; i < n_classes; ++i) s += at(i, i);
    return s;
  }
  std::size_t row_sum(std::size_t t) const {
    std::size_t s = 0;
    for (std::size_t p = 0; p < n_classes; ++p) s += at(t, p);
    return s;
  }
  double accuracy() const {
    const auto n = total();
    return n == 0 ? 0.0 : static_cast<double>(trace()) / static_cast<double>(n);
  }
};

inline Confusion confusion_from(std::span<const std::uint32_t> truth, std::span<const std::uint32_t> pred,
                                std::size_t n_classes) {
  if (truth.size() != pred.size()) throw ShapeError("confusion_from: length mismatch");
  Confusion c(n_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) c.add(truth[i], pred[i]);
  return c;
}

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0, val_loss = 0.0, train_acc = 0.0, val_acc = 0.0;
};

struct RunResult {
  std::size_t fold_id = 0;
  std::vector<EpochStats> curves;
  double test_accuracy = 0.0;
  Confusion confusion;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  // val loss re-measured after restoring the best-epoch parameters
  double restored_val_loss = 0.0;
  GrnModel model;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  Confusion confusion;
  std::vector<std::uint32_t> predictions;
};

// Dataset plus everything derived from it once: features, the pair synchrony
// cache, and the leakage monitor shared by every fold run against it.
class Workspace {
 public:
  explicit Workspace(const Dataset& ds, std::vector<BandDef> bands = default_bands(), WelchConfig welch = {})
      : ds_(ds), bands_(std::move(bands)), cache_(ds, bands_, welch) {
    features_.reserve(ds.size());
    for (const auto& seg : ds.segments) features_.push_back(extract_features(seg, bands_));
  }

  const Dataset& dataset() const { return ds_; }
  const std::vector<BandDef>& bands() const { return bands_; }
  const FeatureGrid& features(std::size_t i) const { return features_[i]; }
  SynchronyCache& cache() { return cache_; }
  LeakageMonitor& monitor() { return monitor_; }

  // Fills C, B and n_classes from the data; rejects explicit mismatches.
  GrnConfig resolve(GrnConfig cfg) const {
    cfg.C = ds_.channels;
    cfg.B = bands_.size();
    cfg.n_classes = ds_.n_classes;
    cfg.validate();
    return cfg;
  }

 private:
  const Dataset& ds_;
  std::vector<BandDef> bands_;
  std::vector<FeatureGrid> features_;
  SynchronyCache cache_;
  LeakageMonitor monitor_;
};

namespace detail {

struct Batch {
  Tensor x, mt;
  std::vector<std::uint32_t> labels;
};

inline Batch make_batch(const GrnModel& model, Workspace& ws, std::span<const std::size_t> idx,
                        const std::vector<ResonanceTensor>* tensors) {
  std::vector<const FeatureGrid*> grids;
  Batch b;
  for (auto i : idx) {
    grids.push_back(&ws.features(i));
    b.labels.push_back(ws.dataset().segments[i].label);
  }
  b.x = feature_batch(model.standardizer, grids, model.cfg.C, model.cfg.B);
  if (tensors) {
    std::vector<const ResonanceTensor*> ts;
    for (const auto& t : *tensors) ts.push_back(&t);
    b.mt = resonance_batch(ts);
  }
  return b;
}

inline std::uint32_t argmax_row(const std::vector<double>& v, std::size_t row, std::size_t width) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < width; ++j)
    if (v[row * width + j] > v[row * width + best]) best = j;
  return static_cast<std::uint32_t>(best);
}

inline std::string param_norm_report(const GrnModel& m) {
  std::ostringstream os;
  for (const auto& [name, t] : m.named_parameters()) {
    double ss = 0.0;
    for (double v : t.data()) ss += v * v;
    os << ' ' << name << '=' << std::sqrt(ss);
  }
  return os.str();
}

}  // namespace detail

// Evaluation-policy tensors for a list of trials (deterministic per fold and trial).
inline std::vector<ResonanceTensor> evaluation_tensors(Workspace& ws, const ReferenceSampler& sampler,
                                                       std::span<const std::size_t> idx, std::size_t K_r) {
  std::vector<ResonanceTensor> out;
  out.reserve(idx.size());
  for (auto i : idx) {
    const auto refs = sampler.sample(i, K_r, ReferencePolicy::Evaluation, nullptr, &ws.monitor());
    out.push_back(ws.cache().tensor(i, refs.indices));
  }
  return out;
}

// Forward pass without graph recording over the given trials.
inline EvalResult evaluate_indices(const GrnModel& model, Workspace& ws, std::span<const std::size_t> idx,
                                   const std::vector<ResonanceTensor>* tensors, Variant variant,
                                   std::size_t batch_size = 64) {
  ag::NoGradGuard no_grad;
  EvalResult out;
  out.confusion = Confusion(model.cfg.n_classes);
  if (idx.empty()) return out;
  const double lambda = effective_lambda(model.cfg, variant);
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, idx.size() - start);
    std::vector<ResonanceTensor> bt;
    if (tensors) bt.assign(tensors->begin() + static_cast<std::ptrdiff_t>(start), tensors->begin() + static_cast<std::ptrdiff_t>(start + n));
    auto batch = detail::make_batch(model, ws, idx.subspan(start, n), tensors ? &bt : nullptr);
    const auto tr = forward_full(model, batch.x, batch.mt, variant);
    const auto loss = grn_loss(tr.logits, batch.labels, tr.alpha, tr.F, model.prototypes, lambda);
    loss_sum += loss.total.item() * static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
      const auto pred = detail::argmax_row(tr.logits.data(), r, model.cfg.n_classes);
      out.predictions.push_back(pred);
      out.confusion.add(batch.labels[r], pred);
    }
  }
  out.loss = loss_sum / static_cast<double>(idx.size());
  out.accuracy = out.confusion.accuracy();
  return out;
}

// Test-set evaluation: evaluation-policy references, forward, argmax.
inline EvalResult evaluate(const GrnModel& model, const Fold& fold, Workspace& ws, Variant variant) {
  ReferenceSampler sampler(fold, ws.dataset());
  std::vector<ResonanceTensor> tensors;
  if (uses_resonance(variant)) tensors = evaluation_tensors(ws, sampler, fold.test_indices, model.cfg.K_r);
  return evaluate_indices(model, ws, fold.test_indices, uses_resonance(variant) ? &tensors : nullptr, variant);
}

inline RunResult train_fold(const Fold& fold, Workspace& ws, const GrnConfig& grn_cfg_in, const TrainConfig& tc) {
  tc.validate();
  const auto grn_cfg = ws.resolve(grn_cfg_in);
  const Dataset& ds = ws.dataset();
  const Variant variant = tc.variant;
  const bool need_g = uses_resonance(variant);
  const double lambda = effective_lambda(grn_cfg, variant);
  if (fold.train_indices.empty()) throw ConfigError("fold " + std::to_string(fold.fold_id) + " has no training trials");

  GrnModel model = GrnModel::init(grn_cfg, mix_seed(tc.seed, 0x696e6974ULL, fold.fold_id));
  {
    std::vector<const FeatureGrid*> grids;
    for (auto i : fold.train_indices) grids.push_back(&ws.features(i));
    model.standardizer.fit(grids);
  }
  auto params = model.parameters();
  ag::AdamState adam;
  const ag::AdamOptions opt{tc.lr, 0.9, 0.999, 1e-8, tc.weight_decay};

  ReferenceSampler sampler(fold, ds, SamplerOptions{tc.inject_leak});
  ReferenceSampler eval_sampler(fold, ds);
  std::vector<ResonanceTensor> val_tensors;
  if (need_g) val_tensors = evaluation_tensors(ws, eval_sampler, fold.val_indices, grn_cfg.K_r);
  const bool have_val = !fold.val_indices.empty();

  std::mt19937_64 rng(mix_seed(tc.seed, 0x747261696eULL, fold.fold_id));
  std::vector<std::size_t> order = fold.train_indices;

  RunResult result;
  result.fold_id = fold.fold_id;
  EarlyStopper stopper(tc.patience);
  GrnModel best = model.snapshot();

  for (std::size_t epoch = 0; epoch < tc.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size, ++batch_no) {
      const std::size_t n = std::min(tc.batch_size, order.size() - start);
      const std::span<const std::size_t> idx(order.data() + start, n);
      std::vector<ResonanceTensor> tensors;
      if (need_g) {
        // fresh label-matched references every epoch
        for (auto i : idx) {
          const auto refs = sampler.sample(i, grn_cfg.K_r, ReferencePolicy::Training, &rng, &ws.monitor());
          tensors.push_back(ws.cache().tensor(i, refs.indices));
        }
      }
      try {
        auto batch = detail::make_batch(model, ws, idx, need_g ? &tensors : nullptr);
        model.zero_grad();
        const auto tr = forward_full(model, batch.x, batch.mt, variant);
        const auto loss = grn_loss(tr.logits, batch.labels, tr.alpha, tr.F, model.prototypes, lambda);
        ag::backward(loss.total);
        ag::adam_step(params, adam, opt);
        loss_sum += loss.total.item() * static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r)
          if (detail::argmax_row(tr.logits.data(), r, grn_cfg.n_classes) == batch.labels[r]) ++correct;
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " (fold " + std::to_string(fold.fold_id) + ", epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(batch_no) + ";" +
                             detail::param_norm_report(model) + ")");
      }
    }
    EpochStats st;
    st.epoch = epoch;
    st.train_loss = loss_sum / static_cast<double>(order.size());
    st.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
    if (have_val) {
      const auto ev = evaluate_indices(model, ws, fold.val_indices, need_g ? &val_tensors : nullptr, variant);
      st.val_loss = ev.loss;
      st.val_acc = ev.accuracy;
    } else {
      st.val_loss = st.train_loss;
      st.val_acc = st.train_acc;
    }
    result.curves.push_back(st);
    const bool stop = stopper.update(epoch, st.val_loss);
    if (stopper.improved()) best.assign_from(model);
    if (stop) break;
  }

  model.assign_from(best);
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best();
  if (have_val)
    result.restored_val_loss =
        evaluate_indices(model, ws, fold.val_indices, need_g ? &val_tensors : nullptr, variant).loss;
  else
    result.restored_val_loss = result.best_val_loss;

  const auto test = evaluate(model, fold, ws, variant);
  result.test_accuracy = test.accuracy;
  result.confusion = test.confusion;
  result.model = std::move(model);
  return result;
}

// ---------------------------------------------------------------------------
// Protocol runs, ablation and sensitivity

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1)
  std::size_t n = 0;
};

inline Summary summarize(std::span<const double> xs) {
  Summary s;
  s.n = xs.size();
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

struct ProtocolRun {
  Protocol protocol = Protocol::LOSO;
  std::vector<Fold> folds;
  std::vector<RunResult> results;

  std::vector<double> accuracies() const {
    std::vector<double> a;
    for (const auto& r : results) a.push_back(r.test_accuracy);
    return a;
  }
  bool all_finite() const {
    for (const auto& r : results)
      for (const auto& e : r.curves)
        if (!std::isfinite(e.train_loss) || !std::isfinite(e.val_loss)) return false;
    return true;
  }
};

// Runs `n` independent tasks on up to `jobs` threads; exceptions are rethrown
// in task order after all threads join.
template <typename Fn>
inline void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  std::vector<std::exception_ptr> errors(n);
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::vector<Fold> make_folds(const Dataset& ds, Protocol p, const TrainConfig& tc) {
  return p == Protocol::LOSO ? split_loso(ds, tc.val_frac, tc.seed) : split_sd(ds, tc.val_frac, tc.test_frac, tc.seed);
}

inline ProtocolRun run_protocol(Workspace& ws, Protocol protocol, const GrnConfig& grn_cfg, const TrainConfig& tc,
                                std::size_t jobs = 1) {
  ProtocolRun run;
  run.protocol = protocol;
  run.folds = make_folds(ws.dataset(), protocol, tc);
  run.results.resize(run.folds.size());
  parallel_for(run.folds.size(), jobs, [&](std::size_t i) { run.results[i] = train_fold(run.folds[i], ws, grn_cfg, tc); });
  return run;
}

struct AblationRow {
  Variant variant = Variant::Full;
  Summary summary;
  std::vector<double> accuracies;  // folds x seeds
  bool all_finite = true;
};

inline std::vector<AblationRow> run_ablation(Workspace& ws, const GrnConfig& grn_cfg, const TrainConfig& tc,
                                             std::span<const std::uint64_t> seeds, std::size_t jobs = 1) {
  if (seeds.size() < 3) throw ConfigError("run_ablation: need at least 3 seeds");
  std::vector<AblationRow> rows;
  for (auto v : kAllVariants) {
    AblationRow row;
    row.variant = v;
    for (auto seed : seeds) {
      TrainConfig t = tc;
      t.variant = v;
      t.seed = seed;
      const auto run = run_protocol(ws, Protocol::LOSO, grn_cfg, t, jobs);
      const auto acc = run.accuracies();
      row.accuracies.insert(row.accuracies.end(), acc.begin(), acc.end());
      row.all_finite = row.all_finite && run.all_finite();
    }
    row.summary = summarize(row.accuracies);
    rows.push_back(std::move(row));
  }
  return rows;
}

struct SensitivityCell {
  std::size_t value = 0;
  Summary summary;
  std::vector<double> accuracies;
};

struct SensitivityTables {
  std::vector<SensitivityCell> k_r;
  std::vector<SensitivityCell> m;
};

inline std::vector<std::size_t> default_k_r_values() { return {1, 3, 5}; }
inline std::vector<std::size_t> default_m_values() { return {4, 8, 12}; }

// Sweeps K_r with M = 8, then M with K_r = 3, each under LOSO.
inline SensitivityTables run_sensitivity(Workspace& ws, const GrnConfig& grn_cfg, const TrainConfig& tc,
                                         std::span<const std::size_t> k_r_values, std::span<const std::size_t> m_values,
                                         std::span<const std::uint64_t> seeds, std::size_t jobs = 1) {
  if (seeds.empty()) throw ConfigError("run_sensitivity: need at least one seed");
  std::set<std::uint32_t> subjects;
  for (const auto& s : ws.dataset().segments) subjects.insert(s.subject_id);
  // a training sample's references exclude both the held-out subject and its own
  const std::size_t max_k = subjects.size() >= 2 ? subjects.size() - 2 : 0;
  for (auto k : k_r_values)
    if (k == 0 || k > max_k)
      throw ConfigError("run_sensitivity: K_r = " + std::to_string(k) + " exceeds the " + std::to_string(max_k) +
                        " training subjects available to every sample");
  auto sweep = [&](std::size_t value, bool is_k) {
    SensitivityCell cell;
    cell.value = value;
    GrnConfig g = grn_cfg;
    g.K_r = is_k ? value : 3;
    g.M = is_k ? 8 : value;
    for (auto seed : seeds) {
      TrainConfig t = tc;
      t.seed = seed;
      const auto acc = run_protocol(ws, Protocol::LOSO, g, t, jobs).accuracies();
      cell.accuracies.insert(cell.accuracies.end(), acc.begin(), acc.end());
    }
    cell.summary = summarize(cell.accuracies);
    return cell;
  };
  SensitivityTables out;
  for (auto k : k_r_values) out.k_r.push_back(sweep(k, true));
  for (auto m : m_values) out.m.push_back(sweep(m, false));
  return out;
}

// ---------------------------------------------------------------------------
// CSV emission

inline std::string fmt_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline void write_curves_csv(std::ostream& os, const RunResult& r) {
  os << "epoch,train_loss,val_loss,train_acc,val_acc\n";
  for (const auto& e : r.curves)
    os << e.epoch << ',' << fmt_num(e.train_loss) << ',' << fmt_num(e.val_loss) << ',' << fmt_num(e.train_acc) << ','
       << fmt_num(e.val_acc) << '\n';
}

inline void write_confusion_csv(std::ostream& os, const Confusion& c) {
  os << "true\\pred";
  for (std::size_t p = 0; p < c.n_classes; ++p) os << ',' << p;
  os << '\n';
  for (std::size_t t = 0; t < c.n_classes; ++t) {
    os << t;
    for (std::size_t p = 0; p < c.n_classes; ++p) os << ',' << c.at(t, p);
    os << '\n';
  }
}

inline void write_summary_csv(std::ostream& os, const ProtocolRun& run, Variant v, std::uint64_t seed) {
  const auto acc = run.accuracies();
  const auto s = summarize(acc);
  os << "protocol,variant,seed,n_folds,mean_accuracy,std_accuracy,fold_accuracies\n";
  os << protocol_name(run.protocol) << ',' << variant_name(v) << ',' << seed << ',' << acc.size() << ','
     << fmt_num(s.mean) << ',' << fmt_num(s.std) << ',';
  for (std::size_t i = 0; i < acc.size(); ++i) os << (i ? ";" : "") << fmt_num(acc[i]);
  os << '\n';
}

// mean/std are taken over LOSO folds x seeds.
inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "variant,label,mean_accuracy,std_accuracy,n_runs,over\n";
  for (const auto& r : rows)
    os << variant_name(r.variant) << ",\"" << variant_label(r.variant) << "\"," << fmt_num(r.summary.mean) << ','
       << fmt_num(r.summary.std) << ',' << r.summary.n << ",folds x seeds\n";
}

inline void write_sensitivity_csv(std::ostream& os, const std::string& axis, const std::vector<SensitivityCell>& cells) {
  os << axis << ",mean_accuracy,std_accuracy,n_runs\n";
  for (const auto& c : cells)
    os << c.value << ',' << fmt_num(c.summary.mean) << ',' << fmt_num(c.summary.std) << ',' << c.summary.n << '\n';
}

}  // namespace grn
