#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "grn/binary_io.hpp"
#include "grn/error.hpp"
#include "grn/fft.hpp"
#include "grn/signal.hpp"

namespace grn {

using cplx = std::complex<double>;

enum class SyncKind { PLV, CoH };

// C x C synchrony between a sample (rows) and a reference (columns).
struct SyncMatrix {
  std::size_t channels = 0;
  std::vector<double> values;
  SyncKind kind = SyncKind::PLV;
  std::optional<BandDef> band;  // empty: band-averaged
  bool degenerate = false;      // some pair hit a zero PSD and was set to 0

  double at(std::size_t i, std::size_t j) const { return values[i * channels + j]; }
};

struct WelchConfig {
  std::size_t segment_len = 256;
  double overlap = 0.5;  // Hann window is the only supported window

  std::size_t step() const {
    const auto s = static_cast<std::size_t>(std::floor(static_cast<double>(segment_len) * (1.0 - overlap)));
    return s == 0 ? 1 : s;
  }
  std::size_t n_segments(std::size_t n) const {
    if (segment_len > n) return 0;
    return 1 + (n - segment_len) / step();
  }
  void validate(std::size_t n) const {
    if (!fft::is_pow2(segment_len)) throw ConfigError("welch segment_len must be a power of two");
    if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("welch overlap must lie in [0, 1)");
    if (segment_len > n) throw ConfigError("welch segment_len exceeds signal length");
    if (n_segments(n) < 2) throw ConfigError("welch configuration yields fewer than 2 segments");
  }
};

// Last axis: 0 = PLV, 1 = CoH. Layout values[((k * C + i) * C + j) * 2 + kind].
struct ResonanceTensor {
  std::size_t refs = 0;
  std::size_t channels = 0;
  std::vector<double> values;
  std::vector<std::uint32_t> reference_subject_ids;
  bool degenerate = false;

  double at(std::size_t k, std::size_t i, std::size_t j, std::size_t kind) const {
    return values[((k * channels + i) * channels + j) * 2 + kind];
  }
};

// ---------------------------------------------------------------------------
// Primitive transforms

// FFT construction of the analytic signal; T must be even so the Nyquist bin is unambiguous.
inline std::vector<cplx> analytic_signal(std::span<const double> x) {
  const std::size_t n = x.size();
  if (n < 4) throw ShapeError("analytic_signal: need at least 4 samples");
  if (n % 2 != 0) throw ShapeError("analytic_signal: odd length " + std::to_string(n));
  auto X = fft::forward(x);
  for (std::size_t k = 1; k < n / 2; ++k) X[k] *= 2.0;
  for (std::size_t k = n / 2 + 1; k < n; ++k) X[k] = 0.0;
  return fft::inverse(std::move(X));
}

inline std::vector<double> instantaneous_phase(std::span<const cplx> z) {
  std::vector<double> ph(z.size());
  for (std::size_t t = 0; t < z.size(); ++t) ph[t] = std::arg(z[t]);
  return ph;
}

// |mean exp(i (a - b))|.
inline double plv_pair(std::span<const double> phase_a, std::span<const double> phase_b) {
  if (phase_a.size() != phase_b.size())
    throw ShapeError("plv_pair: length mismatch " + std::to_string(phase_a.size()) + " vs " +
                     std::to_string(phase_b.size()));
  if (phase_a.empty()) throw ShapeError("plv_pair: empty input");
  double re = 0.0, im = 0.0;
  for (std::size_t t = 0; t < phase_a.size(); ++t) {
    const double d = phase_a[t] - phase_b[t];
    re += std::cos(d);
    im += std::sin(d);
  }
  const auto n = static_cast<double>(phase_a.size());
  return std::hypot(re / n, im / n);
}

// Periodic Hann window.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n)));
  return w;
}

namespace detail {

// Hann-windowed, mean-removed FFT of every Welch segment; [seg][bin], all segment_len bins.
inline std::vector<std::vector<cplx>> welch_segments(std::span<const double> x, const WelchConfig& cfg) {
  const std::size_t L = cfg.segment_len;
  const auto w = hann_window(L);
  const std::size_t ns = cfg.n_segments(x.size());
  std::vector<std::vector<cplx>> out(ns);
  for (std::size_t s = 0; s < ns; ++s) {
    const std::size_t start = s * cfg.step();
    double mean = 0.0;
    for (std::size_t i = 0; i < L; ++i) mean += x[start + i];
    mean /= static_cast<double>(L);
    std::vector<cplx> buf(L);
    for (std::size_t i = 0; i < L; ++i) buf[i] = (x[start + i] - mean) * w[i];
    out[s] = fft::forward(std::move(buf));
  }
  return out;
}

inline bool in_any_band(double f, std::span<const BandDef> bands) {
  for (const auto& b : bands)
    if (f >= b.lo && f < b.hi) return true;
  return false;
}

}  // namespace detail

struct CrossSpectrum {
  std::vector<double> freqs;  // one-sided, 0 .. fs/2
  std::vector<cplx> values;   // density units^2 / Hz
};

// Welch cross-spectral density: mean over Hann segments of X conj(Y), scaled by
// 1 / (fs * sum w^2), one-sided with interior bins doubled. Each segment is
// mean-removed before windowing.
inline CrossSpectrum welch_csd(std::span<const double> x, std::span<const double> y, const WelchConfig& cfg,
                               double fs) {
  if (x.size() != y.size()) throw ShapeError("welch_csd: length mismatch");
  cfg.validate(x.size());
  const std::size_t L = cfg.segment_len;
  const auto sx = detail::welch_segments(x, cfg);
  const auto sy = detail::welch_segments(y, cfg);
  double wpow = 0.0;
  for (double v : hann_window(L)) wpow += v * v;
  const double scale = 1.0 / (fs * wpow * static_cast<double>(sx.size()));
  CrossSpectrum out;
  const std::size_t nbins = L / 2 + 1;
  out.freqs.resize(nbins);
  out.values.assign(nbins, 0.0);
  for (std::size_t k = 0; k < nbins; ++k) {
    out.freqs[k] = static_cast<double>(k) * fs / static_cast<double>(L);
    cplx acc = 0.0;
    for (std::size_t s = 0; s < sx.size(); ++s) acc += sx[s][k] * std::conj(sy[s][k]);
    acc *= scale;
    if (k != 0 && k != L / 2) acc *= 2.0;
    out.values[k] = acc;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-segment precomputation shared by the matrix builders and the pair cache.

struct SegmentSpectra {
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::size_t n_bands = 0;
  // unit phasors of the band-limited analytic signal, [c][band][t]; 0 where amplitude is 0
  std::vector<cplx> phasors;
  std::size_t n_welch = 0;
  std::size_t n_bins = 0;  // Welch bins inside the band union
  std::vector<cplx> welch;  // [c][seg][bin]
  std::vector<double> auto_power;  // [c][bin], sum over segments of |X|^2

  const cplx* phasor_row(std::size_t c, std::size_t b) const {
    return phasors.data() + (c * n_bands + b) * samples;
  }
};

inline std::vector<cplx> unit_phasors(std::span<const double> x, double fs, const BandDef& band) {
  const auto filtered = bandpass_signal(x, fs, band);
  auto z = analytic_signal(filtered);
  for (auto& v : z) {
    const double a = std::abs(v);
    v = a > 0.0 ? v / a : cplx(0.0, 0.0);
  }
  return z;
}

inline SegmentSpectra compute_spectra(const EegSegment& seg, std::span<const BandDef> bands,
                                      const WelchConfig& cfg, bool with_plv = true, bool with_coh = true) {
  SegmentSpectra sp;
  sp.channels = seg.channels;
  sp.samples = seg.samples;
  sp.n_bands = bands.size();
  if (with_plv) {
    sp.phasors.resize(seg.channels * bands.size() * seg.samples);
    for (std::size_t c = 0; c < seg.channels; ++c)
      for (std::size_t b = 0; b < bands.size(); ++b) {
        const auto z = unit_phasors(seg.channel(c), seg.fs, bands[b]);
        std::copy(z.begin(), z.end(), sp.phasors.begin() + static_cast<std::ptrdiff_t>((c * bands.size() + b) * seg.samples));
      }
  }
  if (with_coh) {
    cfg.validate(seg.samples);
    const std::size_t L = cfg.segment_len;
    std::vector<std::size_t> bins;
    for (std::size_t k = 0; k <= L / 2; ++k)
      if (detail::in_any_band(static_cast<double>(k) * seg.fs / static_cast<double>(L), bands)) bins.push_back(k);
    sp.n_welch = cfg.n_segments(seg.samples);
    sp.n_bins = bins.size();
    sp.welch.resize(seg.channels * sp.n_welch * sp.n_bins);
    sp.auto_power.assign(seg.channels * sp.n_bins, 0.0);
    for (std::size_t c = 0; c < seg.channels; ++c) {
      const auto segs = detail::welch_segments(seg.channel(c), cfg);
      for (std::size_t s = 0; s < sp.n_welch; ++s)
        for (std::size_t q = 0; q < sp.n_bins; ++q) {
          const cplx v = segs[s][bins[q]];
          sp.welch[(c * sp.n_welch + s) * sp.n_bins + q] = v;
          sp.auto_power[c * sp.n_bins + q] += (v * std::conj(v)).real();
        }
    }
  }
  return sp;
}

namespace detail {

inline void check_compatible(const EegSegment& a, const EegSegment& b) {
  if (a.channels != b.channels || a.samples != b.samples)
    throw ShapeError("segment shape mismatch: [" + std::to_string(a.channels) + "x" + std::to_string(a.samples) +
                     "] vs [" + std::to_string(b.channels) + "x" + std::to_string(b.samples) + "]");
  if (a.fs != b.fs) throw ShapeError("segment sampling-rate mismatch");
}

inline double plv_phasor(const cplx* a, const cplx* b, std::size_t n) {
  double re = 0.0, im = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const cplx p = a[t] * std::conj(b[t]);
    re += p.real();
    im += p.imag();
  }
  return std::hypot(re / static_cast<double>(n), im / static_cast<double>(n));
}

}  // namespace detail

// PLV of one band between sample channel i (rows) and reference channel j (columns).
inline void plv_band_kernel(const SegmentSpectra& a, const SegmentSpectra& b, std::size_t band,
                            std::span<double> out) {
  const std::size_t C = a.channels;
  for (std::size_t i = 0; i < C; ++i)
    for (std::size_t j = 0; j < C; ++j)
      out[i * C + j] = detail::plv_phasor(a.phasor_row(i, band), b.phasor_row(j, band), a.samples);
}

// Band-averaged magnitude-squared coherence. Returns true when any pair had a zero PSD.
inline bool coherence_kernel(const SegmentSpectra& a, const SegmentSpectra& b, std::span<double> out) {
  const std::size_t C = a.channels;
  bool degenerate = false;
  for (std::size_t i = 0; i < C; ++i)
    for (std::size_t j = 0; j < C; ++j) {
      double acc = 0.0;
      bool bad = a.n_bins == 0;
      for (std::size_t q = 0; q < a.n_bins && !bad; ++q) {
        cplx sxy = 0.0;
        for (std::size_t s = 0; s < a.n_welch; ++s)
          sxy += a.welch[(i * a.n_welch + s) * a.n_bins + q] * std::conj(b.welch[(j * b.n_welch + s) * b.n_bins + q]);
        const double den = a.auto_power[i * a.n_bins + q] * b.auto_power[j * b.n_bins + q];
        if (!(den > 0.0)) {
          bad = true;
          break;
        }
        acc += std::norm(sxy) / den;
      }
      if (bad) {
        degenerate = true;
        out[i * C + j] = 0.0;
      } else {
        out[i * C + j] = acc / static_cast<double>(a.n_bins);
      }
    }
  return degenerate;
}

// Fills one K_r slice ([C][C][2]) of a resonance tensor.
inline bool resonance_slice(const SegmentSpectra& sample, const SegmentSpectra& ref, std::span<double> out) {
  const std::size_t C = sample.channels;
  std::vector<double> acc(C * C, 0.0), tmp(C * C);
  for (std::size_t b = 0; b < sample.n_bands; ++b) {
    plv_band_kernel(sample, ref, b, tmp);
    for (std::size_t q = 0; q < C * C; ++q) acc[q] += tmp[q];
  }
  const bool degenerate = coherence_kernel(sample, ref, tmp);
  for (std::size_t q = 0; q < C * C; ++q) {
    out[2 * q] = acc[q] / static_cast<double>(sample.n_bands);
    out[2 * q + 1] = tmp[q];
  }
  return degenerate;
}

// ---------------------------------------------------------------------------
// Matrix builders

inline SyncMatrix plv_matrix(const EegSegment& seg_a, const EegSegment& seg_b, const BandDef& band) {
  detail::check_compatible(seg_a, seg_b);
  band.validate(seg_a.fs);
  const std::array<BandDef, 1> one{band};
  const auto sa = compute_spectra(seg_a, one, {}, true, false);
  const auto sb = compute_spectra(seg_b, one, {}, true, false);
  SyncMatrix m;
  m.channels = seg_a.channels;
  m.kind = SyncKind::PLV;
  m.band = band;
  m.values.resize(m.channels * m.channels);
  plv_band_kernel(sa, sb, 0, m.values);
  return m;
}

inline SyncMatrix coherence_matrix(const EegSegment& seg_a, const EegSegment& seg_b, const WelchConfig& cfg,
                                   std::span<const BandDef> bands) {
  detail::check_compatible(seg_a, seg_b);
  for (const auto& b : bands) b.validate(seg_a.fs);
  const auto sa = compute_spectra(seg_a, bands, cfg, false, true);
  const auto sb = compute_spectra(seg_b, bands, cfg, false, true);
  SyncMatrix m;
  m.channels = seg_a.channels;
  m.kind = SyncKind::CoH;
  m.values.resize(m.channels * m.channels);
  m.degenerate = coherence_kernel(sa, sb, m.values);
  return m;
}

struct ResonanceOptions {
  // Off only in unit tests that deliberately use the sample as its own reference.
  bool subject_guard = true;
};

inline ResonanceTensor build_resonance_tensor(const EegSegment& sample, std::span<const EegSegment> refs,
                                              std::span<const BandDef> bands, const WelchConfig& cfg,
                                              ResonanceOptions opts = {}) {
  if (refs.empty()) throw ConfigError("build_resonance_tensor: need at least one reference");
  for (const auto& b : bands) b.validate(sample.fs);
  for (const auto& r : refs) {
    detail::check_compatible(sample, r);
    if (opts.subject_guard && r.subject_id == sample.subject_id)
      throw LeakageError("reference subject " + std::to_string(r.subject_id) + " equals sample subject");
  }
  ResonanceTensor rt;
  rt.refs = refs.size();
  rt.channels = sample.channels;
  rt.values.resize(rt.refs * rt.channels * rt.channels * 2);
  const auto ss = compute_spectra(sample, bands, cfg);
  const std::size_t slice = rt.channels * rt.channels * 2;
  for (std::size_t k = 0; k < refs.size(); ++k) {
    const auto rs = compute_spectra(refs[k], bands, cfg);
    rt.degenerate |= resonance_slice(ss, rs, std::span<double>(rt.values).subspan(k * slice, slice));
    rt.reference_subject_ids.push_back(refs[k].subject_id);
  }
  return rt;
}

// ---------------------------------------------------------------------------
// Memoized pair slices over a fixed dataset. Pair synchrony does not depend on
// the fold, so one cache serves every fold, seed and variant of a run.

class SynchronyCache {
 public:
  SynchronyCache(const Dataset& ds, std::vector<BandDef> bands, WelchConfig cfg)
      : ds_(ds), bands_(std::move(bands)), cfg_(cfg), spectra_(ds.size()), rows_(ds.size()) {
    for (const auto& b : bands_) b.validate(ds.fs);
    cfg_.validate(ds.samples);
    for (auto& r : rows_) r = std::make_unique<Row>();
  }

  std::size_t slice_size() const { return ds_.channels * ds_.channels * 2; }

  // Copies the [C][C][2] slice for (sample, ref) into out.
  void slice(std::size_t sample, std::size_t ref, std::span<double> out) {
    Row& row = *rows_[sample];
    {
      std::lock_guard lk(row.mu);
      if (auto it = row.slices.find(ref); it != row.slices.end()) {
        std::copy(it->second.begin(), it->second.end(), out.begin());
        return;
      }
    }
    std::vector<double> v(slice_size());
    resonance_slice(spectra(sample), spectra(ref), v);
    std::copy(v.begin(), v.end(), out.begin());
    std::lock_guard lk(row.mu);
    row.slices.emplace(ref, std::move(v));
  }

  ResonanceTensor tensor(std::size_t sample, std::span<const std::size_t> refs) {
    const auto& s = ds_.segments.at(sample);
    ResonanceTensor rt;
    rt.refs = refs.size();
    rt.channels = ds_.channels;
    rt.values.resize(refs.size() * slice_size());
    for (std::size_t k = 0; k < refs.size(); ++k) {
      const auto& r = ds_.segments.at(refs[k]);
      if (r.subject_id == s.subject_id)
        throw LeakageError("reference subject " + std::to_string(r.subject_id) + " equals sample subject");
      slice(sample, refs[k], std::span<double>(rt.values).subspan(k * slice_size(), slice_size()));
      rt.reference_subject_ids.push_back(r.subject_id);
    }
    return rt;
  }

  const std::vector<BandDef>& bands() const { return bands_; }
  const WelchConfig& welch() const { return cfg_; }

 private:
  struct Row {
    std::mutex mu;
    std::unordered_map<std::size_t, std::vector<double>> slices;
  };

  const SegmentSpectra& spectra(std::size_t i) {
    std::lock_guard lk(spectra_mu_);
    if (!spectra_[i]) spectra_[i] = std::make_unique<SegmentSpectra>(compute_spectra(ds_.segments[i], bands_, cfg_));
    return *spectra_[i];
  }

  const Dataset& ds_;
  std::vector<BandDef> bands_;
  WelchConfig cfg_;
  std::mutex spectra_mu_;
  std::vector<std::unique_ptr<SegmentSpectra>> spectra_;
  std::vector<std::unique_ptr<Row>> rows_;
};

// ---------------------------------------------------------------------------
// "GRNM" tensor dump (debugging aid)

inline void write_resonance_tensor(std::ostream& os, const ResonanceTensor& rt) {
  io::write_magic(os, "GRNM");
  io::write_le<std::uint32_t>(os, 1);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(rt.refs));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(rt.channels));
  for (auto id : rt.reference_subject_ids) io::write_le<std::uint32_t>(os, id);
  for (double v : rt.values) io::write_le<double>(os, v);
}

inline ResonanceTensor read_resonance_tensor(std::istream& is) {
  io::Reader r(is);
  r.expect_magic("GRNM");
  if (const auto v = r.read_le<std::uint32_t>("version"); v != 1) r.fail("unsupported GRNM version");
  ResonanceTensor rt;
  rt.refs = r.read_le<std::uint32_t>("K_r");
  rt.channels = r.read_le<std::uint32_t>("C");
  for (std::size_t k = 0; k < rt.refs; ++k) rt.reference_subject_ids.push_back(r.read_le<std::uint32_t>("ref id"));
  rt.values.resize(rt.refs * rt.channels * rt.channels * 2);
  for (auto& v : rt.values) v = r.read_le<double>("value");
  return rt;
}

}  // namespace grn
