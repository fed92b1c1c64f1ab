#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "grn/binary_io.hpp"
#include "grn/error.hpp"
#include "grn/fft.hpp"

namespace grn {

// One multi-channel EEG window, channel-major: data[c * samples + t].
struct EegSegment {
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::vector<double> data;
  double fs = 0.0;
  std::uint32_t subject_id = 0;
  std::uint32_t trial_id = 0;
  std::uint32_t label = 0;

  std::span<const double> channel(std::size_t c) const {
    return {data.data() + c * samples, samples};
  }
  std::span<double> channel(std::size_t c) { return {data.data() + c * samples, samples}; }

  void validate() const {
    if (channels < 2) throw ConfigError("EegSegment: need at least 2 channels");
    if (!(fs > 0.0)) throw ConfigError("EegSegment: fs must be positive");
    if (static_cast<double>(samples) < 2.0 * fs)
      throw ConfigError("EegSegment: need at least 2 seconds of samples");
    if (data.size() != channels * samples) throw ShapeError("EegSegment: data size != C*T");
    for (double v : data)
      if (!std::isfinite(v)) throw NumericalError("EegSegment: non-finite sample");
  }
};

struct BandDef {
  std::string name;
  double lo = 0.0;  // inclusive, Hz
  double hi = 0.0;  // exclusive, Hz

  double center() const { return 0.5 * (lo + hi); }

  void validate(double fs) const {
    if (!(lo > 0.0 && lo < hi && hi < fs / 2.0))
      throw ConfigError("band " + name + " [" + std::to_string(lo) + ", " + std::to_string(hi) +
                        ") is outside (0, Nyquist=" + std::to_string(fs / 2.0) + ")");
  }
};

inline std::vector<BandDef> default_bands() {
  return {{"delta", 1.0, 4.0}, {"theta", 4.0, 8.0}, {"alpha", 8.0, 14.0},
          {"beta", 14.0, 31.0}, {"gamma", 31.0, 50.0}};
}

// Differential-entropy features, channel-major: values[c * bands + b].
struct FeatureGrid {
  std::size_t channels = 0;
  std::size_t bands = 0;
  std::vector<double> values;
  std::uint32_t subject_id = 0;
  std::uint32_t trial_id = 0;
  std::uint32_t label = 0;

  double at(std::size_t c, std::size_t b) const { return values[c * bands + b]; }
};

struct SynthConfig {
  std::size_t n_subjects = 6;
  std::size_t n_trials_per_class = 20;
  std::size_t n_classes = 3;
  std::size_t channels = 8;
  std::size_t samples = 512;
  double fs = 128.0;
  double phase_jitter_std = 0.3;
  double subject_noise_std = 0.5;
  double mixing_strength = 0.3;
  // Bandwidth of the slow phase-jitter process; sets the effective number of
  // independent phase samples per segment.
  double jitter_bandwidth_hz = 1.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_subjects < 3) throw ConfigError("n_subjects must be >= 3");
    if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
    if (n_trials_per_class < 1) throw ConfigError("n_trials_per_class must be >= 1");
    if (channels < 2) throw ConfigError("channels must be >= 2");
    if (!(fs > 0.0)) throw ConfigError("fs must be > 0");
    if (static_cast<double>(samples) < 2.0 * fs) throw ConfigError("samples must be >= 2*fs");
    if (!(phase_jitter_std >= 0.0)) throw ConfigError("phase_jitter_std must be >= 0");
    if (!(subject_noise_std >= 0.0)) throw ConfigError("subject_noise_std must be >= 0");
    if (!(mixing_strength >= 0.0 && mixing_strength <= 1.0))
      throw ConfigError("mixing_strength must lie in [0, 1]");
    if (!(jitter_bandwidth_hz > 0.0)) throw ConfigError("jitter_bandwidth_hz must be > 0");
    for (const auto& b : default_bands()) {
      if (!(b.hi < fs / 2.0))
        throw ConfigError("fs: " + std::to_string(fs) + " Hz is too low for band " + b.name);
    }
  }
};

// A generated or loaded dataset. All segments share channels, samples and fs.
struct Dataset {
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::size_t n_classes = 0;
  double fs = 0.0;
  std::vector<EegSegment> segments;

  std::size_t size() const { return segments.size(); }
};

// splitmix64 finalizer; used to derive independent, order-free RNG streams.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return mix_seed(a ^ mix_seed(b)); }

template <typename... Rest>
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, Rest... rest) {
  return mix_seed(mix_seed(a, b), static_cast<std::uint64_t>(rest)...);
}

namespace detail {

// Zero-mean, unit-sample-std Gaussian process band-limited to |f| <= bandwidth.
inline std::vector<double> smooth_unit_process(std::size_t n, double fs, double bandwidth,
                                               std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<fft::cplx> a(n);
  for (auto& v : a) v = normal(rng);
  a = fft::forward(std::move(a));
  for (std::size_t k = 0; k < n; ++k)
    if (k == 0 || std::abs(fft::bin_frequency(k, n, fs)) > bandwidth) a[k] = 0.0;
  a = fft::inverse(std::move(a));
  std::vector<double> out(n);
  double ss = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    out[t] = a[t].real();
    ss += out[t] * out[t];
  }
  const double sd = std::sqrt(ss / static_cast<double>(n));
  if (sd > 0.0)
    for (auto& v : out) v /= sd;
  return out;
}

}  // namespace detail

// Class ℓ carries one oscillator per default band at the band's center
// frequency with a class-specific amplitude topography and phase. Each
// (subject, trial, band) adds a slow phase-jitter path shared by all channels,
// so stimulus-locked phase structure survives across subjects when the jitter
// is small. Subjects then apply their own linear channel remix and white noise.
inline Dataset gen_synthetic_dataset(const SynthConfig& cfg) {
  cfg.validate();
  const auto bands = default_bands();
  const std::size_t nb = bands.size();
  const std::size_t C = cfg.channels;
  const std::size_t T = cfg.samples;

  std::mt19937_64 class_rng(mix_seed(cfg.seed, 0x636c617373ULL));
  std::uniform_real_distribution<double> amp_dist(0.2, 1.5);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
  std::vector<double> amp(cfg.n_classes * C * nb);
  std::vector<double> phase(cfg.n_classes * nb);
  for (std::size_t l = 0; l < cfg.n_classes; ++l) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t b = 0; b < nb; ++b) amp[(l * C + c) * nb + b] = amp_dist(class_rng);
    for (std::size_t b = 0; b < nb; ++b) phase[l * nb + b] = phase_dist(class_rng);
  }

  Dataset ds;
  ds.channels = C;
  ds.samples = T;
  ds.n_classes = cfg.n_classes;
  ds.fs = cfg.fs;
  ds.segments.reserve(cfg.n_subjects * cfg.n_classes * cfg.n_trials_per_class);

  std::uint32_t trial_counter = 0;
  for (std::size_t s = 0; s < cfg.n_subjects; ++s) {
    std::mt19937_64 subj_rng(mix_seed(cfg.seed, 0x7375626aULL, s));
    std::normal_distribution<double> normal(0.0, 1.0);
    // subject remix: (1 - m) I + m Q, Q Gaussian with variance 1/C
    std::vector<double> mix(C * C);
    for (auto& v : mix) v = normal(subj_rng) / std::sqrt(static_cast<double>(C));
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < C; ++j)
        mix[i * C + j] = cfg.mixing_strength * mix[i * C + j] + (i == j ? 1.0 - cfg.mixing_strength : 0.0);

    for (std::size_t k = 0; k < cfg.n_trials_per_class; ++k) {
      for (std::size_t l = 0; l < cfg.n_classes; ++l) {
        std::mt19937_64 trial_rng(mix_seed(cfg.seed, 0x747269616cULL, s, k, l));
        std::vector<double> clean(C * T, 0.0);
        for (std::size_t b = 0; b < nb; ++b) {
          const auto jitter = detail::smooth_unit_process(T, cfg.fs, cfg.jitter_bandwidth_hz, trial_rng);
          const double f = bands[b].center();
          for (std::size_t t = 0; t < T; ++t) {
            const double arg = 2.0 * std::numbers::pi * f * static_cast<double>(t) / cfg.fs +
                               phase[l * nb + b] + cfg.phase_jitter_std * jitter[t];
            const double osc = std::sin(arg);
            for (std::size_t c = 0; c < C; ++c) clean[c * T + t] += amp[(l * C + c) * nb + b] * osc;
          }
        }
        EegSegment seg;
        seg.channels = C;
        seg.samples = T;
        seg.fs = cfg.fs;
        seg.subject_id = static_cast<std::uint32_t>(s);
        seg.trial_id = trial_counter++;
        seg.label = static_cast<std::uint32_t>(l);
        seg.data.assign(C * T, 0.0);
        for (std::size_t i = 0; i < C; ++i)
          for (std::size_t j = 0; j < C; ++j) {
            const double w = mix[i * C + j];
            if (w == 0.0) continue;
            for (std::size_t t = 0; t < T; ++t) seg.data[i * T + t] += w * clean[j * T + t];
          }
        if (cfg.subject_noise_std > 0.0)
          for (auto& v : seg.data) v += cfg.subject_noise_std * normal(trial_rng);
        ds.segments.push_back(std::move(seg));
      }
    }
  }
  return ds;
}

// Ideal FFT brick-wall bandpass of one channel: keeps bins with |f| in [lo, hi).
inline std::vector<double> bandpass_signal(std::span<const double> x, double fs, const BandDef& band) {
  band.validate(fs);
  const std::size_t n = x.size();
  auto X = fft::forward(x);
  for (std::size_t k = 0; k < n; ++k) {
    const double f = std::abs(fft::bin_frequency(k, n, fs));
    if (!(f >= band.lo && f < band.hi)) X[k] = 0.0;
  }
  X = fft::inverse(std::move(X));
  std::vector<double> out(n);
  for (std::size_t t = 0; t < n; ++t) out[t] = X[t].real();
  return out;
}

inline EegSegment bandpass(const EegSegment& seg, const BandDef& band) {
  band.validate(seg.fs);
  EegSegment out = seg;
  for (std::size_t c = 0; c < seg.channels; ++c) {
    const auto y = bandpass_signal(seg.channel(c), seg.fs, band);
    std::copy(y.begin(), y.end(), out.channel(c).begin());
  }
  return out;
}

inline constexpr double kVarianceFloor = 1e-12;

// Gaussian differential entropy 0.5 ln(2 pi e var), population variance floored.
inline double de_feature(std::span<const double> x) {
  const auto n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  if (var < kVarianceFloor) var = kVarianceFloor;
  return 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * var);
}

inline FeatureGrid extract_features(const EegSegment& seg, std::span<const BandDef> bands) {
  for (const auto& b : bands) b.validate(seg.fs);
  FeatureGrid g;
  g.channels = seg.channels;
  g.bands = bands.size();
  g.values.resize(seg.channels * bands.size());
  g.subject_id = seg.subject_id;
  g.trial_id = seg.trial_id;
  g.label = seg.label;
  for (std::size_t c = 0; c < seg.channels; ++c)
    for (std::size_t b = 0; b < bands.size(); ++b)
      g.values[c * bands.size() + b] = de_feature(bandpass_signal(seg.channel(c), seg.fs, bands[b]));
  return g;
}

// ---------------------------------------------------------------------------
// "GRN1" dataset file

inline void write_dataset(std::ostream& os, const Dataset& ds) {
  io::write_magic(os, "GRN1");
  io::write_le<std::uint32_t>(os, 1);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.segments.size()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.channels));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.samples));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.n_classes));
  io::write_le<double>(os, ds.fs);
  for (const auto& seg : ds.segments) {
    io::write_le<std::uint32_t>(os, seg.subject_id);
    io::write_le<std::uint32_t>(os, seg.trial_id);
    io::write_le<std::uint32_t>(os, seg.label);
    for (double v : seg.data) io::write_le<double>(os, v);
  }
}

inline void write_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot open " + path + " for writing");
  write_dataset(os, ds);
  if (!os) throw ConfigError("write failed: " + path);
}

inline Dataset read_dataset(std::istream& is) {
  io::Reader r(is);
  r.expect_magic("GRN1");
  const auto version = r.read_le<std::uint32_t>("version");
  if (version != 1) r.fail("unsupported GRN1 version " + std::to_string(version));
  const auto n = r.read_le<std::uint32_t>("n_segments");
  Dataset ds;
  ds.channels = r.read_le<std::uint32_t>("C");
  ds.samples = r.read_le<std::uint32_t>("T");
  ds.n_classes = r.read_le<std::uint32_t>("n_classes");
  ds.fs = r.read_le<double>("fs");
  if (ds.channels == 0 || ds.samples == 0 || !(ds.fs > 0.0)) r.fail("degenerate dataset header");
  ds.segments.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    EegSegment seg;
    seg.channels = ds.channels;
    seg.samples = ds.samples;
    seg.fs = ds.fs;
    seg.subject_id = r.read_le<std::uint32_t>("subject_id");
    seg.trial_id = r.read_le<std::uint32_t>("trial_id");
    seg.label = r.read_le<std::uint32_t>("label");
    if (seg.label >= ds.n_classes) r.fail("label out of range");
    seg.data.resize(ds.channels * ds.samples);
    for (auto& v : seg.data) {
      v = r.read_le<double>("sample");
      if (!std::isfinite(v)) r.fail("non-finite sample");
    }
    ds.segments.push_back(std::move(seg));
  }
  if (!r.at_eof()) r.fail("trailing bytes after last segment");
  return ds;
}

inline Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open dataset " + path);
  return read_dataset(is);
}

}  // namespace grn
