#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "grn/autograd.hpp"
#include "grn/error.hpp"
#include "grn/signal.hpp"
#include "grn/synchrony.hpp"

namespace grn {

using ag::Tensor;

struct GrnConfig {
  std::size_t d = 32;
  std::size_t M = 8;
  std::size_t K_r = 3;
  std::size_t C = 8;
  std::size_t B = 5;
  std::size_t hidden = 64;
  std::size_t conv_channels = 8;
  std::size_t n_classes = 3;
  double lambda_proto = 0.1;
  double temperature = 1.0;

  void validate() const {
    if (d < 1 || M < 1 || K_r < 1 || hidden < 1 || conv_channels < 1 || n_classes < 1 || C < 1 || B < 1)
      throw ConfigError("GrnConfig: d, M, K_r, hidden, conv_channels, n_classes, C, B must all be >= 1");
    if (C < 3) throw ConfigError("GrnConfig: C must be >= 3 for the 3x3 resonance kernel");
    if (!(lambda_proto >= 0.0)) throw ConfigError("GrnConfig: lambda_proto must be >= 0");
    if (!(temperature > 0.0)) throw ConfigError("GrnConfig: temperature must be > 0");
  }
};

// Ablation variants. Zeroed views keep the 7d fusion width.
enum class Variant { Full, IndividualOnly, ProtoOnly, ResonanceOnly, FullNoProtoReg };

inline constexpr std::array<Variant, 5> kAllVariants{Variant::IndividualOnly, Variant::ProtoOnly,
                                                     Variant::ResonanceOnly, Variant::Full,
                                                     Variant::FullNoProtoReg};

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::IndividualOnly: return "individual_only";
    case Variant::ProtoOnly: return "proto_only";
    case Variant::ResonanceOnly: return "resonance_only";
    case Variant::FullNoProtoReg: return "full_no_protoreg";
  }
  return "?";
}

// Row labels of the ablation table.
inline std::string variant_label(Variant v) {
  switch (v) {
    case Variant::IndividualOnly: return "Individual only (remove R,G)";
    case Variant::ProtoOnly: return "+ Learnable Prototypes only (add R, no M)";
    case Variant::ResonanceOnly: return "+ Multi-Subject Resonance only (add G, no prototypes)";
    case Variant::Full: return "Full GRN (add R and G)";
    case Variant::FullNoProtoReg: return "Full GRN w/o prototype regularizer";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (auto v : kAllVariants)
    if (variant_name(v) == s) return v;
  throw ConfigError("unknown variant '" + s +
                    "' (expected full, individual_only, proto_only, resonance_only, full_no_protoreg)");
}

inline bool uses_prototypes(Variant v) { return v == Variant::Full || v == Variant::ProtoOnly || v == Variant::FullNoProtoReg; }
inline bool uses_resonance(Variant v) { return v == Variant::Full || v == Variant::ResonanceOnly || v == Variant::FullNoProtoReg; }
inline bool uses_proto_loss(Variant v) { return v == Variant::Full || v == Variant::ProtoOnly; }

// Per-feature z-scoring with statistics frozen from a training split.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> inv_std;

  bool fitted() const { return !mean.empty(); }

  void fit(std::span<const FeatureGrid* const> grids) {
    if (grids.empty()) throw ConfigError("Standardizer: empty training split");
    const std::size_t n = grids.front()->values.size();
    mean.assign(n, 0.0);
    std::vector<double> var(n, 0.0);
    for (const auto* g : grids)
      for (std::size_t i = 0; i < n; ++i) mean[i] += g->values[i];
    for (auto& m : mean) m /= static_cast<double>(grids.size());
    for (const auto* g : grids)
      for (std::size_t i = 0; i < n; ++i) var[i] += (g->values[i] - mean[i]) * (g->values[i] - mean[i]);
    inv_std.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double sd = std::sqrt(var[i] / static_cast<double>(grids.size()));
      inv_std[i] = sd > 1e-12 ? 1.0 / sd : 1.0;
    }
  }
};

struct GrnModel {
  GrnConfig cfg;
  Standardizer standardizer;
  // encoder [C*B -> hidden -> d]
  Tensor enc_w1, enc_b1, enc_w2, enc_b2;
  // prototype bank [M x d]
  Tensor prototypes;
  // resonance encoder: conv [cc x 2 x 3 x 3] + bias, linear [cc -> d]
  Tensor conv_w, conv_b, res_w, res_b;
  // fusion head [7d -> hidden -> L]
  Tensor fuse_w1, fuse_b1, fuse_w2, fuse_b2;

  static GrnModel init(const GrnConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    GrnModel m;
    m.cfg = cfg;
    const std::size_t in = cfg.C * cfg.B;
    m.enc_w1 = ag::init::xavier_uniform({in, cfg.hidden}, in, cfg.hidden, rng);
    m.enc_b1 = Tensor::zeros({cfg.hidden}, true);
    m.enc_w2 = ag::init::xavier_uniform({cfg.hidden, cfg.d}, cfg.hidden, cfg.d, rng);
    m.enc_b2 = Tensor::zeros({cfg.d}, true);
    m.prototypes = ag::init::normal({cfg.M, cfg.d}, 1.0 / std::sqrt(static_cast<double>(cfg.d)), rng);
    m.conv_w = ag::init::xavier_uniform({cfg.conv_channels, 2, 3, 3}, 2 * 9, cfg.conv_channels * 9, rng);
    m.conv_b = Tensor::zeros({cfg.conv_channels}, true);
    m.res_w = ag::init::xavier_uniform({cfg.conv_channels, cfg.d}, cfg.conv_channels, cfg.d, rng);
    m.res_b = Tensor::zeros({cfg.d}, true);
    m.fuse_w1 = ag::init::xavier_uniform({7 * cfg.d, cfg.hidden}, 7 * cfg.d, cfg.hidden, rng);
    m.fuse_b1 = Tensor::zeros({cfg.hidden}, true);
    m.fuse_w2 = ag::init::xavier_uniform({cfg.hidden, cfg.n_classes}, cfg.hidden, cfg.n_classes, rng);
    m.fuse_b2 = Tensor::zeros({cfg.n_classes}, true);
    return m;
  }

  ag::NamedTensors named_parameters() const {
    return {{"encoder.w1", enc_w1}, {"encoder.b1", enc_b1}, {"encoder.w2", enc_w2}, {"encoder.b2", enc_b2},
            {"prototypes", prototypes}, {"resenc.conv_w", conv_w}, {"resenc.conv_b", conv_b},
            {"resenc.w", res_w},        {"resenc.b", res_b},       {"fusion.w1", fuse_w1},
            {"fusion.b1", fuse_b1},     {"fusion.w2", fuse_w2},    {"fusion.b2", fuse_b2}};
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.zero_grad();
  }

  // Deep copy with fresh parameter leaves (no shared storage with *this).
  GrnModel snapshot() const {
    GrnModel m = *this;
    for (Tensor* t : m.fields()) *t = t->clone_param();
    return m;
  }

  // Overwrite parameter values in place from another model of identical shape.
  void assign_from(const GrnModel& other) {
    auto dst = fields();
    const auto src = other.fields();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->mutable_data() = src[i]->data();
    standardizer = other.standardizer;
  }

  void load(const ag::NamedTensors& named) {
    auto mine = named_parameters();
    if (named.size() != mine.size()) throw FormatError("checkpoint has " + std::to_string(named.size()) + " tensors, model has " + std::to_string(mine.size()));
    for (std::size_t i = 0; i < mine.size(); ++i) {
      if (named[i].first != mine[i].first) throw FormatError("checkpoint tensor '" + named[i].first + "' where '" + mine[i].first + "' expected");
      if (named[i].second.shape() != mine[i].second.shape()) throw FormatError("checkpoint tensor '" + named[i].first + "' has wrong shape");
      mine[i].second.mutable_data() = named[i].second.data();
    }
  }

 private:
  std::vector<Tensor*> fields() {
    return {&enc_w1, &enc_b1, &enc_w2, &enc_b2, &prototypes, &conv_w, &conv_b,
            &res_w,  &res_b,  &fuse_w1, &fuse_b1, &fuse_w2, &fuse_b2};
  }
  std::vector<const Tensor*> fields() const {
    return {&enc_w1, &enc_b1, &enc_w2, &enc_b2, &prototypes, &conv_w, &conv_b,
            &res_w,  &res_b,  &fuse_w1, &fuse_b1, &fuse_w2, &fuse_b2};
  }
};

struct ForwardTrace {
  Tensor F, alpha, R, G, logits;
};

// ---------------------------------------------------------------------------
// Batch assembly (inputs carry no gradient)

inline Tensor feature_batch(const Standardizer& st, std::span<const FeatureGrid* const> grids,
                            std::size_t C, std::size_t B) {
  if (!st.fitted()) throw ConfigError("encode: standardizer has not been fitted on a training split");
  const std::size_t w = C * B;
  std::vector<double> x(grids.size() * w);
  for (std::size_t r = 0; r < grids.size(); ++r) {
    const auto* g = grids[r];
    if (g->channels != C || g->bands != B)
      throw ShapeError("encode: feature grid [" + std::to_string(g->channels) + "x" + std::to_string(g->bands) +
                       "] does not match config [" + std::to_string(C) + "x" + std::to_string(B) + "]");
    for (std::size_t i = 0; i < w; ++i) x[r * w + i] = (g->values[i] - st.mean[i]) * st.inv_std[i];
  }
  return Tensor::from_data({grids.size(), w}, std::move(x));
}

// [batch x K_r x C x C x 2] tensor from per-sample resonance tensors.
inline Tensor resonance_batch(std::span<const ResonanceTensor* const> ts) {
  if (ts.empty()) throw ShapeError("resonance_batch: empty batch");
  const std::size_t K = ts[0]->refs, C = ts[0]->channels;
  std::vector<double> v;
  v.reserve(ts.size() * K * C * C * 2);
  for (const auto* t : ts) {
    if (t->refs != K || t->channels != C) throw ShapeError("resonance_batch: ragged batch");
    v.insert(v.end(), t->values.begin(), t->values.end());
  }
  return Tensor::from_data({ts.size(), K, C, C, 2}, std::move(v));
}

// ---------------------------------------------------------------------------
// Forward components

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return ag::add_bias(ag::matmul(x, w), b); }

// Standardized features [batch x C*B] -> F [batch x d].
inline Tensor encode(const GrnModel& m, const Tensor& x) {
  return linear(ag::relu(linear(x, m.enc_w1, m.enc_b1)), m.enc_w2, m.enc_b2);
}

inline Tensor encode(const GrnModel& m, std::span<const FeatureGrid* const> grids) {
  return encode(m, feature_batch(m.standardizer, grids, m.cfg.C, m.cfg.B));
}

// alpha = softmax((F P^T) / (sqrt(d) tau)) rowwise.
inline Tensor prototype_attention(const Tensor& F, const Tensor& P, double tau) {
  if (F.rank() != 2 || P.rank() != 2 || F.dim(1) != P.dim(1))
    throw ShapeError("prototype_attention: incompatible shapes " + ag::shape_str(F.shape()) + " and " +
                     ag::shape_str(P.shape()));
  if (!(tau > 0.0)) throw ConfigError("prototype_attention: temperature must be > 0");
  const double s = 1.0 / (std::sqrt(static_cast<double>(F.dim(1))) * tau);
  return ag::softmax(ag::scale(ag::matmul(F, ag::transpose(P)), s));
}

inline Tensor prototype_resonance(const Tensor& alpha, const Tensor& P) { return ag::matmul(alpha, P); }

// [batch x K_r x C x C x 2] -> G [batch x d]. One conv shared over reference
// slices; slice embeddings are averaged, so the result does not depend on slice order.
inline Tensor res_encode(const GrnModel& m, const Tensor& mt) {
  if (mt.rank() != 5 || mt.dim(4) != 2 || mt.dim(2) != mt.dim(3))
    throw ShapeError("res_encode: expected [batch x K_r x C x C x 2], got " + ag::shape_str(mt.shape()));
  const std::size_t batch = mt.dim(0), K = mt.dim(1), C = mt.dim(2);
  if (C < 3) throw ShapeError("res_encode: C = " + std::to_string(C) + " is smaller than the 3x3 kernel");
  // synchrony kind becomes the conv input-channel axis
  std::vector<double> x(batch * K * 2 * C * C);
  const auto& src = mt.data();
  for (std::size_t bk = 0; bk < batch * K; ++bk)
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < C; ++j)
        for (std::size_t q = 0; q < 2; ++q) x[((bk * 2 + q) * C + i) * C + j] = src[((bk * C + i) * C + j) * 2 + q];
  auto input = Tensor::from_data({batch * K, 2, C, C}, std::move(x));
  auto h = ag::mean_pool_spatial(ag::relu(ag::conv2d(input, m.conv_w, m.conv_b)));
  h = ag::mean_axis(ag::reshape(h, {batch, K, m.cfg.conv_channels}), 1);
  return linear(h, m.res_w, m.res_b);
}

// z = [F, R, G, F-R, F-G, F*R, F*G] -> MLP -> logits.
inline Tensor fuse(const GrnModel& m, const Tensor& F, const Tensor& R, const Tensor& G) {
  if (F.shape() != R.shape() || F.shape() != G.shape())
    throw ShapeError("fuse: F, R, G must share a shape, got " + ag::shape_str(F.shape()) + ", " +
                     ag::shape_str(R.shape()) + ", " + ag::shape_str(G.shape()));
  auto z = ag::concat({F, R, G, ag::sub(F, R), ag::sub(F, G), ag::mul(F, R), ag::mul(F, G)});
  return linear(ag::relu(linear(z, m.fuse_w1, m.fuse_b1)), m.fuse_w2, m.fuse_b2);
}

struct LossParts {
  Tensor total, cls, proto;
};

// Mean over the batch of sum_m alpha[b,m] * ||F[b] - p_m||^2 / d.
inline Tensor prototype_loss(const Tensor& alpha, const Tensor& F, const Tensor& P) {
  const std::size_t batch = F.dim(0), M = P.dim(0);
  std::vector<Tensor> cols;
  cols.reserve(M);
  for (std::size_t m = 0; m < M; ++m) {
    auto diff = ag::add_bias(F, ag::scale(ag::row(P, m), -1.0));
    cols.push_back(ag::reshape(ag::mean_axis(ag::square(diff), 1), {batch, 1}));
  }
  auto dist = ag::concat(cols);
  return ag::scale(ag::sum(ag::mul(alpha, dist)), 1.0 / static_cast<double>(batch));
}

inline LossParts grn_loss(const Tensor& logits, std::span<const std::uint32_t> labels, const Tensor& alpha,
                          const Tensor& F, const Tensor& P, double lambda) {
  LossParts out;
  out.cls = ag::cross_entropy_with_logits(logits, labels);
  if (lambda == 0.0) {
    out.proto = Tensor::scalar(0.0);
    out.total = out.cls;
    return out;
  }
  out.proto = prototype_loss(alpha, F, P);
  out.total = ag::add(out.cls, ag::scale(out.proto, lambda));
  return out;
}

// encode -> attention -> resonance -> ResEnc -> fuse. Views the variant drops
// are replaced by constant zeros. mt may be undefined when the variant does not use G.
inline ForwardTrace forward_full(const GrnModel& m, const Tensor& x, const Tensor& mt, Variant variant) {
  ForwardTrace tr;
  tr.F = encode(m, x);
  const ag::Shape zshape{x.dim(0), m.cfg.d};
  tr.alpha = prototype_attention(tr.F, m.prototypes, m.cfg.temperature);
  tr.R = uses_prototypes(variant) ? prototype_resonance(tr.alpha, m.prototypes) : Tensor::zeros(zshape);
  if (uses_resonance(variant)) {
    if (!mt.defined()) throw ConfigError("forward_full: variant " + variant_name(variant) + " needs resonance tensors");
    if (mt.dim(0) != x.dim(0)) throw ShapeError("forward_full: feature and tensor batches differ");
    tr.G = res_encode(m, mt);
  } else {
    tr.G = Tensor::zeros(zshape);
  }
  tr.logits = fuse(m, tr.F, tr.R, tr.G);
  return tr;
}

inline double effective_lambda(const GrnConfig& cfg, Variant v) { return uses_proto_loss(v) ? cfg.lambda_proto : 0.0; }

}  // namespace grn
