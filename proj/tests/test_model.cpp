#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "gradcheck.hpp"
#include "grn/model.hpp"

using namespace grn;
using ag::Tensor;
using grn::testing::check_gradients;

namespace {

constexpr double kGradTol = 1e-4;

Tensor rand_tensor(ag::Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0, bool grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(ag::numel(s));
  for (auto& x : v) x = u(rng);
  return Tensor::from_data(std::move(s), std::move(v), grad);
}

GrnConfig tiny_config() {
  GrnConfig c;
  c.d = 8;
  c.M = 3;
  c.K_r = 2;
  c.C = 4;
  c.B = 5;
  c.hidden = 6;
  c.conv_channels = 3;
  c.n_classes = 3;
  c.lambda_proto = 0.1;
  return c;
}

std::vector<FeatureGrid> random_grids(std::size_t n, std::size_t C, std::size_t B, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0, 1);
  std::vector<FeatureGrid> out(n);
  for (auto& g : out) {
    g.channels = C;
    g.bands = B;
    g.values.resize(C * B);
    for (auto& v : g.values) v = nd(rng);
  }
  return out;
}

std::vector<const FeatureGrid*> ptrs(const std::vector<FeatureGrid>& gs) {
  std::vector<const FeatureGrid*> p;
  for (const auto& g : gs) p.push_back(&g);
  return p;
}

GrnModel fitted_model(const GrnConfig& cfg, std::uint64_t seed, const std::vector<FeatureGrid>& train) {
  auto m = GrnModel::init(cfg, seed);
  const auto p = ptrs(train);
  m.standardizer.fit(p);
  return m;
}

std::vector<std::string> names_of(const GrnModel& m) {
  std::vector<std::string> n;
  for (const auto& [name, t] : m.named_parameters()) n.push_back(name);
  return n;
}

}  // namespace

TEST(Config, ValidationRejectsBadValues) {
  GrnConfig c;
  EXPECT_NO_THROW(c.validate());
  c.C = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.temperature = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lambda_proto = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.M = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Variants, ExactlyFiveNamesRoundTrip) {
  std::vector<std::string> names;
  for (auto v : kAllVariants) {
    names.push_back(variant_name(v));
    EXPECT_EQ(parse_variant(variant_name(v)), v);
  }
  std::sort(names.begin(), names.end());
  EXPECT_EQ(names, (std::vector<std::string>{"full", "full_no_protoreg", "individual_only", "proto_only",
                                              "resonance_only"}));
  EXPECT_THROW(parse_variant("Full"), ConfigError);
  EXPECT_THROW(parse_variant("both"), ConfigError);
  EXPECT_EQ(effective_lambda(GrnConfig{}, Variant::FullNoProtoReg), 0.0);
  EXPECT_EQ(effective_lambda(GrnConfig{}, Variant::ResonanceOnly), 0.0);
  EXPECT_EQ(effective_lambda(GrnConfig{}, Variant::Full), GrnConfig{}.lambda_proto);
}

TEST(Init, PrototypesAreFiniteAndNonZero) {
  const auto m = GrnModel::init(GrnConfig{}, 3);
  const auto& P = m.prototypes;
  for (std::size_t r = 0; r < P.dim(0); ++r) {
    double ss = 0;
    for (std::size_t j = 0; j < P.dim(1); ++j) {
      ASSERT_TRUE(std::isfinite(P.data()[r * P.dim(1) + j]));
      ss += P.data()[r * P.dim(1) + j] * P.data()[r * P.dim(1) + j];
    }
    EXPECT_GT(ss, 0.0);
  }
  EXPECT_EQ(m.fuse_w1.dim(0), 224u);  // 7d at d = 32
}

TEST(Standardizer, TrainingColumnsBecomeStandard) {
  std::mt19937_64 rng(1);
  auto grids = random_grids(40, 3, 2, rng);
  for (auto& g : grids) g.values[0] = 5.0 + 3.0 * g.values[0];
  Standardizer st;
  st.fit(ptrs(grids));
  const auto x = feature_batch(st, ptrs(grids), 3, 2);
  for (std::size_t j = 0; j < 6; ++j) {
    double mean = 0, var = 0;
    for (std::size_t r = 0; r < 40; ++r) mean += x.data()[r * 6 + j];
    mean /= 40;
    for (std::size_t r = 0; r < 40; ++r) var += std::pow(x.data()[r * 6 + j] - mean, 2);
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var / 40, 1.0, 1e-12);
  }
}

TEST(Encode, ShapeAndDeterminism) {
  std::mt19937_64 rng(2);
  auto grids = random_grids(4, 8, 5, rng);
  const auto m = fitted_model(GrnConfig{}, 1, grids);
  const auto F = encode(m, ptrs(grids));
  EXPECT_EQ(F.shape(), (ag::Shape{4, 32}));
  grids[1] = grids[0];
  const auto F2 = encode(m, ptrs(grids));
  EXPECT_TRUE(std::equal(F2.data().begin(), F2.data().begin() + 32, F2.data().begin() + 32));
}

TEST(Encode, UnfittedStandardizerIsAnError) {
  std::mt19937_64 rng(3);
  const auto grids = random_grids(2, 8, 5, rng);
  const auto m = GrnModel::init(GrnConfig{}, 1);
  EXPECT_THROW(encode(m, ptrs(grids)), ConfigError);
}

TEST(Encode, MismatchedGridIsShapeError) {
  std::mt19937_64 rng(3);
  const auto train = random_grids(4, 8, 5, rng);
  const auto m = fitted_model(GrnConfig{}, 1, train);
  const auto other = random_grids(2, 6, 5, rng);
  EXPECT_THROW(encode(m, ptrs(other)), ShapeError);
}

TEST(Attention, OrthogonalPrototypesGiveUniformWeights) {
  auto F = Tensor::from_data({1, 4}, {1, 0, 0, 0});
  auto P = Tensor::from_data({3, 4}, {0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  const auto a = prototype_attention(F, P, 1.0);
  for (double v : a.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Attention, AlignedScaledPrototypeDominates) {
  auto F = Tensor::from_data({1, 4}, {1, 0, 0, 0});
  auto P = Tensor::from_data({3, 4}, {0, 1, 0, 0, 12, 0, 0, 0, 0, 0, 0, 1});
  const auto a = prototype_attention(F, P, 1.0);
  // oracle: softmax of (F.P)/sqrt(d) evaluated directly
  const double s = 12.0 / 2.0;
  const double expect = std::exp(s) / (std::exp(s) + 2.0);
  EXPECT_NEAR(a.data()[1], expect, 1e-15);
  EXPECT_GT(a.data()[1], 0.99);
}

TEST(Attention, RowsAreStochasticAndPositive) {
  std::mt19937_64 rng(4);
  for (double tau : {0.1, 1.0, 5.0}) {
    const auto F = rand_tensor({20, 8}, rng, -3, 3), P = rand_tensor({5, 8}, rng, -3, 3);
    const auto a = prototype_attention(F, P, tau);
    for (std::size_t r = 0; r < 20; ++r) {
      double acc = 0;
      for (std::size_t m = 0; m < 5; ++m) {
        EXPECT_GT(a.data()[r * 5 + m], 0.0);
        acc += a.data()[r * 5 + m];
      }
      EXPECT_NEAR(acc, 1.0, 1e-12);
    }
  }
}

TEST(Resonance, OneHotSelectsPrototypeExactly) {
  std::mt19937_64 rng(5);
  const auto P = rand_tensor({4, 6}, rng);
  for (std::size_t m = 0; m < 4; ++m) {
    std::vector<double> oh(4, 0.0);
    oh[m] = 1.0;
    const auto R = prototype_resonance(Tensor::from_data({1, 4}, oh), P);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(R.data()[j], P.data()[m * 6 + j]);
  }
}

TEST(Resonance, UniformWeightsAverage) {
  std::mt19937_64 rng(6);
  const auto P = rand_tensor({4, 6}, rng);
  const auto R = prototype_resonance(Tensor::filled({1, 4}, 0.25), P);
  for (std::size_t j = 0; j < 6; ++j) {
    double mean = 0;
    for (std::size_t m = 0; m < 4; ++m) mean += P.data()[m * 6 + j];
    EXPECT_NEAR(R.data()[j], mean / 4, 1e-15);
  }
}

TEST(Resonance, StaysInsidePrototypeHull) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd(0, 1);
  const auto F = rand_tensor({10, 8}, rng, -2, 2), P = rand_tensor({5, 8}, rng, -2, 2);
  const auto R = prototype_resonance(prototype_attention(F, P, 1.0), P);
  for (int dir = 0; dir < 100; ++dir) {
    std::vector<double> u(8);
    for (auto& v : u) v = nd(rng);
    double lo = 1e300, hi = -1e300;
    for (std::size_t m = 0; m < 5; ++m) {
      double dot = 0;
      for (std::size_t j = 0; j < 8; ++j) dot += P.data()[m * 8 + j] * u[j];
      lo = std::min(lo, dot), hi = std::max(hi, dot);
    }
    for (std::size_t b = 0; b < 10; ++b) {
      double dot = 0;
      for (std::size_t j = 0; j < 8; ++j) dot += R.data()[b * 8 + j] * u[j];
      EXPECT_GE(dot, lo - 1e-12);
      EXPECT_LE(dot, hi + 1e-12);
    }
  }
}

TEST(Resonance, InvariantUnderPrototypePermutation) {
  std::mt19937_64 rng(8);
  auto permute_rows = [](const Tensor& P, const std::vector<std::size_t>& perm) {
    const std::size_t d = P.dim(1);
    std::vector<double> v(P.size());
    for (std::size_t r = 0; r < perm.size(); ++r)
      std::copy_n(P.data().begin() + static_cast<std::ptrdiff_t>(perm[r] * d), d, v.begin() + static_cast<std::ptrdiff_t>(r * d));
    return Tensor::from_data(P.shape(), v);
  };
  // two prototypes: floating-point addition is commutative, so equality is exact
  {
    const auto F = rand_tensor({6, 5}, rng), P = rand_tensor({2, 5}, rng);
    const auto R0 = prototype_resonance(prototype_attention(F, P, 1.0), P);
    const auto Pp = permute_rows(P, {1, 0});
    const auto R1 = prototype_resonance(prototype_attention(F, Pp, 1.0), Pp);
    EXPECT_EQ(R0.data(), R1.data());
  }
  // larger banks reorder the summation, so agreement is to rounding
  {
    const auto F = rand_tensor({6, 5}, rng), P = rand_tensor({7, 5}, rng);
    std::vector<std::size_t> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto R0 = prototype_resonance(prototype_attention(F, P, 1.0), P);
    const auto Pp = permute_rows(P, perm);
    const auto R1 = prototype_resonance(prototype_attention(F, Pp, 1.0), Pp);
    for (std::size_t i = 0; i < R0.size(); ++i) EXPECT_NEAR(R0.data()[i], R1.data()[i], 1e-14);
  }
}

TEST(ResEnc, ShapeAndSliceOrderInvariance) {
  std::mt19937_64 rng(9);
  const auto m = GrnModel::init(GrnConfig{}, 2);
  const auto mt = rand_tensor({4, 3, 8, 8, 2}, rng, 0, 1);
  const auto G = res_encode(m, mt);
  EXPECT_EQ(G.shape(), (ag::Shape{4, 32}));
  // reverse the reference axis
  const std::size_t slice = 8 * 8 * 2;
  std::vector<double> v(mt.size());
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t k = 0; k < 3; ++k)
      std::copy_n(mt.data().begin() + static_cast<std::ptrdiff_t>((b * 3 + k) * slice), slice,
                  v.begin() + static_cast<std::ptrdiff_t>((b * 3 + (2 - k)) * slice));
  const auto G2 = res_encode(m, Tensor::from_data(mt.shape(), v));
  for (std::size_t i = 0; i < G.size(); ++i) EXPECT_NEAR(G.data()[i], G2.data()[i], 1e-12);
}

TEST(ResEnc, ZeroTensorGivesBiasImage) {
  auto m = GrnModel::init(GrnConfig{}, 3);
  std::mt19937_64 rng(10);
  m.conv_b = rand_tensor({8}, rng, -1, 1, true);
  m.res_b = rand_tensor({32}, rng, -1, 1, true);
  const auto G = res_encode(m, Tensor::zeros({4, 3, 8, 8, 2}));
  // oracle: relu(conv bias) through the linear layer
  for (std::size_t j = 0; j < 32; ++j) {
    double v = m.res_b.data()[j];
    for (std::size_t c = 0; c < 8; ++c) v += std::max(0.0, m.conv_b.data()[c]) * m.res_w.data()[c * 32 + j];
    for (std::size_t b = 0; b < 4; ++b) EXPECT_NEAR(G.data()[b * 32 + j], v, 1e-14);
  }
}

TEST(ResEnc, TooFewChannelsIsAnError) {
  auto cfg = GrnConfig{};
  const auto m = GrnModel::init(cfg, 1);
  EXPECT_THROW(res_encode(m, Tensor::zeros({1, 3, 2, 2, 2})), ShapeError);
}

TEST(Fuse, ZeroViewsGiveBiasPathway) {
  auto m = GrnModel::init(GrnConfig{}, 4);
  std::mt19937_64 rng(11);
  m.fuse_b1 = rand_tensor({64}, rng, -1, 1, true);
  m.fuse_b2 = rand_tensor({3}, rng, -1, 1, true);
  const auto Z = Tensor::zeros({2, 32});
  const auto logits = fuse(m, Z, Z, Z);
  for (std::size_t l = 0; l < 3; ++l) {
    double v = m.fuse_b2.data()[l];
    for (std::size_t h = 0; h < 64; ++h) v += std::max(0.0, m.fuse_b1.data()[h]) * m.fuse_w2.data()[h * 3 + l];
    EXPECT_NEAR(logits.data()[l], v, 1e-14);
    EXPECT_NEAR(logits.data()[3 + l], v, 1e-14);
  }
}

TEST(Fuse, SwappingResonanceViewsChangesLogits) {
  std::mt19937_64 rng(12);
  const auto m = GrnModel::init(GrnConfig{}, 5);
  const auto F = rand_tensor({3, 32}, rng), R = rand_tensor({3, 32}, rng), G = rand_tensor({3, 32}, rng);
  const auto a = fuse(m, F, R, G), b = fuse(m, F, G, R);
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a.data()[i] - b.data()[i]);
  EXPECT_GT(diff, 1e-6);
}

TEST(Loss, ZeroLambdaIsClassificationLoss) {
  std::mt19937_64 rng(13);
  const auto logits = rand_tensor({4, 3}, rng), F = rand_tensor({4, 8}, rng), P = rand_tensor({3, 8}, rng);
  const auto alpha = prototype_attention(F, P, 1.0);
  const std::vector<std::uint32_t> y{0, 1, 2, 1};
  const auto parts = grn_loss(logits, y, alpha, F, P, 0.0);
  EXPECT_EQ(parts.total.item(), ag::cross_entropy_with_logits(logits, y).item());
}

TEST(Loss, UniformLogitsGiveLog3) {
  const std::vector<std::uint32_t> y{2, 0};
  const auto parts = grn_loss(Tensor::zeros({2, 3}), y, Tensor::filled({2, 1}, 1.0), Tensor::zeros({2, 4}),
                              Tensor::zeros({1, 4}), 0.0);
  EXPECT_NEAR(parts.cls.item(), std::log(3.0), 1e-15);
}

TEST(Loss, PrototypeTermMatchesDirectSum) {
  std::mt19937_64 rng(14);
  const auto F = rand_tensor({5, 8}, rng), P = rand_tensor({3, 8}, rng);
  const auto alpha = prototype_attention(F, P, 1.0);
  double expect = 0;
  for (std::size_t b = 0; b < 5; ++b)
    for (std::size_t m = 0; m < 3; ++m) {
      double d2 = 0;
      for (std::size_t j = 0; j < 8; ++j) d2 += std::pow(F.data()[b * 8 + j] - P.data()[m * 8 + j], 2);
      expect += alpha.data()[b * 3 + m] * d2 / 8.0;
    }
  EXPECT_NEAR(prototype_loss(alpha, F, P).item(), expect / 5.0, 1e-14);
}

TEST(Loss, EmbeddingOnSelectedPrototypeContributesNothing) {
  std::mt19937_64 rng(15);
  const auto P = rand_tensor({3, 8}, rng);
  const auto F = Tensor::from_data({1, 8}, std::vector<double>(P.data().begin() + 8, P.data().begin() + 16));
  EXPECT_EQ(prototype_loss(Tensor::from_data({1, 3}, {0, 1, 0}), F, P).item(), 0.0);
}

TEST(Loss, PrototypeStepReducesWeightedDistance) {
  std::mt19937_64 rng(16);
  auto F = rand_tensor({4, 8}, rng, -1, 1, true);
  auto P = rand_tensor({3, 8}, rng, -1, 1, true);
  auto weighted = [&] { return prototype_loss(prototype_attention(F, P, 1.0), F, P).item(); };
  const double before = weighted();
  backward(prototype_loss(prototype_attention(F, P, 1.0), F, P));
  double gnorm = 0;
  for (auto* t : {&F, &P})
    for (double g : t->grad()) gnorm += g * g;
  ASSERT_GT(gnorm, 0.0);
  const double lr = 1e-3;
  for (auto* t : {&F, &P})
    for (std::size_t i = 0; i < t->size(); ++i) t->mutable_data()[i] -= lr * t->grad()[i];
  EXPECT_LT(weighted(), before);
}

TEST(ForwardFull, IndividualOnlyDependsOnlyOnFeatures) {
  std::mt19937_64 rng(17);
  const auto cfg = tiny_config();
  const auto grids = random_grids(5, cfg.C, cfg.B, rng);
  auto m = fitted_model(cfg, 6, grids);
  const auto x = feature_batch(m.standardizer, ptrs(grids), cfg.C, cfg.B);
  const auto a = forward_full(m, x, rand_tensor({5, 2, 4, 4, 2}, rng, 0, 1), Variant::IndividualOnly);
  m.prototypes.mutable_data()[0] += 3.0;
  m.conv_w.mutable_data()[0] += 3.0;
  const auto b = forward_full(m, x, rand_tensor({5, 2, 4, 4, 2}, rng, 0, 1), Variant::IndividualOnly);
  EXPECT_EQ(a.logits.data(), b.logits.data());
  for (double v : a.R.data()) EXPECT_EQ(v, 0.0);
  for (double v : a.G.data()) EXPECT_EQ(v, 0.0);
}

TEST(ForwardFull, IndividualOnlySendsNoGradientToUnusedViews) {
  std::mt19937_64 rng(19);
  const auto cfg = tiny_config();
  const auto grids = random_grids(5, cfg.C, cfg.B, rng);
  auto m = fitted_model(cfg, 8, grids);
  const auto x = feature_batch(m.standardizer, ptrs(grids), cfg.C, cfg.B);
  const std::vector<std::uint32_t> y{0, 1, 2, 0, 1};
  const auto tr = forward_full(m, x, rand_tensor({5, 2, 4, 4, 2}, rng, 0, 1), Variant::IndividualOnly);
  m.zero_grad();
  backward(grn_loss(tr.logits, y, tr.alpha, tr.F, m.prototypes, effective_lambda(cfg, Variant::IndividualOnly)).total);
  for (const auto* t : {&m.prototypes, &m.conv_w, &m.conv_b, &m.res_w, &m.res_b})
    for (double g : t->grad()) EXPECT_EQ(g, 0.0);
  double enc = 0;
  for (double g : m.enc_w1.grad()) enc += std::abs(g);
  EXPECT_GT(enc, 0.0);
}

TEST(ForwardFull, ShapesAndMissingTensorError) {
  std::mt19937_64 rng(18);
  const auto cfg = tiny_config();
  const auto grids = random_grids(5, cfg.C, cfg.B, rng);
  const auto m = fitted_model(cfg, 7, grids);
  const auto x = feature_batch(m.standardizer, ptrs(grids), cfg.C, cfg.B);
  const auto tr = forward_full(m, x, rand_tensor({5, 2, 4, 4, 2}, rng, 0, 1), Variant::Full);
  EXPECT_EQ(tr.F.shape(), (ag::Shape{5, 8}));
  EXPECT_EQ(tr.alpha.shape(), (ag::Shape{5, 3}));
  EXPECT_EQ(tr.R.shape(), (ag::Shape{5, 8}));
  EXPECT_EQ(tr.G.shape(), (ag::Shape{5, 8}));
  EXPECT_EQ(tr.logits.shape(), (ag::Shape{5, 3}));
  EXPECT_THROW(forward_full(m, x, Tensor{}, Variant::ResonanceOnly), ConfigError);
  EXPECT_NO_THROW(forward_full(m, x, Tensor{}, Variant::ProtoOnly));
}

// ---------------------------------------------------------------------------
// Finite-difference checks, layer by layer and end to end

class ModelGradient : public ::testing::Test {
 protected:
  void SetUp() override {
    grids = random_grids(5, cfg.C, cfg.B, rng);
    model = fitted_model(cfg, 11, grids);
    x = feature_batch(model.standardizer, ptrs(grids), cfg.C, cfg.B);
    mt = rand_tensor({5, cfg.K_r, cfg.C, cfg.C, 2}, rng, 0, 1);
    // move biases off zero so every path carries gradient
    for (auto* b : {&model.enc_b1, &model.enc_b2, &model.conv_b, &model.res_b, &model.fuse_b1, &model.fuse_b2})
      *b = rand_tensor(b->shape(), rng, -0.5, 0.5, true);
  }
  GrnConfig cfg = tiny_config();
  std::mt19937_64 rng{99};
  std::vector<FeatureGrid> grids;
  GrnModel model;
  Tensor x, mt;
  const std::vector<std::uint32_t> labels{0, 2, 1, 1, 0};
};

TEST_F(ModelGradient, Encoder) {
  std::mt19937_64 wr(3);
  const auto W = rand_tensor({5, cfg.d}, wr);
  const auto rep = check_gradients([&] { return ag::sum(ag::mul(encode(model, x), W)); },
                                   {model.enc_w1, model.enc_b1, model.enc_w2, model.enc_b2});
  EXPECT_LT(rep.max_rel_error, kGradTol) << rep.worst;
  EXPECT_GT(rep.checked, 0u);
}

TEST_F(ModelGradient, AttentionAndResonance) {
  auto F = rand_tensor({5, cfg.d}, rng, -1, 1, true);
  std::mt19937_64 wr(1);
  const auto W = rand_tensor({5, cfg.d}, wr);
  const auto rep = check_gradients(
      [&] { return ag::sum(ag::mul(prototype_resonance(prototype_attention(F, model.prototypes, 0.7), model.prototypes), W)); },
      {F, model.prototypes});
  EXPECT_LT(rep.max_rel_error, kGradTol) << rep.worst;
}

TEST_F(ModelGradient, ResonanceEncoder) {
  std::mt19937_64 wr(2);
  const auto W = rand_tensor({5, cfg.d}, wr);
  const auto rep = check_gradients([&] { return ag::sum(ag::mul(res_encode(model, mt), W)); },
                                   {model.conv_w, model.conv_b, model.res_w, model.res_b});
  EXPECT_LT(rep.max_rel_error, kGradTol) << rep.worst;
}

TEST_F(ModelGradient, Fusion) {
  auto F = rand_tensor({5, cfg.d}, rng, -1, 1, true), R = rand_tensor({5, cfg.d}, rng, -1, 1, true),
       G = rand_tensor({5, cfg.d}, rng, -1, 1, true);
  const auto rep = check_gradients([&] { return ag::cross_entropy_with_logits(fuse(model, F, R, G), labels); },
                                   {F, R, G, model.fuse_w1, model.fuse_b1, model.fuse_w2, model.fuse_b2});
  EXPECT_LT(rep.max_rel_error, kGradTol) << rep.worst;
}

TEST_F(ModelGradient, PrototypeLoss) {
  auto F = rand_tensor({5, cfg.d}, rng, -1, 1, true);
  const auto rep = check_gradients(
      [&] { return prototype_loss(prototype_attention(F, model.prototypes, 1.0), F, model.prototypes); },
      {F, model.prototypes});
  EXPECT_LT(rep.max_rel_error, kGradTol) << rep.worst;
}

TEST_F(ModelGradient, FullCompositeEveryVariant) {
  for (auto v : kAllVariants) {
    const double lambda = effective_lambda(cfg, v);
    const auto rep = check_gradients(
        [&] {
          const auto tr = forward_full(model, x, mt, v);
          return grn_loss(tr.logits, labels, tr.alpha, tr.F, model.prototypes, lambda).total;
        },
        model.parameters(), names_of(model));
    EXPECT_LT(rep.max_rel_error, kGradTol) << variant_name(v) << " worst " << rep.worst;
    EXPECT_GT(rep.checked, rep.total / 4) << variant_name(v);
  }
}

TEST(Snapshot, IsIndependentCopy) {
  std::mt19937_64 rng(20);
  const auto grids = random_grids(3, 8, 5, rng);
  auto m = fitted_model(GrnConfig{}, 1, grids);
  auto s = m.snapshot();
  m.enc_w1.mutable_data()[0] += 1.0;
  EXPECT_NE(m.enc_w1.data()[0], s.enc_w1.data()[0]);
  m.assign_from(s);
  EXPECT_EQ(m.enc_w1.data(), s.enc_w1.data());
  EXPECT_NE(m.enc_w1.node(), s.enc_w1.node());
}

TEST(Checkpoint, ModelParametersRoundTrip) {
  const auto a = GrnModel::init(GrnConfig{}, 1);
  auto b = GrnModel::init(GrnConfig{}, 2);
  std::stringstream ss;
  ag::save_checkpoint(ss, a.named_parameters());
  b.load(ag::load_checkpoint(ss));
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].data(), pb[i].data());
  auto c = GrnModel::init(tiny_config(), 1);
  std::stringstream s2;
  ag::save_checkpoint(s2, a.named_parameters());
  EXPECT_THROW(c.load(ag::load_checkpoint(s2)), FormatError);
}
