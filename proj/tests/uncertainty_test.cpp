#include <gtest/gtest.h>

#include <cmath>
#include <complex>

#include "gbud/uncertainty.hpp"
#include "gradcheck.hpp"

using namespace gbud;
using gbud::testing::random_tensor;

namespace {

Tensor test_image(std::uint64_t seed) {
  Rng rng(seed);
  return random_tensor({3, 64, 64}, rng, 0.0, 1.0);
}

Tensor random_depth(std::uint64_t seed) {
  Rng rng(seed);
  return random_tensor({1, 64, 64}, rng, 1.0, 9.0);
}

const DepthNet& plain_net() {
  static const DepthNet net = build_model(ArchConfig{}, 7);
  return net;
}

const DepthNet& log_net() {
  static const DepthNet net = build_model(ArchConfig::for_kind(ModelKind::kLog), 8);
  return net;
}

const DepthNet& dropout_net() {
  static const DepthNet net = build_model(ArchConfig::for_kind(ModelKind::kDropout), 9);
  return net;
}

// Area of a convex polygon clipped against an axis-aligned box
// (Sutherland-Hodgman), used as a continuous reference for rotation masks.
using Pt = std::complex<double>;

double clipped_area(std::vector<Pt> poly, double lo, double hi) {
  auto clip = [](const std::vector<Pt>& in, auto inside, auto cross) {
    std::vector<Pt> out;
    for (std::size_t i = 0; i < in.size(); ++i) {
      const Pt a = in[i], b = in[(i + 1) % in.size()];
      if (inside(b)) {
        if (!inside(a)) out.push_back(cross(a, b));
        out.push_back(b);
      } else if (inside(a)) {
        out.push_back(cross(a, b));
      }
    }
    return out;
  };
  auto at_x = [](double x) {
    return [x](Pt a, Pt b) { return a + (b - a) * ((x - a.real()) / (b.real() - a.real())); };
  };
  auto at_y = [](double y) {
    return [y](Pt a, Pt b) { return a + (b - a) * ((y - a.imag()) / (b.imag() - a.imag())); };
  };
  poly = clip(poly, [&](Pt p) { return p.real() >= lo; }, at_x(lo));
  poly = clip(poly, [&](Pt p) { return p.real() <= hi; }, at_x(hi));
  poly = clip(poly, [&](Pt p) { return p.imag() >= lo; }, at_y(lo));
  poly = clip(poly, [&](Pt p) { return p.imag() <= hi; }, at_y(hi));
  double area = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Pt a = poly[i], b = poly[(i + 1) % poly.size()];
    area += a.real() * b.imag() - b.real() * a.imag();
  }
  return std::abs(area) / 2.0;
}

bool all_zero(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](float v) { return v == 0.0f; });
}

double valid_fraction(const ValidityMask& m) {
  return static_cast<double>(std::count(m.begin(), m.end(), 1)) / static_cast<double>(m.size());
}

}  // namespace

// ---- transforms ----

TEST(Transforms, FlipIsAnInvolution) {
  const Tensor x = test_image(1);
  EXPECT_TRUE(bitwise_equal(flip_horizontal(flip_horizontal(x)), x));
  const Tensor m = random_depth(2);
  const auto fwd = transform_apply(AuxTransform::kFlip, x, 0);
  EXPECT_EQ(valid_fraction(fwd.valid), 1.0);
  const auto back = transform_invert(AuxTransform::kFlip, flip_horizontal(m), fwd.valid);
  EXPECT_TRUE(bitwise_equal(back.value, m));
  EXPECT_EQ(valid_fraction(back.valid), 1.0);
}

TEST(Transforms, GrayAndNoise) {
  const Tensor x = test_image(3);
  const Tensor g = to_gray(x);
  EXPECT_TRUE(bitwise_equal(to_gray(g), g));
  EXPECT_NEAR(g.at(1, 5, 7), 0.299 * x.at(0, 5, 7) + 0.587 * x.at(1, 5, 7) + 0.114 * x.at(2, 5, 7), 1e-6);

  const auto n1 = transform_apply(AuxTransform::kNoise, x, 11);
  const auto n2 = transform_apply(AuxTransform::kNoise, x, 11);
  const auto n3 = transform_apply(AuxTransform::kNoise, x, 12);
  EXPECT_TRUE(bitwise_equal(n1.value, n2.value));
  EXPECT_FALSE(bitwise_equal(n1.value, n3.value));
  double ss = 0.0;
  std::size_t interior = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    ASSERT_TRUE(n1.value[i] >= 0.0f && n1.value[i] <= 1.0f);
    if (x[i] > 0.25f && x[i] < 0.75f) {
      ss += std::pow(static_cast<double>(n1.value[i]) - x[i], 2);
      ++interior;
    }
  }
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(interior)), kNoiseStd, 0.005);

  const Tensor m = random_depth(4);
  EXPECT_TRUE(bitwise_equal(transform_invert(AuxTransform::kNoise, m, all_valid_mask(m)).value, m));
  EXPECT_TRUE(bitwise_equal(transform_invert(AuxTransform::kGray, m, all_valid_mask(m)).value, m));
}

TEST(Transforms, RotationMaskMatchesInverseMappingOracle) {
  const Tensor x = test_image(5);
  for (AuxTransform t : {AuxTransform::kRot5, AuxTransform::kRot10, AuxTransform::kRot20}) {
    const double deg = rotation_degrees(t);
    const auto r = transform_apply(t, x, 0);
    // Independent per-pixel oracle: rotate the offset as a complex number.
    const Pt c(31.5, 31.5);
    const Pt rot = std::polar(1.0, deg * std::acos(-1.0) / 180.0);
    std::size_t agree = 0;
    for (int y = 0; y < 64; ++y)
      for (int xx = 0; xx < 64; ++xx) {
        const Pt s = (Pt(xx, y) - c) * rot + c;
        const double sx = std::floor(s.real() + 0.5), sy = std::floor(s.imag() + 0.5);
        const bool inside = sx >= 0 && sy >= 0 && sx <= 63 && sy <= 63;
        agree += (inside == static_cast<bool>(r.valid[static_cast<std::size_t>(y * 64 + xx)]));
        if (inside) {
          ASSERT_EQ(r.value.at(2, y, xx), x.at(2, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)));
        }
      }
    EXPECT_EQ(agree, 64u * 64u) << to_string(t);

    // Continuous reference: the valid region is the pixel square rotated
    // about the center and intersected with itself.
    std::vector<Pt> square;
    for (Pt corner : {Pt(-0.5, -0.5), Pt(63.5, -0.5), Pt(63.5, 63.5), Pt(-0.5, 63.5)}) {
      square.push_back((corner - c) * std::conj(rot) + c);
    }
    const double expected = clipped_area(square, -0.5, 63.5) / (64.0 * 64.0);
    EXPECT_NEAR(valid_fraction(r.valid), expected, 0.015) << to_string(t);
    EXPECT_LT(valid_fraction(r.valid), 1.0);
  }
}

TEST(Transforms, RotationInverseCompoundsInvalidity) {
  const Tensor x = test_image(6);
  const auto fwd = transform_apply(AuxTransform::kRot20, x, 0);
  const Tensor m = random_depth(7);
  const auto back = transform_invert(AuxTransform::kRot20, m, fwd.valid);
  EXPECT_LT(valid_fraction(back.valid), valid_fraction(fwd.valid));
  for (std::size_t i = 0; i < back.valid.size(); ++i) {
    if (!back.valid[i]) EXPECT_EQ(back.value[i], 0.0f);
  }
  EXPECT_THROW(transform_apply(AuxTransform::kGt, x, 0), UsageError);
  EXPECT_THROW(parse_aux_transform("rot45"), UsageError);
  EXPECT_EQ(parse_aux_transform("rot10"), AuxTransform::kRot10);
}

TEST(Transforms, ReferenceDepth) {
  const Tensor x = test_image(8);
  CountingNet net(plain_net());
  const auto a = reference_depth(net, x, AuxTransform::kNoise, 3);
  const auto b = reference_depth(net, x, AuxTransform::kNoise, 3);
  EXPECT_TRUE(bitwise_equal(a.value, b.value));
  EXPECT_EQ(net.counts().forwards, 2);

  const Tensor y = random_depth(9);
  const auto gt = reference_depth(net, x, AuxTransform::kGt, 0, &y);
  EXPECT_TRUE(bitwise_equal(gt.value, y));
  EXPECT_EQ(valid_fraction(gt.valid), 1.0);
  EXPECT_EQ(net.counts().forwards, 2);
  EXPECT_THROW(reference_depth(net, x, AuxTransform::kGt, 0), UsageError);

  const auto flip = reference_depth(net, x, AuxTransform::kFlip, 0);
  const Tensor direct = flip_horizontal(forward(plain_net(), flip_horizontal(x)).depth_map());
  EXPECT_TRUE(bitwise_equal(flip.value, direct));
}

// ---- auxiliary losses ----

TEST(AuxLoss, PlainExamplesAndOracle) {
  const Shape s{1, 64, 64};
  Rng rng(10);
  const Tensor d = random_tensor(s, rng, 1.0, 9.0);
  EXPECT_EQ(aux_loss_plain(d, d, all_valid_mask(d)), 0.0);

  ValidityMask one(4096, 0);
  one[100] = 1;
  std::vector<float> dv(4096, 0.0f), rv(4096, 7.0f);
  dv[100] = 2.0f;
  rv[100] = 3.0f;
  EXPECT_EQ(aux_loss_plain(Tensor(s, dv), Tensor(s, rv), one), 1.0);

  const Tensor r = random_tensor(s, rng, 1.0, 9.0);
  ValidityMask mask(4096);
  for (auto& m : mask) m = static_cast<std::uint8_t>(rng() % 3 != 0);
  double expected = 0.0;
  for (std::size_t i = 0; i < 4096; ++i) {
    if (mask[i]) expected += std::pow(static_cast<double>(d[i]) - r[i], 2);
  }
  EXPECT_LE(std::abs(aux_loss_plain(d, r, mask) - expected), 1e-5 * expected);
  EXPECT_THROW(aux_loss_plain(d, r, ValidityMask(4096, 0)), UsageError);
  EXPECT_THROW(aux_loss_plain(d, r, ValidityMask(10, 1)), ShapeError);
}

TEST(AuxLoss, BayesExamples) {
  const Shape s{1, 64, 64};
  Rng rng(11);
  const Tensor d = random_tensor(s, rng, 1.0, 9.0);
  const Tensor r = random_tensor(s, rng, 1.0, 9.0);
  const Tensor var = random_tensor(s, rng, 0.1, 3.0);
  const auto all = all_valid_mask(d);
  EXPECT_EQ(aux_loss_bayes(d, r, var, 0.0, all), aux_loss_plain(d, r, all));
  EXPECT_EQ(aux_loss_bayes(d, d, Tensor(s, 1.0f), 2.0, all), 8192.0);
  EXPECT_EQ(aux_loss_bayes(d, d, Tensor(s, 2.0f), 2.0, all, 2), 2.0 * 4.0 * 4096.0);
  EXPECT_THROW(aux_loss_bayes(d, r, Tensor(s, 0.0f), 2.0, all), NumericError);
  EXPECT_THROW(aux_loss_bayes(d, r, var, 2.0, all, 3), UsageError);
}

TEST(AuxLoss, VarianceHeadGradientGrowsWithVariance) {
  // d loss / d s for var = exp(s) equals lambda * var at each pixel.
  double prev = 0.0;
  for (float s : {-2.0f, -1.0f, 0.0f, 0.5f, 1.0f, 2.0f}) {
    Tape t;
    const NodeId logvar = t.leaf(Tensor(Shape{1, 2, 2}, s), true);
    const NodeId d = t.leaf(Tensor(Shape{1, 2, 2}, 3.0f));
    const NodeId r = t.leaf(Tensor(Shape{1, 2, 2}, 3.5f));
    const NodeId var = t.unary(UnaryKind::kExpClamped, logvar);
    const NodeId loss = aux_loss_bayes(t, d, r, var, 2.0, ValidityMask(4, 1));
    const double g = backward(t, loss).grad_of(logvar)[0];
    EXPECT_NEAR(g, 2.0 * std::exp(static_cast<double>(s)), 1e-5 * std::exp(static_cast<double>(s)));
    EXPECT_GT(g, prev);
    prev = g;
  }
}

// ---- channel max and normalisation ----

TEST(GradientMap, ChannelReduceMax) {
  const Tensor g(Shape{2, 1, 2}, {1.0f, -4.0f, 2.0f, 3.0f});
  const Tensor a = channel_reduce_max(g, true);
  EXPECT_EQ(a[0], 2.0f);
  EXPECT_EQ(a[1], 4.0f);
  const Tensor s = channel_reduce_max(g, false);
  EXPECT_EQ(s[0], 2.0f);
  EXPECT_EQ(s[1], 3.0f);
  Rng rng(1);
  const Tensor one = random_tensor({1, 4, 4}, rng);
  EXPECT_TRUE(bitwise_equal(channel_reduce_max(one, false), one));
}

TEST(GradientMap, NormalizeUpsample) {
  const Tensor g(Shape{1, 2, 2}, {1.0f, 3.0f, 5.0f, 9.0f});
  const Tensor u = normalize_upsample(g, 32);
  ASSERT_EQ(u.shape(), (Shape{1, 64, 64}));
  EXPECT_EQ(u.at(0, 0, 0), 0.0f);
  EXPECT_EQ(u.at(0, 31, 63), 0.25f);
  EXPECT_EQ(u.at(0, 32, 0), 0.5f);
  EXPECT_EQ(u.at(0, 63, 63), 1.0f);
  EXPECT_TRUE(all_zero(normalize_upsample(Tensor(Shape{1, 8, 8}, 3.5f), 8)));

  Rng rng(2);
  const Tensor r = random_tensor({1, 16, 16}, rng, -5.0, 5.0);
  const Tensor base = normalize_upsample(r, 4);
  for (float v : base.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  // Power-of-two rescaling is exact in floating point, so the map is
  // bitwise unchanged; other positive scales agree to rounding.
  for (float k : {0.25f, 2.0f, 1024.0f}) {
    std::vector<float> v(r.data().begin(), r.data().end());
    for (auto& e : v) e *= k;
    EXPECT_TRUE(bitwise_equal(normalize_upsample(Tensor(r.shape(), v), 4), base));
  }
  for (float k : {0.3f, 7.0f}) {
    std::vector<float> v(r.data().begin(), r.data().end());
    for (auto& e : v) e *= k;
    const Tensor u2 = normalize_upsample(Tensor(r.shape(), v), 4);
    for (std::size_t i = 0; i < u2.size(); ++i) ASSERT_NEAR(u2[i], base[i], 1e-6);
  }
}

TEST(GradientMap, NormalizationIgnoresInvalidPixels) {
  const Tensor g(Shape{1, 1, 4}, {100.0f, 1.0f, 2.0f, 3.0f});
  ValidityMask valid{0, 1, 1, 1};
  const Tensor u = normalize_upsample(g, 1, &valid);
  EXPECT_EQ(u[0], 0.0f);
  EXPECT_EQ(u[1], 0.0f);
  EXPECT_EQ(u[2], 0.5f);
  EXPECT_EQ(u[3], 1.0f);
}

// ---- gradient-based uncertainty ----

TEST(GradUncertainty, PassCountsPerTransform) {
  const Tensor x = test_image(20);
  const Tensor y = random_depth(21);
  UncertConfig cfg;
  for (AuxTransform t : {AuxTransform::kFlip, AuxTransform::kGray, AuxTransform::kNoise, AuxTransform::kRot5,
                         AuxTransform::kRot10, AuxTransform::kRot20}) {
    cfg.transform = t;
    const auto m = grad_uncertainty(plain_net(), x, cfg);
    EXPECT_EQ(m.passes, (PassCounts{2, 1})) << to_string(t);
    EXPECT_EQ(m.u.shape(), (Shape{1, 64, 64}));
  }
  cfg.transform = AuxTransform::kGt;
  EXPECT_EQ(grad_uncertainty(plain_net(), x, cfg, &y).passes, (PassCounts{1, 1}));
  EXPECT_THROW(grad_uncertainty(plain_net(), x, cfg), UsageError);
}

TEST(GradUncertainty, MapIsNormalisedAndDeterministic) {
  const Tensor x = test_image(22);
  UncertConfig cfg;
  for (int layer = 1; layer <= 6; ++layer) {
    cfg.layer = layer;
    const auto a = grad_uncertainty(plain_net(), x, cfg);
    const auto b = grad_uncertainty(plain_net(), x, cfg);
    EXPECT_TRUE(bitwise_equal(a.u, b.u));
    ASSERT_EQ(a.u.shape(), (Shape{1, 64, 64}));
    const auto [lo, hi] = std::minmax_element(a.u.data().begin(), a.u.data().end());
    EXPECT_EQ(*lo, 0.0f);
    EXPECT_EQ(*hi, 1.0f);
    // Coarse layers produce blocks of the decoder scale.
    const std::size_t f = static_cast<std::size_t>(plain_net().config.decoder_scale(layer));
    EXPECT_EQ(a.u.at(0, 0, 0), a.u.at(0, f - 1, f - 1));
  }
  cfg.layer = 7;
  EXPECT_THROW(grad_uncertainty(plain_net(), x, cfg), UsageError);
}

TEST(GradUncertainty, ZeroWeightNetGivesZeroMap) {
  const DepthNet net = zero_model(ArchConfig{});
  const auto m = grad_uncertainty(net, test_image(23), UncertConfig{});
  EXPECT_TRUE(all_zero(m.u));
  EXPECT_TRUE(all_zero(m.raw));
}

TEST(GradUncertainty, PerfectGroundTruthGivesZeroGradient) {
  const Tensor x = test_image(24);
  const Tensor y = forward(plain_net(), x).depth_map();
  UncertConfig cfg;
  cfg.transform = AuxTransform::kGt;
  const auto m = grad_uncertainty(plain_net(), x, cfg, &y);
  EXPECT_TRUE(all_zero(m.raw));
  EXPECT_TRUE(all_zero(m.u));
}

TEST(GradUncertainty, RotationMasksInvalidPixels) {
  UncertConfig cfg;
  cfg.transform = AuxTransform::kRot20;
  const auto m = grad_uncertainty(plain_net(), test_image(25), cfg);
  EXPECT_LT(m.valid_count(), m.valid.size());
  for (std::size_t i = 0; i < m.valid.size(); ++i) {
    if (!m.valid[i]) ASSERT_EQ(m.u[i], 0.0f);
  }
  const auto side = sidecar_json(m, cfg);
  EXPECT_EQ(side["method"], "grad");
  EXPECT_EQ(side["config"]["loss"], "rot20");
  EXPECT_EQ(side["pass_counts"]["forwards"], 2);
  EXPECT_EQ(side["pass_counts"]["backwards"], 1);
  EXPECT_LT(side["validity"]["valid_fraction"].get<double>(), 1.0);
}

TEST(GradUncertainty, AbsFlagAndBayesianLoss) {
  const Tensor x = test_image(26);
  UncertConfig cfg;
  const auto with_abs = grad_uncertainty(plain_net(), x, cfg);
  cfg.use_abs = false;
  const auto signed_max = grad_uncertainty(plain_net(), x, cfg);
  EXPECT_FALSE(bitwise_equal(with_abs.u, signed_max.u));

  // lambda only matters when the network predicts a variance.
  cfg = UncertConfig{};
  cfg.lambda = 0.0;
  const auto plain0 = grad_uncertainty(plain_net(), x, cfg);
  const auto log0 = grad_uncertainty(log_net(), x, cfg);
  cfg.lambda = 2.0;
  EXPECT_TRUE(bitwise_equal(plain0.u, grad_uncertainty(plain_net(), x, cfg).u));
  const auto log2 = grad_uncertainty(log_net(), x, cfg);
  EXPECT_FALSE(bitwise_equal(log0.u, log2.u));
  cfg.variance_power = 2;
  EXPECT_FALSE(bitwise_equal(log2.u, grad_uncertainty(log_net(), x, cfg).u));
  EXPECT_EQ(log2.passes, (PassCounts{2, 1}));
}

// ---- baselines ----

TEST(Baselines, PassCountContract) {
  const Tensor x = test_image(30);
  const UncertConfig cfg;
  EXPECT_EQ(estimate(Method::kGrad, plain_net(), x, cfg).passes, (PassCounts{2, 1}));
  EXPECT_EQ(estimate(Method::kPost, plain_net(), x, cfg).passes, (PassCounts{2, 0}));
  EXPECT_EQ(estimate(Method::kVar, plain_net(), x, cfg).passes, (PassCounts{5, 0}));
  EXPECT_EQ(estimate(Method::kInDrop, plain_net(), x, cfg).passes, (PassCounts{9, 0}));
  EXPECT_EQ(estimate(Method::kMcDrop, dropout_net(), x, cfg).passes, (PassCounts{8, 0}));
  EXPECT_EQ(estimate(Method::kLog, log_net(), x, cfg).passes, (PassCounts{1, 0}));
  EXPECT_THROW(estimate(Method::kMcDrop, plain_net(), x, cfg), UsageError);
  EXPECT_THROW(estimate(Method::kLog, plain_net(), x, cfg), UsageError);
  EXPECT_THROW(parse_method("ensemble"), UsageError);
}

TEST(Baselines, WeightsAreNeverModified) {
  const Tensor x = test_image(31);
  const Tensor y = random_depth(32);
  const auto before = std::vector{plain_net().checksum(), log_net().checksum(), dropout_net().checksum()};
  UncertConfig cfg;
  for (Method m : {Method::kGrad, Method::kPost, Method::kVar, Method::kInDrop, Method::kConst}) {
    estimate(m, plain_net(), x, cfg);
  }
  estimate(Method::kGrad, log_net(), x, cfg);
  estimate(Method::kLog, log_net(), x, cfg);
  estimate(Method::kMcDrop, dropout_net(), x, cfg);
  cfg.transform = AuxTransform::kGt;
  estimate(Method::kGrad, plain_net(), x, cfg, &y);
  EXPECT_EQ(before, (std::vector{plain_net().checksum(), log_net().checksum(), dropout_net().checksum()}));
}

TEST(Baselines, PostMatchesTwoPointVariance) {
  const Tensor x = test_image(33);
  const auto m = baseline_post(plain_net(), x);
  const Tensor a = forward(plain_net(), x).depth_map();
  const Tensor b = flip_horizontal(forward(plain_net(), flip_horizontal(x)).depth_map());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double mean = (static_cast<double>(a[i]) + b[i]) / 2.0;
    const double var = (std::pow(a[i] - mean, 2) + std::pow(b[i] - mean, 2)) / 2.0;
    ASSERT_NEAR(m.raw[i], var, 1e-6 * std::max(1.0, var));
  }
  EXPECT_TRUE(bitwise_equal(m.depth, a));

  // A constant-output network cannot tell the flipped image apart.
  const auto z = baseline_post(zero_model(ArchConfig{}), x);
  EXPECT_TRUE(all_zero(z.u));
}

TEST(Baselines, VarianceMatchesScalarOracle) {
  const Tensor x = test_image(34);
  std::vector<MaskedMap> stack;
  const auto m = baseline_var(plain_net(), x, 5, &stack);
  ASSERT_EQ(stack.size(), 5u);
  EXPECT_LT(valid_fraction(stack.back().valid), 1.0);  // rotated member is masked
  for (std::size_t i = 0; i < m.raw.size(); ++i) {
    std::vector<double> vals;
    for (const auto& s : stack) {
      if (s.valid[i]) vals.push_back(s.value[i]);
    }
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(vals.size());
    ASSERT_NEAR(m.raw[i], var, 1e-6 * std::max(1.0, var));
  }
  EXPECT_EQ(m.valid_count(), m.valid.size());

  // The constant network predicts the same depth for every augmentation.
  const auto z = baseline_var(zero_model(ArchConfig{}), x, 5);
  EXPECT_TRUE(all_zero(z.raw));
}

TEST(Baselines, DropoutMethods) {
  const Tensor x = test_image(35);
  std::vector<MaskedMap> stack;
  const auto in = baseline_indrop(plain_net(), x, 3, 8, 0.2, &stack);
  ASSERT_EQ(stack.size(), 8u);
  for (std::size_t i = 0; i < in.raw.size(); i += 97) {
    double mean = 0.0;
    for (const auto& s : stack) mean += s.value[i];
    mean /= 8.0;
    double var = 0.0;
    for (const auto& s : stack) var += std::pow(s.value[i] - mean, 2);
    ASSERT_NEAR(in.raw[i], var / 8.0, 1e-6);
  }
  EXPECT_TRUE(bitwise_equal(in.u, baseline_indrop(plain_net(), x, 3).u));
  EXPECT_FALSE(bitwise_equal(in.u, baseline_indrop(plain_net(), x, 4).u));
  EXPECT_TRUE(bitwise_equal(in.depth, forward(plain_net(), x).depth_map()));
  EXPECT_TRUE(all_zero(baseline_indrop(plain_net(), x, 3, 8, 0.0).raw));

  const auto mc = baseline_mcdrop(dropout_net(), x, 3, 8, &stack);
  for (std::size_t i = 0; i < mc.depth.size(); i += 101) {
    double mean = 0.0;
    for (const auto& s : stack) mean += s.value[i];
    ASSERT_NEAR(mc.depth[i], mean / 8.0, 1e-5);
  }
  EXPECT_TRUE(all_zero(baseline_mcdrop(dropout_net(), x, 3, 1).raw));
}

TEST(Baselines, ConstantAndLog) {
  const Tensor x = test_image(36);
  EXPECT_TRUE(all_zero(baseline_const(plain_net(), x).u));
  const auto lg = baseline_log(log_net(), x);
  const auto p = forward(log_net(), x);
  EXPECT_TRUE(bitwise_equal(lg.raw, *p.variance_map()));
  EXPECT_TRUE(bitwise_equal(lg.depth, p.depth_map()));
}
