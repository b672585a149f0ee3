#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>
#include <regex>

#include "gbud/evaluation.hpp"
#include "gbud/report.hpp"
#include "gradcheck.hpp"
#include "sparsification_oracle.hpp"

using namespace gbud;
using gbud::testing::brute_force_curve;
namespace fs = std::filesystem;

namespace {

// Errors whose chosen surrogate equals `v`: MAE reads abs_err.
PixelErrors mae_errors(const std::vector<double>& v) {
  PixelErrors e;
  for (double x : v) e.push(1.0 + x, 1.0);
  e.abs_err = v;
  return e;
}

PixelErrors random_errors(Rng& rng, std::size_t n, bool with_ties) {
  PixelErrors e;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = uniform(rng, 1.0, 9.0);
    double d = with_ties ? y * (1.0 + 0.1 * static_cast<double>(rng() % 5)) : uniform(rng, 0.5, 10.0);
    if (with_ties && rng() % 2) d = y / (1.0 + 0.1 * static_cast<double>(rng() % 5));
    e.push(d, y);
  }
  return e;
}

std::vector<double> random_scores(Rng& rng, std::size_t n, bool with_ties) {
  std::vector<double> s(n);
  for (auto& v : s) v = with_ties ? static_cast<double>(rng() % 4) / 3.0 : static_cast<float>(uniform01(rng));
  return s;
}

fs::path make_dataset(const std::string& name, std::size_t n, std::uint64_t seed) {
  const auto dir = fs::temp_directory_path() / ("gbud_eval_" + name);
  fs::remove_all(dir);
  generate_dataset(n, seed, dir.string());
  return dir;
}

const DepthNet& plain_net() {
  static const DepthNet net = build_model(ArchConfig{}, 3);
  return net;
}

}  // namespace

TEST(PixelErrors, Examples) {
  const Shape s{1, 1, 3};
  const auto e = pixel_errors(Tensor(s, {2.0f, 2.6f, 5.0f}), Tensor(s, {4.0f, 2.0f, 5.0f}), ValidityMask{1, 1, 1});
  EXPECT_EQ(e.abs_rel[0], 0.5);
  EXPECT_EQ(e.delta_bad[0], 1.0);
  EXPECT_EQ(e.delta_bad[1], 1.0);
  EXPECT_NEAR(e.sq_err[1], 0.36, 1e-6);
  EXPECT_EQ(e.abs_rel[2], 0.0);
  EXPECT_EQ(e.sq_err[2], 0.0);
  EXPECT_EQ(e.delta_bad[2], 0.0);
  const auto sub = pixel_errors(Tensor(s, {2.0f, 2.6f, 5.0f}), Tensor(s, {4.0f, 2.0f, 5.0f}), ValidityMask{0, 0, 1});
  EXPECT_EQ(sub.size(), 1u);
  EXPECT_THROW(pixel_errors(Tensor(s, 1.0f), Tensor(s, 1.0f), ValidityMask{0, 0, 0}), UsageError);
  EXPECT_THROW(pixel_errors(Tensor(s, 1.0f), Tensor(s, {1.0f, 0.0f, 1.0f}), ValidityMask{1, 1, 1}), UsageError);
}

TEST(SetMetric, ExamplesAndOracle) {
  PixelErrors e;
  e.sq_err = {1.0, 9.0};
  e.delta_bad = {0.0, 1.0};
  EXPECT_EQ(set_metric(Metric::kRmse, e), std::sqrt(5.0));
  EXPECT_EQ(set_metric(Metric::kDelta, e), 0.5);

  Rng rng(1);
  const auto r = random_errors(rng, 500, false);
  double ar = 0.0, sq = 0.0, db = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    ar += r.abs_rel[i];
    sq += r.sq_err[i];
    db += r.delta_bad[i];
  }
  EXPECT_NEAR(set_metric(Metric::kAbsRel, r), ar / 500.0, 1e-12);
  EXPECT_NEAR(set_metric(Metric::kRmse, r), std::sqrt(sq / 500.0), 1e-12);
  EXPECT_NEAR(set_metric(Metric::kDelta, r), db / 500.0, 1e-12);
}

TEST(Sparsification, FourPixelExamples) {
  const auto e = mae_errors({1.0, 2.0, 3.0, 4.0});
  const std::vector<double> ranked{1.0, 2.0, 3.0, 4.0}, anti{4.0, 3.0, 2.0, 1.0};
  EXPECT_EQ(sparsification_curve(e, ranked, Metric::kMae, 4), (std::vector<double>{2.5, 2.0, 1.5, 1.0}));
  EXPECT_EQ(sparsification_curve(e, anti, Metric::kMae, 4), (std::vector<double>{2.5, 3.0, 3.5, 4.0}));
  EXPECT_DOUBLE_EQ(ause(e, anti, Metric::kMae, 4), 1.5);
  EXPECT_DOUBLE_EQ(aurg(e, anti, Metric::kMae, 4), -0.75);
  EXPECT_EQ(ause(e, ranked, Metric::kMae, 4), 0.0);

  // Constant scores fall back to removal in index order.
  const std::vector<double> flat(4, 0.5);
  EXPECT_EQ(sparsification_curve(e, flat, Metric::kMae, 4), (std::vector<double>{2.5, 3.0, 3.5, 4.0}));
  EXPECT_THROW(sparsification_curve(e, flat, Metric::kMae, 5), UsageError);
  EXPECT_THROW(sparsification_curve(e, std::vector<double>(3), Metric::kMae, 2), ShapeError);
}

TEST(Sparsification, MatchesExhaustiveEnumeration) {
  Rng rng(2);
  for (std::size_t n = 1; n <= 12; ++n) {
    for (int trial = 0; trial < 4; ++trial) {
      const bool ties = trial % 2 == 1;
      const auto e = random_errors(rng, n, ties);
      const auto s = random_scores(rng, n, ties);
      for (Metric m : {Metric::kAbsRel, Metric::kRmse, Metric::kDelta, Metric::kMae}) {
        ASSERT_EQ(sparsification_curve(e, s, m, static_cast<int>(n)), brute_force_curve(e, s, m))
            << "n=" << n << " metric=" << to_string(m);
      }
    }
  }
}

TEST(Sparsification, OracleProperties) {
  Rng rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const auto e = random_errors(rng, 4096, trial % 3 == 0);
    const auto u = random_scores(rng, 4096, trial % 4 == 0);
    for (Metric m : kReportedMetrics) {
      const auto sp = sparsify(e, u, m);
      for (std::size_t j = 1; j < sp.oracle.size(); ++j) ASSERT_LE(sp.oracle[j], sp.oracle[j - 1] + 1e-12);
      EXPECT_GE(sp.ause, -1e-9);
      const auto& surrogate = e.surrogate(m);
      const auto best = sparsify(e, surrogate, m);
      EXPECT_LE(sp.aurg, best.aurg + 1e-9);
      EXPECT_NEAR(best.ause, 0.0, 1e-9);
    }
  }
}

TEST(Sparsification, InvariantUnderIncreasingTransforms) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto e = random_errors(rng, 4096, false);
    const auto u = random_scores(rng, 4096, trial % 2 == 0);
    std::vector<double> ex(u.size()), aff(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
      ex[i] = std::exp(u[i]);
      aff[i] = 3.0 * u[i] + 1.0;
    }
    for (Metric m : kReportedMetrics) {
      const auto a = sparsify(e, u, m), b = sparsify(e, ex, m), c = sparsify(e, aff, m);
      EXPECT_EQ(a.ause, b.ause);
      EXPECT_EQ(a.aurg, b.aurg);
      EXPECT_EQ(a.ause, c.ause);
      EXPECT_EQ(a.aurg, c.aurg);
    }
  }
}

TEST(Sparsification, ConstantScoresGiveSmallAurg) {
  // With index-order removal on an error field independent of position the
  // curve stays near M(0).
  Rng rng(5);
  const auto e = random_errors(rng, 4096, false);
  const std::vector<double> flat(4096, 0.0);
  for (Metric m : kReportedMetrics) EXPECT_LT(std::abs(aurg(e, flat, m)), 0.05 * set_metric(m, e));
}

TEST(Evaluate, TableShapeAndDeterminism) {
  const auto dir = make_dataset("shape", 60, 5);
  const Dataset data(dir.string());
  ModelSet models{&plain_net()};
  const std::vector<MethodSpec> methods{{"grad", Method::kGrad, {}}, {"post", Method::kPost, {}}};
  const auto idx = split_indices(data, "test");
  ASSERT_EQ(idx.size(), 6u);
  const auto a = evaluate_methods(models, data, idx, methods);
  EXPECT_EQ(a.rows.size(), 6u);
  EXPECT_EQ(a.images, 6u);

  auto shuffled = idx;
  std::reverse(shuffled.begin(), shuffled.end());
  EvalOptions threaded;
  threaded.threads = 3;
  const auto b = evaluate_methods(models, data, shuffled, methods, threaded);
  EXPECT_EQ(results_csv(a), results_csv(b));
  EXPECT_EQ(curves_csv(a), curves_csv(b));

  const auto csv = results_csv(a);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  EXPECT_TRUE(std::regex_search(csv, std::regex("^method,metric,ause,aurg\ngrad,abs_rel,-?[0-9]+\\.[0-9]{6},-?[0-9]+\\.[0-9]{6}\n")));
  const auto curves = curves_csv(a);
  EXPECT_EQ(std::count(curves.begin(), curves.end(), '\n'), 1 + 6 * 50);
}

TEST(Evaluate, SingleImageEqualsDirectComputation) {
  const auto dir = make_dataset("single", 20, 6);
  const Dataset data(dir.string());
  const auto r = evaluate_methods(ModelSet{&plain_net()}, data, {19}, {{"grad", Method::kGrad, {}}});
  const Sample s = data.load(19);
  const auto u = grad_uncertainty(plain_net(), s.image, UncertConfig{});
  const auto e = pixel_errors(u.depth, s.depth, s.mask);
  const std::vector<double> scores(u.u.data().begin(), u.u.data().end());
  for (Metric m : kReportedMetrics) {
    const auto sp = sparsify(e, scores, m);
    EXPECT_EQ(r.at("grad", m).ause, sp.ause);
    EXPECT_EQ(r.at("grad", m).aurg, sp.aurg);
    EXPECT_EQ(r.at("grad", m).curve, sp.curve);
  }
}

TEST(Evaluate, PooledAndMaskedMethods) {
  const auto dir = make_dataset("pooled", 40, 7);
  const Dataset data(dir.string());
  UncertConfig rot;
  rot.transform = AuxTransform::kRot20;
  const std::vector<MethodSpec> methods{{"grad-rot20", Method::kGrad, rot}, {"const", Method::kConst, {}}};
  EvalOptions pooled;
  pooled.pooled = true;
  const auto idx = split_indices(data, "test");
  const auto p = evaluate_methods(ModelSet{&plain_net()}, data, idx, methods, pooled);
  const auto q = evaluate_methods(ModelSet{&plain_net()}, data, idx, methods);
  EXPECT_NE(p.at("grad-rot20", Metric::kRmse).ause, q.at("grad-rot20", Metric::kRmse).ause);
  EXPECT_THROW(evaluate_methods(ModelSet{&plain_net()}, data, idx, {{"mc", Method::kMcDrop, {}}}), UsageError);
  EXPECT_THROW(evaluate_methods(ModelSet{&plain_net()}, data, {}, methods), UsageError);
}

TEST(Report, CurvesRoundTripAndPlot) {
  EvalResult r;
  r.bins = 4;
  r.images = 1;
  r.rows.push_back({"grad", Metric::kRmse, {2.0, 1.5, 1.2, 1.0}, {2.0, 1.2, 1.0, 0.9}, 0.15, 0.575});
  r.rows.push_back({"oracle", Metric::kRmse, {2.0, 1.2, 1.0, 0.9}, {2.0, 1.2, 1.0, 0.9}, 0.0, 0.725});
  r.rows.push_back({"grad", Metric::kDelta, {0.5, 0.4, 0.3, 0.2}, {0.5, 0.3, 0.1, 0.0}, 0.125, 0.15});
  const auto table = parse_curves_csv(curves_csv(r));
  EXPECT_EQ(table.metrics, (std::vector<std::string>{"rmse", "delta"}));
  ASSERT_EQ(table.series.at("rmse").size(), 2u);
  EXPECT_EQ(table.series.at("rmse")[1].first, "oracle");
  EXPECT_EQ(table.series.at("rmse")[0].second[1].value, 1.5);

  const auto dir = fs::temp_directory_path() / "gbud_plot";
  fs::remove_all(dir);
  const auto files = plot_curves(curves_csv(r), (dir / "fig.svg").string());
  ASSERT_EQ(files.size(), 2u);
  EXPECT_EQ(files[0], (dir / "fig_rmse.svg").string());
  const auto svg = std::string(reinterpret_cast<const char*>(read_file_bytes(files[0]).data()),
                               read_file_bytes(files[0]).size());
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_EQ(svg.substr(svg.size() - 7), "</svg>\n");
  // The oracle-ranked method plots a flat zero line: all y values equal.
  const std::regex poly("<polyline fill=\"none\" stroke=\"[^\"]+\" stroke-width=\"1.5\" points=\"([^\"]+)\"");
  std::vector<std::string> lines;
  for (std::sregex_iterator it(svg.begin(), svg.end(), poly), end; it != end; ++it) lines.push_back((*it)[1]);
  ASSERT_EQ(lines.size(), 2u);
  std::vector<std::string> ys;
  std::istringstream pts(lines[1]);
  for (std::string p; pts >> p;) ys.push_back(p.substr(p.find(',') + 1));
  EXPECT_EQ(ys.size(), 4u);
  EXPECT_TRUE(std::all_of(ys.begin(), ys.end(), [&](const std::string& y) { return y == ys[0]; }));
}

TEST(Report, MalformedCurvesNameTheLine) {
  const std::string good = "method,metric,fraction,value,oracle_value\ngrad,rmse,0.0,1.0,1.0\n";
  EXPECT_NO_THROW(parse_curves_csv(good));
  auto message = [](const std::string& text) {
    try {
      parse_curves_csv(text);
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message(good + "grad,rmse,0.1,abc,1.0\n").find("line 3"), std::string::npos);
  EXPECT_NE(message(good + "grad,rmse,0.1\n").find("line 3"), std::string::npos);
  EXPECT_NE(message("method,metric\n").find("line 1"), std::string::npos);
  EXPECT_NE(message("").find("line 1"), std::string::npos);
  EXPECT_NE(message("method,metric,fraction,value,oracle_value\n").find("no data"), std::string::npos);
}
