#pragma once

#include <string>
#include <vector>

#include "gbud/evaluation.hpp"
#include "gbud/report.hpp"

namespace gbud {

enum class AblationAxis { kLayer, kLoss, kAbs, kLambda };

inline const char* to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::kLayer: return "layer";
    case AblationAxis::kLoss: return "loss";
    case AblationAxis::kAbs: return "abs";
    case AblationAxis::kLambda: return "lambda";
  }
  return "layer";
}

inline AblationAxis parse_ablation_axis(const std::string& s) {
  for (AblationAxis a : {AblationAxis::kLayer, AblationAxis::kLoss, AblationAxis::kAbs, AblationAxis::kLambda}) {
    if (s == to_string(a)) return a;
  }
  throw UsageError("unknown ablation axis '" + s + "' (expected layer|loss|abs|lambda)");
}

struct AblationSetting {
  std::string label;
  UncertConfig config;
  bool oracle = false;  // uses ground truth
};

/// Settings swept along one axis, each a variation of `base`.
inline std::vector<AblationSetting> ablation_settings(AblationAxis axis, const UncertConfig& base) {
  std::vector<AblationSetting> out;
  switch (axis) {
    case AblationAxis::kLayer:
      for (int l = 1; l <= 6; ++l) {
        UncertConfig c = base;
        c.layer = l;
        out.push_back({std::to_string(l), c});
      }
      break;
    case AblationAxis::kLoss:
      for (AuxTransform t : {AuxTransform::kGt, AuxTransform::kFlip, AuxTransform::kGray, AuxTransform::kNoise,
                             AuxTransform::kRot5, AuxTransform::kRot10, AuxTransform::kRot20}) {
        UncertConfig c = base;
        c.transform = t;
        out.push_back({to_string(t), c, t == AuxTransform::kGt});
      }
      break;
    case AblationAxis::kAbs:
      for (bool on : {true, false}) {
        UncertConfig c = base;
        c.use_abs = on;
        out.push_back({on ? "on" : "off", c});
      }
      break;
    case AblationAxis::kLambda:
      for (double l : {0.0, 0.5, 1.0, 2.0, 4.0}) {
        UncertConfig c = base;
        c.lambda = l;
        out.push_back({format_fixed(l, 1), c});
      }
      break;
  }
  for (auto& s : out) s.oracle = s.oracle || s.config.transform == AuxTransform::kGt;
  return out;
}

struct AblationResult {
  AblationAxis axis = AblationAxis::kLayer;
  std::vector<AblationSetting> settings;
  EvalResult eval;  // one method per setting, labelled by the setting
};

inline AblationResult run_ablation(const ModelSet& models, const std::vector<ImageInput>& images, AblationAxis axis,
                                   const UncertConfig& base, const EvalOptions& opts = {}) {
  AblationResult r;
  r.axis = axis;
  r.settings = ablation_settings(axis, base);
  std::vector<MethodSpec> specs;
  for (const auto& s : r.settings) specs.push_back({s.label, Method::kGrad, s.config});
  r.eval = evaluate_images(models, images, specs, opts);
  return r;
}

inline std::string ablation_csv(const AblationResult& r) {
  std::string out = "axis,setting,oracle,metric,ause,aurg\n";
  for (const auto& s : r.settings)
    for (Metric m : kReportedMetrics) {
      const auto& row = r.eval.at(s.label, m);
      out += std::string(to_string(r.axis)) + "," + s.label + "," + (s.oracle ? "1" : "0") + "," + to_string(m) + "," +
             format_fixed(row.ause) + "," + format_fixed(row.aurg) + "\n";
    }
  return out;
}

}  // namespace gbud
