#pragma once

// Central finite-difference oracle. The autodiff side runs in float; the
// finite differences are evaluated on a double-precision tape so that the
// oracle's own rounding stays far below the tolerance being checked.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "gbud/model.hpp"
#include "gbud/random.hpp"
#include "gbud/tape.hpp"
#include "gbud/tensor.hpp"

namespace gbud::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<float> v(element_count(shape));
  for (auto& x : v) x = static_cast<float>(uniform(rng, lo, hi));
  return Tensor(shape, std::move(v));
}

template <typename T>
BasicTensor<T> with_element(const BasicTensor<T>& t, std::size_t i, T value) {
  std::vector<T> v(t.data().begin(), t.data().end());
  v[i] = value;
  return BasicTensor<T>(t.shape(), std::move(v));
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

inline double relative_error(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// `build(tape, inputs, rng)` records an op sequence on a tape of either
/// precision and returns the output node. The checked loss is
/// sum(r * output) with fixed random r in [-1, 1].
template <typename Build>
GradCheckResult gradcheck(Build build, const std::vector<Tensor>& inputs, std::uint64_t seed, double eps = 1e-3,
                          std::size_t max_per_input = 64) {
  Rng weights_rng(seed ^ 0x5151);
  // Autodiff in float.
  Tape tape;
  std::vector<NodeId> ids;
  for (const auto& t : inputs) ids.push_back(tape.leaf(t, true));
  Rng rng_f(seed);
  const NodeId out = build(tape, ids, rng_f);
  const Tensor r = random_tensor(tape.value(out).shape(), weights_rng);
  const NodeId loss = tape.sum(tape.mul(out, tape.leaf(r)));
  const auto gmap = backward(tape, loss);

  const BasicTensor<double> r_d = r.cast<double>();
  auto loss_at = [&](std::size_t which, std::size_t elem, double delta) {
    BasicTape<double> t;
    std::vector<NodeId> in;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      auto v = inputs[k].cast<double>();
      if (k == which) v = with_element(v, elem, v[elem] + delta);
      in.push_back(t.leaf(v, true));
    }
    Rng rng_d(seed);
    const NodeId o = build(t, in, rng_d);
    double acc = 0.0;
    const auto ov = t.value(o).data();
    for (std::size_t i = 0; i < ov.size(); ++i) acc += ov[i] * r_d[i];
    return acc;
  };

  GradCheckResult res;
  Rng pick(seed ^ 0xabc);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor g = gmap.grad_of(ids[k]);
    const std::size_t n = inputs[k].size();
    std::vector<std::size_t> elems;
    if (n <= max_per_input) {
      for (std::size_t i = 0; i < n; ++i) elems.push_back(i);
    } else {
      for (std::size_t i = 0; i < max_per_input; ++i) elems.push_back(static_cast<std::size_t>(pick() % n));
    }
    for (std::size_t e : elems) {
      const double fd = (loss_at(k, e, eps) - loss_at(k, e, -eps)) / (2.0 * eps);
      res.max_rel_error = std::max(res.max_rel_error, relative_error(g[e], fd));
      ++res.checked;
    }
  }
  return res;
}

/// Weight gradients of a whole network against central differences. The
/// checked loss is sum(r1 * depth) (+ sum(r2 * variance) for Bayesian nets).
/// Float weights are perturbed in place; the realized perturbation is
/// measured in double so rounding of w + eps does not bias the quotient.
inline GradCheckResult network_gradcheck(const DepthNet& net, const Tensor& image, std::uint64_t seed,
                                         std::size_t per_layer = 6, double eps = 1e-3) {
  Rng rng(seed);
  const Shape map_shape{1, static_cast<std::size_t>(net.config.height), static_cast<std::size_t>(net.config.width)};
  const Tensor r1 = random_tensor(map_shape, rng);
  const Tensor r2 = random_tensor(map_shape, rng);

  ForwardOptions opts;
  opts.trainable = true;
  Prediction pred = forward(net, image, opts);
  auto& tape = pred.tape;
  NodeId loss = tape.sum(tape.mul(pred.depth, tape.leaf(r1)));
  if (pred.variance) loss = tape.add(loss, tape.sum(tape.mul(*pred.variance, tape.leaf(r2))));
  const auto gmap = backward(tape, loss);

  const auto r1d = r1.cast<double>();
  const auto r2d = r2.cast<double>();
  auto loss_of = [&](const DepthNet& m) {
    const auto p = forward<double>(m, image.cast<double>());
    double acc = 0.0;
    const auto d = p.depth_map().data();
    for (std::size_t i = 0; i < d.size(); ++i) acc += d[i] * r1d[i];
    if (p.variance) {
      const auto v = p.tape.value(*p.variance).data();
      for (std::size_t i = 0; i < v.size(); ++i) acc += v[i] * r2d[i];
    }
    return acc;
  };

  GradCheckResult res;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    for (int which = 0; which < 2; ++which) {
      const Tensor& param = which == 0 ? net.layers[l].weight : net.layers[l].bias;
      const Tensor g = gmap.grad_of(which == 0 ? pred.weight_nodes[l] : pred.bias_nodes[l]);
      const std::size_t count = which == 0 ? per_layer : std::min<std::size_t>(2, param.size());
      for (std::size_t s = 0; s < count; ++s) {
        const std::size_t e = static_cast<std::size_t>(rng() % param.size());
        auto perturbed = [&](double delta, double& realized) {
          DepthNet m = net;
          const float w0 = param[e];
          const float w1 = static_cast<float>(w0 + delta);
          realized = static_cast<double>(w1) - static_cast<double>(w0);
          auto& slot = which == 0 ? m.layers[l].weight : m.layers[l].bias;
          slot = with_element(slot, e, w1);
          return loss_of(m);
        };
        double dp = 0.0, dm = 0.0;
        const double lp = perturbed(eps, dp);
        const double lm = perturbed(-eps, dm);
        const double fd = (lp - lm) / (dp - dm);
        res.max_rel_error = std::max(res.max_rel_error, relative_error(g[e], fd));
        ++res.checked;
      }
    }
  }
  return res;
}

}  // namespace gbud::testing
