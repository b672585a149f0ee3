#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gbud/error.hpp"
#include "gbud/random.hpp"
#include "gbud/tensor.hpp"

namespace gbud {

using NodeId = std::size_t;

enum class UnaryKind { kElu, kSigmoid, kExpClamped, kAbs, kLog, kSquare };
enum class BinaryKind { kAdd, kSub, kMul, kDiv };
enum class ReduceKind { kSum, kMean };

inline constexpr double kExpClamp = 10.0;

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  int channels, height, width, kernel, stride, padding, out_height, out_width;
  int patch() const { return channels * kernel * kernel; }
  int out_pixels() const { return out_height * out_width; }
};

// Per-thread reusable buffer for patch matrices. Contents are unspecified on
// return; callers overwrite every element they read.
template <typename T>
T* scratch(std::size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

// Unfolds a [c,h,w] image into a [c*k*k, ho*wo] patch matrix (zero padding).
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const int hw = g.out_pixels();
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        T* row = col + static_cast<std::size_t>((c * g.kernel + ky) * g.kernel + kx) * hw;
        for (int oy = 0; oy < g.out_height; ++oy) {
          T* dst = row + oy * g.out_width;
          const int iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_width, T{0});
            continue;
          }
          const T* src = x + static_cast<std::size_t>(c * g.height + iy) * g.width;
          if (g.stride == 1) {
            const int shift = kx - g.padding;
            const int lo = std::min(g.out_width, std::max(0, -shift));
            const int hi = std::min(g.out_width, g.width - shift);
            std::fill(dst, dst + lo, T{0});
            if (hi > lo) std::copy(src + lo + shift, src + hi + shift, dst + lo);
            std::fill(dst + std::max(lo, hi), dst + g.out_width, T{0});
          } else {
            for (int ox = 0; ox < g.out_width; ++ox) {
              const int ix = ox * g.stride - g.padding + kx;
              dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : T{0};
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-and-adds a patch matrix back into an image.
template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* x) {
  const int hw = g.out_pixels();
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const T* row = col + static_cast<std::size_t>((c * g.kernel + ky) * g.kernel + kx) * hw;
        for (int oy = 0; oy < g.out_height; ++oy) {
          const int iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          T* dst = x + static_cast<std::size_t>(c * g.height + iy) * g.width;
          const T* src = row + oy * g.out_width;
          for (int ox = 0; ox < g.out_width; ++ox) {
            const int ix = ox * g.stride - g.padding + kx;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

inline const char* unary_name(UnaryKind kind) {
  switch (kind) {
    case UnaryKind::kElu: return "elu";
    case UnaryKind::kSigmoid: return "sigmoid";
    case UnaryKind::kExpClamped: return "exp_clamped";
    case UnaryKind::kAbs: return "abs";
    case UnaryKind::kLog: return "log";
    case UnaryKind::kSquare: return "square";
  }
  return "unary";
}

template <typename T>
T apply_unary(UnaryKind kind, T z) {
  switch (kind) {
    case UnaryKind::kElu: return z >= T{0} ? z : std::expm1(z);
    case UnaryKind::kSigmoid: return T{1} / (T{1} + std::exp(-z));
    case UnaryKind::kExpClamped:
      return std::exp(std::clamp(z, static_cast<T>(-kExpClamp), static_cast<T>(kExpClamp)));
    case UnaryKind::kAbs: return std::abs(z);
    case UnaryKind::kLog: return std::log(z);
    case UnaryKind::kSquare: return z * z;
  }
  return z;
}

template <typename T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
bool all_finite(std::span<const T> v) {
  return ConstArrayMap<T>(v.data(), static_cast<Eigen::Index>(v.size())).allFinite();
}

// Derivative given the input z and the forward output y.
template <typename T>
T unary_derivative(UnaryKind kind, T z, T y) {
  switch (kind) {
    case UnaryKind::kElu: return z >= T{0} ? T{1} : y + T{1};
    case UnaryKind::kSigmoid: return y * (T{1} - y);
    case UnaryKind::kExpClamped:
      return (z > static_cast<T>(-kExpClamp) && z < static_cast<T>(kExpClamp)) ? y : T{0};
    case UnaryKind::kAbs: return z > T{0} ? T{1} : (z < T{0} ? T{-1} : T{0});
    case UnaryKind::kLog: return T{1} / z;
    case UnaryKind::kSquare: return T{2} * z;
  }
  return T{0};
}

}  // namespace detail

/// Append-only record of tensor operations supporting reverse-mode
/// differentiation. Inputs of node k always have ids < k.
template <typename T>
class BasicTape {
 public:
  enum class Op { kLeaf, kConv2d, kUnary, kBinary, kAffine, kUpsample, kConcat, kSlice, kDropout, kReduce };

  struct Node {
    Op op = Op::kLeaf;
    std::array<NodeId, 3> inputs{};
    int arity = 0;
    int int_arg0 = 0;
    int int_arg1 = 0;
    double real_arg0 = 0.0;
    double real_arg1 = 0.0;
    UnaryKind unary = UnaryKind::kElu;
    BinaryKind binary = BinaryKind::kAdd;
    ReduceKind reduce = ReduceKind::kSum;
    bool requires_grad = false;
    BasicTensor<T> saved;
    BasicTensor<T> value;
  };

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  const BasicTensor<T>& value(NodeId id) const { return node(id).value; }

  /// Records a constant or variable. Leaves without `requires_grad` never
  /// receive gradients.
  NodeId leaf(BasicTensor<T> value, bool requires_grad = false) {
    Node n;
    n.op = Op::kLeaf;
    n.requires_grad = requires_grad;
    n.value = std::move(value);
    return push(std::move(n), "leaf");
  }

  NodeId conv2d(NodeId x, NodeId w, NodeId b, int stride, int padding) {
    const auto& xs = value(x).shape();
    const auto& ws = value(w).shape();
    const auto& bs = value(b).shape();
    if (xs.size() != 3) throw ShapeError("rank", "conv2d: input must be [c,h,w], got " + shape_string(xs));
    if (ws.size() != 4) throw ShapeError("rank", "conv2d: weights must be [co,ci,k,k], got " + shape_string(ws));
    if (bs.size() != 1) throw ShapeError("rank", "conv2d: bias must be [co], got " + shape_string(bs));
    if (ws[1] != xs[0]) {
      throw ShapeError("in_channels", "conv2d: weight in_channels " + std::to_string(ws[1]) +
                                          " != input channels " + std::to_string(xs[0]));
    }
    if (ws[2] != ws[3]) throw ShapeError("kernel", "conv2d: kernel must be square, got " + shape_string(ws));
    if (ws[2] % 2 == 0) throw ShapeError("kernel", "conv2d: kernel size must be odd, got " + std::to_string(ws[2]));
    if (bs[0] != ws[0]) {
      throw ShapeError("out_channels", "conv2d: bias length " + std::to_string(bs[0]) +
                                           " != out_channels " + std::to_string(ws[0]));
    }
    if (stride != 1 && stride != 2) throw UsageError("conv2d: stride must be 1 or 2, got " + std::to_string(stride));
    if (padding != static_cast<int>(ws[2] - 1) / 2) {
      throw UsageError("conv2d: padding must be (k-1)/2 = " + std::to_string((ws[2] - 1) / 2));
    }
    const auto g = geometry(xs, ws, stride, padding);
    const int co = static_cast<int>(ws[0]);

    std::vector<T> out(static_cast<std::size_t>(co) * g.out_pixels());
    detail::MatrixMap<T> out_m(out.data(), co, g.out_pixels());
    detail::ConstMatrixMap<T> w_m(value(w).data().data(), co, g.patch());
    if (g.kernel == 1 && g.stride == 1) {
      detail::ConstMatrixMap<T> x_m(value(x).data().data(), g.channels, g.out_pixels());
      out_m.noalias() = w_m * x_m;
    } else {
      T* col = detail::scratch<T>(static_cast<std::size_t>(g.patch()) * g.out_pixels());
      detail::im2col(value(x).data().data(), g, col);
      detail::ConstMatrixMap<T> col_m(col, g.patch(), g.out_pixels());
      out_m.noalias() = w_m * col_m;
    }
    const auto bias = value(b).data();
    for (int c = 0; c < co; ++c) out_m.row(c).array() += bias[c];

    Node n;
    n.op = Op::kConv2d;
    n.inputs = {x, w, b};
    n.arity = 3;
    n.int_arg0 = stride;
    n.int_arg1 = padding;
    n.value = BasicTensor<T>(Shape{ws[0], static_cast<std::size_t>(g.out_height), static_cast<std::size_t>(g.out_width)},
                             std::move(out));
    return push(std::move(n), "conv2d");
  }

  NodeId unary(UnaryKind kind, NodeId x) {
    const auto& in = value(x);
    std::vector<T> out(in.size());
    const auto src = in.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::apply_unary(kind, src[i]);
    Node n;
    n.op = Op::kUnary;
    n.inputs = {x};
    n.arity = 1;
    n.unary = kind;
    n.value = BasicTensor<T>(in.shape(), std::move(out));
    return push(std::move(n), detail::unary_name(kind));
  }

  NodeId binary(BinaryKind kind, NodeId a, NodeId b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    if (va.shape() != vb.shape()) {
      throw ShapeError("shape", "binary op: shapes " + shape_string(va.shape()) + " and " + shape_string(vb.shape()) +
                                    " differ");
    }
    std::vector<T> out(va.size());
    const auto pa = va.data();
    const auto pb = vb.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
      switch (kind) {
        case BinaryKind::kAdd: out[i] = pa[i] + pb[i]; break;
        case BinaryKind::kSub: out[i] = pa[i] - pb[i]; break;
        case BinaryKind::kMul: out[i] = pa[i] * pb[i]; break;
        case BinaryKind::kDiv: out[i] = pa[i] / pb[i]; break;
      }
    }
    Node n;
    n.op = Op::kBinary;
    n.inputs = {a, b};
    n.arity = 2;
    n.binary = kind;
    n.value = BasicTensor<T>(va.shape(), std::move(out));
    return push(std::move(n), "binary");
  }

  NodeId add(NodeId a, NodeId b) { return binary(BinaryKind::kAdd, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary(BinaryKind::kSub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary(BinaryKind::kMul, a, b); }
  NodeId div(NodeId a, NodeId b) { return binary(BinaryKind::kDiv, a, b); }

  /// scale * x + shift, elementwise.
  NodeId affine(NodeId x, double scale, double shift) {
    const auto& in = value(x);
    std::vector<T> out(in.size());
    const auto src = in.data();
    const T s = static_cast<T>(scale);
    const T t = static_cast<T>(shift);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * src[i] + t;
    Node n;
    n.op = Op::kAffine;
    n.inputs = {x};
    n.arity = 1;
    n.real_arg0 = scale;
    n.real_arg1 = shift;
    n.value = BasicTensor<T>(in.shape(), std::move(out));
    return push(std::move(n), "affine");
  }

  NodeId upsample_nearest(NodeId x, int factor) {
    const auto& in = value(x);
    if (in.rank() != 3) throw ShapeError("rank", "upsample_nearest: input must be [c,h,w]");
    if (factor < 1) throw UsageError("upsample_nearest: factor must be >= 1");
    const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2), f = static_cast<std::size_t>(factor);
    std::vector<T> out(c * h * f * w * f);
    const auto src = in.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h * f; ++y) {
        const T* row = src.data() + (ch * h + y / f) * w;
        T* dst = out.data() + (ch * h * f + y) * w * f;
        for (std::size_t xo = 0; xo < w * f; ++xo) dst[xo] = row[xo / f];
      }
    }
    Node n;
    n.op = Op::kUpsample;
    n.inputs = {x};
    n.arity = 1;
    n.int_arg0 = factor;
    n.value = BasicTensor<T>(Shape{c, h * f, w * f}, std::move(out));
    return push(std::move(n), "upsample_nearest");
  }

  /// Channel concatenation; `a`'s channels come first.
  NodeId concat_channels(NodeId a, NodeId b) {
    const auto& va = value(a);
    const auto& vb = value(b);
    if (va.rank() != 3 || vb.rank() != 3) throw ShapeError("rank", "concat_channels: inputs must be [c,h,w]");
    if (va.dim(1) != vb.dim(1)) throw ShapeError("height", "concat_channels: heights differ");
    if (va.dim(2) != vb.dim(2)) throw ShapeError("width", "concat_channels: widths differ");
    std::vector<T> out;
    out.reserve(va.size() + vb.size());
    out.insert(out.end(), va.data().begin(), va.data().end());
    out.insert(out.end(), vb.data().begin(), vb.data().end());
    Node n;
    n.op = Op::kConcat;
    n.inputs = {a, b};
    n.arity = 2;
    n.value = BasicTensor<T>(Shape{va.dim(0) + vb.dim(0), va.dim(1), va.dim(2)}, std::move(out));
    return push(std::move(n), "concat_channels");
  }

  NodeId slice_channels(NodeId x, int begin, int count) {
    const auto& in = value(x);
    if (in.rank() != 3) throw ShapeError("rank", "slice_channels: input must be [c,h,w]");
    if (begin < 0 || count < 0 || static_cast<std::size_t>(begin + count) > in.dim(0)) {
      throw ShapeError("channels", "slice_channels: range out of bounds");
    }
    const std::size_t plane = in.dim(1) * in.dim(2);
    std::vector<T> out(in.data().begin() + begin * plane, in.data().begin() + (begin + count) * plane);
    Node n;
    n.op = Op::kSlice;
    n.inputs = {x};
    n.arity = 1;
    n.int_arg0 = begin;
    n.int_arg1 = count;
    n.value = BasicTensor<T>(Shape{static_cast<std::size_t>(count), in.dim(1), in.dim(2)}, std::move(out));
    return push(std::move(n), "slice_channels");
  }

  /// Inverted dropout: each element is zeroed with probability p, survivors
  /// are scaled by 1/(1-p). Consumes one draw per element when p > 0.
  NodeId dropout(NodeId x, double p, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw UsageError("dropout: probability must lie in [0,1), got " + std::to_string(p));
    const auto& in = value(x);
    std::vector<T> mask(in.size(), T{1});
    if (p > 0.0) {
      const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
      for (auto& m : mask) m = uniform01(rng) < p ? T{0} : keep_scale;
    }
    std::vector<T> out(in.size());
    const auto src = in.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] * mask[i];
    Node n;
    n.op = Op::kDropout;
    n.inputs = {x};
    n.arity = 1;
    n.real_arg0 = p;
    n.saved = BasicTensor<T>(in.shape(), std::move(mask));
    n.value = BasicTensor<T>(in.shape(), std::move(out));
    return push(std::move(n), "dropout");
  }

  /// Sequential reduction in index order; accumulates in double.
  NodeId reduce(ReduceKind kind, NodeId x) {
    const auto& in = value(x);
    if (in.empty()) throw ShapeError("size", "reduce: empty tensor");
    double acc = 0.0;
    for (T v : in.data()) acc += static_cast<double>(v);
    if (kind == ReduceKind::kMean) acc /= static_cast<double>(in.size());
    Node n;
    n.op = Op::kReduce;
    n.inputs = {x};
    n.arity = 1;
    n.reduce = kind;
    n.value = BasicTensor<T>::scalar(static_cast<T>(acc));
    return push(std::move(n), kind == ReduceKind::kSum ? "sum" : "mean");
  }

  NodeId sum(NodeId x) { return reduce(ReduceKind::kSum, x); }
  NodeId mean(NodeId x) { return reduce(ReduceKind::kMean, x); }

  static detail::ConvGeometry geometry(const Shape& xs, const Shape& ws, int stride, int padding) {
    detail::ConvGeometry g{};
    g.channels = static_cast<int>(xs[0]);
    g.height = static_cast<int>(xs[1]);
    g.width = static_cast<int>(xs[2]);
    g.kernel = static_cast<int>(ws[2]);
    g.stride = stride;
    g.padding = padding;
    g.out_height = (g.height + 2 * padding - g.kernel) / stride + 1;
    g.out_width = (g.width + 2 * padding - g.kernel) / stride + 1;
    return g;
  }

 private:
  NodeId push(Node n, const char* what) {
    for (std::size_t i = 0; i < static_cast<std::size_t>(n.arity); ++i) {
      if (n.inputs[i] >= nodes_.size()) throw UsageError(std::string(what) + ": unknown input node");
    }
    if (!detail::all_finite(n.value.data())) throw NumericError(std::string(what) + ": non-finite value in output");
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  std::vector<Node> nodes_;
};

/// Accumulated gradients of a scalar loss for every tape node at or above
/// the backward cutoff.
template <typename T>
class BasicGradientMap {
 public:
  BasicGradientMap() = default;
  BasicGradientMap(std::vector<Shape> shapes, std::vector<std::vector<T>> grads, NodeId lowest)
      : shapes_(std::move(shapes)), grads_(std::move(grads)), lowest_(lowest) {}

  std::size_t size() const noexcept { return grads_.size(); }
  bool reached(NodeId id) const { return id < grads_.size() && !grads_[id].empty(); }

  /// Gradient of node `id`; zeros when the node has no path to the loss.
  BasicTensor<T> grad_of(NodeId id) const {
    if (id >= grads_.size()) throw UsageError("grad_of: unknown node id " + std::to_string(id));
    if (id < lowest_) {
      throw UsageError("grad_of: node " + std::to_string(id) + " lies below the backward cutoff " +
                       std::to_string(lowest_));
    }
    if (grads_[id].empty()) return BasicTensor<T>(shapes_[id], T{0});
    return BasicTensor<T>(shapes_[id], grads_[id]);
  }

  /// Direct access to the raw gradient buffer (empty when not reached).
  const std::vector<T>& raw(NodeId id) const { return grads_.at(id); }

 private:
  std::vector<Shape> shapes_;
  std::vector<std::vector<T>> grads_;
  NodeId lowest_ = 0;
};

template <typename T>
BasicTensor<T> grad_of(const BasicGradientMap<T>& gmap, NodeId id) {
  return gmap.grad_of(id);
}

/// Reverse pass from the scalar node `loss`. Nodes are visited once each in
/// decreasing id order; gradients are not propagated into nodes below
/// `lowest`, which lets callers stop once a feature map of interest is reached.
template <typename T>
BasicGradientMap<T> backward(const BasicTape<T>& tape, NodeId loss, NodeId lowest = 0) {
  using Tape = BasicTape<T>;
  using Op = typename Tape::Op;
  if (loss >= tape.size()) throw UsageError("backward: unknown loss node " + std::to_string(loss));
  if (tape.value(loss).size() != 1) {
    throw ShapeError("size", "backward: loss must be scalar, got " + shape_string(tape.value(loss).shape()));
  }
  std::vector<std::vector<T>> grads(tape.size());
  std::vector<Shape> shapes(tape.size());
  for (NodeId i = 0; i < tape.size(); ++i) shapes[i] = tape.value(i).shape();
  grads[loss] = {T{1}};

  auto wants = [&](NodeId id) {
    if (id < lowest) return false;
    const auto& n = tape.node(id);
    return n.op != Op::kLeaf || n.requires_grad;
  };
  auto slot = [&](NodeId id) -> std::vector<T>& {
    auto& g = grads[id];
    if (g.empty()) g.assign(tape.value(id).size(), T{0});
    return g;
  };

  for (NodeId k = loss + 1; k-- > lowest;) {
    if (grads[k].empty()) continue;
    const auto& n = tape.node(k);
    const std::vector<T>& gy = grads[k];
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kConv2d: {
        const NodeId x = n.inputs[0], w = n.inputs[1], b = n.inputs[2];
        const auto& xv = tape.value(x);
        const auto& wv = tape.value(w);
        const auto g = Tape::geometry(xv.shape(), wv.shape(), n.int_arg0, n.int_arg1);
        const int co = static_cast<int>(wv.dim(0));
        detail::ConstMatrixMap<T> gy_m(gy.data(), co, g.out_pixels());
        if (wants(b)) {
          auto& gb = slot(b);
          for (int c = 0; c < co; ++c) {
            double acc = 0.0;
            const T* row = gy.data() + static_cast<std::size_t>(c) * g.out_pixels();
            for (int i = 0; i < g.out_pixels(); ++i) acc += static_cast<double>(row[i]);
            gb[c] += static_cast<T>(acc);
          }
        }
        const bool pointwise = g.kernel == 1 && g.stride == 1;
        if (wants(w)) {
          auto& gw = slot(w);
          detail::MatrixMap<T> gw_m(gw.data(), co, g.patch());
          if (pointwise) {
            detail::ConstMatrixMap<T> x_m(xv.data().data(), g.channels, g.out_pixels());
            gw_m.noalias() += gy_m * x_m.transpose();
          } else {
            T* col = detail::scratch<T>(static_cast<std::size_t>(g.patch()) * g.out_pixels());
            detail::im2col(xv.data().data(), g, col);
            detail::ConstMatrixMap<T> col_m(col, g.patch(), g.out_pixels());
            gw_m.noalias() += gy_m * col_m.transpose();
          }
        }
        if (wants(x)) {
          auto& gx = slot(x);
          detail::ConstMatrixMap<T> w_m(wv.data().data(), co, g.patch());
          if (pointwise) {
            detail::MatrixMap<T> gx_m(gx.data(), g.channels, g.out_pixels());
            gx_m.noalias() += w_m.transpose() * gy_m;
          } else if (g.stride == 1) {
            // Same-padded stride-1 correlation: the input gradient is a
            // correlation of gy with the spatially flipped, transposed kernel.
            const int k = g.kernel;
            std::vector<T> flipped(static_cast<std::size_t>(g.channels) * co * k * k);
            const auto wd = wv.data();
            for (int o = 0; o < co; ++o)
              for (int c = 0; c < g.channels; ++c)
                for (int ky = 0; ky < k; ++ky)
                  for (int kx = 0; kx < k; ++kx)
                    flipped[((static_cast<std::size_t>(c) * co + o) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                        wd[((static_cast<std::size_t>(o) * g.channels + c) * k + ky) * k + kx];
            detail::ConvGeometry back{co, g.out_height, g.out_width, k, 1, g.padding, g.height, g.width};
            T* col = detail::scratch<T>(static_cast<std::size_t>(back.patch()) * back.out_pixels());
            detail::im2col(gy.data(), back, col);
            detail::ConstMatrixMap<T> col_m(col, back.patch(), back.out_pixels());
            detail::ConstMatrixMap<T> f_m(flipped.data(), g.channels, back.patch());
            detail::MatrixMap<T> gx_m(gx.data(), g.channels, g.height * g.width);
            gx_m.noalias() += f_m * col_m;
          } else {
            T* dcol = detail::scratch<T>(static_cast<std::size_t>(g.patch()) * g.out_pixels());
            detail::MatrixMap<T> dcol_m(dcol, g.patch(), g.out_pixels());
            dcol_m.noalias() = w_m.transpose() * gy_m;
            detail::col2im_add(dcol, g, gx.data());
          }
        }
        break;
      }
      case Op::kUnary: {
        const NodeId x = n.inputs[0];
        if (!wants(x)) break;
        auto& gx = slot(x);
        const auto z = tape.value(x).data();
        const auto y = n.value.data();
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * detail::unary_derivative(n.unary, z[i], y[i]);
        break;
      }
      case Op::kBinary: {
        const NodeId a = n.inputs[0], b = n.inputs[1];
        const auto va = tape.value(a).data();
        const auto vb = tape.value(b).data();
        if (wants(a)) {
          auto& ga = slot(a);
          for (std::size_t i = 0; i < gy.size(); ++i) {
            switch (n.binary) {
              case BinaryKind::kAdd:
              case BinaryKind::kSub: ga[i] += gy[i]; break;
              case BinaryKind::kMul: ga[i] += gy[i] * vb[i]; break;
              case BinaryKind::kDiv: ga[i] += gy[i] / vb[i]; break;
            }
          }
        }
        if (wants(b)) {
          auto& gb = slot(b);
          for (std::size_t i = 0; i < gy.size(); ++i) {
            switch (n.binary) {
              case BinaryKind::kAdd: gb[i] += gy[i]; break;
              case BinaryKind::kSub: gb[i] -= gy[i]; break;
              case BinaryKind::kMul: gb[i] += gy[i] * va[i]; break;
              case BinaryKind::kDiv: gb[i] -= gy[i] * va[i] / (vb[i] * vb[i]); break;
            }
          }
        }
        break;
      }
      case Op::kAffine: {
        const NodeId x = n.inputs[0];
        if (!wants(x)) break;
        auto& gx = slot(x);
        const T s = static_cast<T>(n.real_arg0);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += s * gy[i];
        break;
      }
      case Op::kUpsample: {
        const NodeId x = n.inputs[0];
        if (!wants(x)) break;
        auto& gx = slot(x);
        const auto& in = tape.value(x);
        const std::size_t c = in.dim(0), h = in.dim(1), w = in.dim(2);
        const std::size_t f = static_cast<std::size_t>(n.int_arg0);
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < h * f; ++y) {
            T* dst = gx.data() + (ch * h + y / f) * w;
            const T* src = gy.data() + (ch * h * f + y) * w * f;
            for (std::size_t xo = 0; xo < w * f; ++xo) dst[xo / f] += src[xo];
          }
        break;
      }
      case Op::kConcat: {
        const NodeId a = n.inputs[0], b = n.inputs[1];
        const std::size_t split = tape.value(a).size();
        if (wants(a)) {
          auto& ga = slot(a);
          for (std::size_t i = 0; i < split; ++i) ga[i] += gy[i];
        }
        if (wants(b) && tape.value(b).size() > 0) {
          auto& gb = slot(b);
          for (std::size_t i = split; i < gy.size(); ++i) gb[i - split] += gy[i];
        }
        break;
      }
      case Op::kSlice: {
        const NodeId x = n.inputs[0];
        if (!wants(x)) break;
        auto& gx = slot(x);
        const auto& in = tape.value(x);
        const std::size_t offset = static_cast<std::size_t>(n.int_arg0) * in.dim(1) * in.dim(2);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[offset + i] += gy[i];
        break;
      }
      case Op::kDropout: {
        const NodeId x = n.inputs[0];
        if (!wants(x)) break;
        auto& gx = slot(x);
        const auto mask = n.saved.data();
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * mask[i];
        break;
      }
      case Op::kReduce: {
        const NodeId x = n.inputs[0];
        if (!wants(x)) break;
        auto& gx = slot(x);
        T g = gy[0];
        if (n.reduce == ReduceKind::kMean) g = static_cast<T>(static_cast<double>(g) / static_cast<double>(gx.size()));
        for (auto& v : gx) v += g;
        break;
      }
    }
  }
  return BasicGradientMap<T>(std::move(shapes), std::move(grads), lowest);
}

using Tape = BasicTape<float>;
using GradientMap = BasicGradientMap<float>;

}  // namespace gbud
