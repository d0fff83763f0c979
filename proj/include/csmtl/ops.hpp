#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "csmtl/errors.hpp"
#include "csmtl/tape.hpp"
#include "csmtl/tensor.hpp"

namespace csmtl {

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(what) + " expects rank " + std::to_string(rank) + ", got shape " +
                         shape_string(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
}

inline Var in(const Tape::Node& node, std::size_t i) { return Var{node.inputs[i]}; }
inline Var out(const Tape::Node& node) { return Var{node.output}; }

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, k, ho, wo, stride, pad;

  // Visits every (output, input, weight) index triple contributing to the
  // cross-correlation. The loop order keeps the innermost axis contiguous.
  template <class F>
  void for_each_tap(F&& f) const {
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::size_t widx = ((co * cin + ci) * k + ky) * k + kx;
              for (std::size_t oy = 0; oy < ho; ++oy) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                const std::size_t xrow = ((b * cin + ci) * h + static_cast<std::size_t>(iy)) * w;
                const std::size_t yrow = ((b * cout + co) * ho + oy) * wo;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                  if (ix < 0 || ix >= static_cast<long>(w)) continue;
                  f(yrow + ox, xrow + static_cast<std::size_t>(ix), widx);
                }
              }
            }
  }
};

}  // namespace detail

/// Output extent of a strided, zero-padded convolution along one axis.
/// Throws ConfigError unless the window tiles the padded input exactly.
inline std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t stride,
                                      std::size_t padding) {
  if (stride == 0) throw ConfigError("conv2d stride must be positive");
  const std::size_t padded = input + 2 * padding;
  if (padded < kernel) {
    throw ConfigError("conv2d kernel " + std::to_string(kernel) + " larger than padded input " +
                      std::to_string(padded));
  }
  if ((padded - kernel) % stride != 0) {
    throw ConfigError("conv2d output extent (" + std::to_string(padded) + "-" + std::to_string(kernel) +
                      ")/" + std::to_string(stride) + "+1 is not an integer");
  }
  return (padded - kernel) / stride + 1;
}

/// Cross-correlation of input [N,Cin,H,W] with weight [Cout,Cin,K,K].
inline Var conv2d(Tape& tape, Var input, Var weight, std::size_t stride = 1, std::size_t padding = 0) {
  const Tensor& x = tape.value(input);
  const Tensor& w = tape.value(weight);
  detail::require_rank(x, 4, "conv2d input");
  detail::require_rank(w, 4, "conv2d weight");
  const std::size_t k = w.dim(2);
  if (w.dim(1) != x.dim(1)) {
    throw DimensionError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                         std::to_string(w.dim(1)));
  }
  if (w.dim(3) != k) throw DimensionError("conv2d: kernel must be square, got " + shape_string(w.shape()));
  const detail::ConvGeometry g{x.dim(0),
                               x.dim(1),
                               x.dim(2),
                               x.dim(3),
                               w.dim(0),
                               k,
                               conv_output_extent(x.dim(2), k, stride, padding),
                               conv_output_extent(x.dim(3), k, stride, padding),
                               stride,
                               padding};

  Tensor y(Shape{g.n, g.cout, g.ho, g.wo});
  {
    const double* xv = x.values().data();
    const double* wv = w.values().data();
    double* yv = y.values().data();
    g.for_each_tap([&](std::size_t yi, std::size_t xi, std::size_t wi) { yv[yi] += wv[wi] * xv[xi]; });
  }

  return tape.record(OpTag::conv2d, {input, weight}, std::move(y), [g](Tape& t, const Tape::Node& node) {
    const Var xin = detail::in(node, 0), win = detail::in(node, 1);
    const double* dy = t.tensor(detail::out(node)).grad().data();
    if (t.requires_grad(xin)) {
      const double* wv = t.tensor(win).values().data();
      double* dx = t.tensor(xin).grad().data();
      g.for_each_tap([&](std::size_t yi, std::size_t xi, std::size_t wi) { dx[xi] += wv[wi] * dy[yi]; });
    }
    if (t.requires_grad(win)) {
      const double* xv = t.tensor(xin).values().data();
      double* dw = t.tensor(win).grad().data();
      g.for_each_tap([&](std::size_t yi, std::size_t xi, std::size_t wi) { dw[wi] += xv[xi] * dy[yi]; });
    }
  });
}

/// Adds bias[c] to every element of channel c of an [N,C,...] tensor.
inline Var add_channel_bias(Tape& tape, Var input, Var bias) {
  const Tensor& x = tape.value(input);
  const Tensor& b = tape.value(bias);
  if (x.rank() < 2) throw DimensionError("add_channel_bias expects rank >= 2, got " + shape_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.size() / (n * c);
  if (b.size() != c) {
    throw DimensionError("add_channel_bias: bias has " + std::to_string(b.size()) + " entries for " +
                         std::to_string(c) + " channels");
  }
  Tensor y = x;
  y.zero_grad();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < inner; ++j) y[(i * c + ch) * inner + j] += b[ch];

  return tape.record(OpTag::channel_bias, {input, bias}, std::move(y),
                     [n, c, inner](Tape& t, const Tape::Node& node) {
                       const auto& dy = t.tensor(detail::out(node)).grad();
                       const Var xin = detail::in(node, 0), bin = detail::in(node, 1);
                       if (t.requires_grad(xin)) {
                         auto& dx = t.tensor(xin).grad();
                         for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
                       }
                       if (t.requires_grad(bin)) {
                         auto& db = t.tensor(bin).grad();
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t ch = 0; ch < c; ++ch)
                             for (std::size_t j = 0; j < inner; ++j) db[ch] += dy[(i * c + ch) * inner + j];
                       }
                     });
}

inline Var relu(Tape& tape, Var input) {
  Tensor y = tape.value(input);
  y.zero_grad();
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return tape.record(OpTag::relu, {input}, std::move(y), [](Tape& t, const Tape::Node& node) {
    const Var xin = detail::in(node, 0);
    if (!t.requires_grad(xin)) return;
    const auto& yv = t.tensor(detail::out(node)).values();
    const auto& dy = t.tensor(detail::out(node)).grad();
    auto& dx = t.tensor(xin).grad();
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += yv[i] > 0.0 ? dy[i] : 0.0;
  });
}

/// Dense product of a [M,K] and b [K,N].
inline Var matmul(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  detail::require_rank(av, 2, "matmul lhs");
  detail::require_rank(bv, 2, "matmul rhs");
  const std::size_t m = av.dim(0), kk = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != kk) {
    throw DimensionError("matmul: " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  }
  Tensor y(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < kk; ++p) {
      const double aip = av[i * kk + p];
      for (std::size_t j = 0; j < n; ++j) y[i * n + j] += aip * bv[p * n + j];
    }
  return tape.record(OpTag::matmul, {a, b}, std::move(y), [m, kk, n](Tape& t, const Tape::Node& node) {
    const Var ain = detail::in(node, 0), bin = detail::in(node, 1);
    const auto& dy = t.tensor(detail::out(node)).grad();
    if (t.requires_grad(ain)) {
      const auto& bvals = t.tensor(bin).values();
      auto& da = t.tensor(ain).grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < kk; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += dy[i * n + j] * bvals[p * n + j];
          da[i * kk + p] += acc;
        }
    }
    if (t.requires_grad(bin)) {
      const auto& avals = t.tensor(ain).values();
      auto& db = t.tensor(bin).grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < kk; ++p) {
          const double aip = avals[i * kk + p];
          for (std::size_t j = 0; j < n; ++j) db[p * n + j] += aip * dy[i * n + j];
        }
    }
  });
}

inline Var add(Tape& tape, Var a, Var b) {
  detail::require_same_shape(tape.value(a), tape.value(b), "add");
  Tensor y = tape.value(a);
  y.zero_grad();
  const auto& bv = tape.value(b).values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return tape.record(OpTag::add, {a, b}, std::move(y), [](Tape& t, const Tape::Node& node) {
    const auto& dy = t.tensor(detail::out(node)).grad();
    for (std::size_t k = 0; k < 2; ++k) {
      const Var v = detail::in(node, k);
      if (!t.requires_grad(v)) continue;
      auto& dx = t.tensor(v).grad();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    }
  });
}

/// Elementwise product.
inline Var mul(Tape& tape, Var a, Var b) {
  detail::require_same_shape(tape.value(a), tape.value(b), "mul");
  Tensor y = tape.value(a);
  y.zero_grad();
  const auto& bv = tape.value(b).values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  return tape.record(OpTag::mul, {a, b}, std::move(y), [](Tape& t, const Tape::Node& node) {
    const Var ain = detail::in(node, 0), bin = detail::in(node, 1);
    const auto& dy = t.tensor(detail::out(node)).grad();
    if (t.requires_grad(ain)) {
      const auto& bv2 = t.tensor(bin).values();
      auto& da = t.tensor(ain).grad();
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv2[i];
    }
    if (t.requires_grad(bin)) {
      const auto& av = t.tensor(ain).values();
      auto& db = t.tensor(bin).grad();
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
    }
  });
}

inline Var scale(Tape& tape, Var a, double factor) {
  Tensor y = tape.value(a);
  y.zero_grad();
  for (double& v : y.values()) v *= factor;
  return tape.record(OpTag::scale, {a}, std::move(y), [factor](Tape& t, const Tape::Node& node) {
    const Var ain = detail::in(node, 0);
    if (!t.requires_grad(ain)) return;
    const auto& dy = t.tensor(detail::out(node)).grad();
    auto& da = t.tensor(ain).grad();
    for (std::size_t i = 0; i < dy.size(); ++i) da[i] += factor * dy[i];
  });
}

inline Var exp(Tape& tape, Var a) {
  Tensor y = tape.value(a);
  y.zero_grad();
  for (double& v : y.values()) v = std::exp(v);
  return tape.record(OpTag::exp, {a}, std::move(y), [](Tape& t, const Tape::Node& node) {
    const Var ain = detail::in(node, 0);
    if (!t.requires_grad(ain)) return;
    const auto& yv = t.tensor(detail::out(node)).values();
    const auto& dy = t.tensor(detail::out(node)).grad();
    auto& da = t.tensor(ain).grad();
    for (std::size_t i = 0; i < dy.size(); ++i) da[i] += yv[i] * dy[i];
  });
}

/// Sum of all elements, as a scalar.
inline Var sum(Tape& tape, Var a) {
  double acc = 0.0;
  for (double v : tape.value(a).values()) acc += v;
  return tape.record(OpTag::sum, {a}, Tensor::scalar(acc), [](Tape& t, const Tape::Node& node) {
    const Var ain = detail::in(node, 0);
    if (!t.requires_grad(ain)) return;
    const double dy = t.tensor(detail::out(node)).grad()[0];
    for (double& g : t.tensor(ain).grad()) g += dy;
  });
}

/// Flat element `index` of a tensor, as a scalar.
inline Var element(Tape& tape, Var a, std::size_t index) {
  const Tensor& av = tape.value(a);
  if (index >= av.size()) {
    throw DimensionError("element " + std::to_string(index) + " of tensor with " + std::to_string(av.size()) +
                         " entries");
  }
  return tape.record(OpTag::element, {a}, Tensor::scalar(av[index]), [index](Tape& t, const Tape::Node& node) {
    const Var ain = detail::in(node, 0);
    if (!t.requires_grad(ain)) return;
    t.tensor(ain).grad()[index] += t.tensor(detail::out(node)).grad()[0];
  });
}

/// Sum of a list of scalars (or same-shape tensors).
inline Var add_all(Tape& tape, std::span<const Var> terms) {
  if (terms.empty()) throw DimensionError("add_all of an empty list");
  Var acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(tape, acc, terms[i]);
  return acc;
}

enum class LossKind { mse, cross_entropy };

inline const char* loss_kind_name(LossKind kind) { return kind == LossKind::mse ? "mse" : "cross_entropy"; }

/// Training target: a dense tensor for regression or per-position class
/// indices for classification. An empty target means "missing".
struct Target {
  std::shared_ptr<const Tensor> dense;
  std::shared_ptr<const std::vector<int>> labels;

  static Target regression(Tensor t) { return Target{std::make_shared<const Tensor>(std::move(t)), nullptr}; }
  static Target classes(std::vector<int> l) {
    return Target{nullptr, std::make_shared<const std::vector<int>>(std::move(l))};
  }
  bool empty() const { return !dense && !labels; }
};

/// Mean squared error over all elements.
inline Var mse_loss(Tape& tape, Var prediction, const Tensor& target) {
  const Tensor& p = tape.value(prediction);
  detail::require_same_shape(p, target, "mse_loss");
  std::vector<double> diff(p.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    diff[i] = p[i] - target[i];
    acc += diff[i] * diff[i];
  }
  const double inv_n = 1.0 / static_cast<double>(p.size());
  return tape.record(OpTag::mse_loss, {prediction}, Tensor::scalar(acc * inv_n),
                     [diff = std::move(diff), inv_n](Tape& t, const Tape::Node& node) {
                       const Var pin = detail::in(node, 0);
                       if (!t.requires_grad(pin)) return;
                       const double dy = t.tensor(detail::out(node)).grad()[0];
                       auto& dp = t.tensor(pin).grad();
                       for (std::size_t i = 0; i < diff.size(); ++i) dp[i] += 2.0 * inv_n * diff[i] * dy;
                     });
}

/// Softmax cross-entropy, mean over positions. Logits are [N,C] or
/// [N,C,H,W]; labels hold one class index per position in N(,H,W) order.
inline Var cross_entropy_loss(Tape& tape, Var logits, std::span<const int> labels) {
  const Tensor& z = tape.value(logits);
  if (z.rank() != 2 && z.rank() != 4) {
    throw DimensionError("cross_entropy_loss expects [N,C] or [N,C,H,W] logits, got " + shape_string(z.shape()));
  }
  const std::size_t n = z.dim(0), c = z.dim(1), inner = z.size() / (n * c);
  if (labels.size() != n * inner) {
    throw DimensionError("cross_entropy_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n * inner) + " positions");
  }
  std::vector<double> probs(z.size());
  double acc = 0.0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < inner; ++j) {
      const int label = labels[b * inner + j];
      if (label < 0 || static_cast<std::size_t>(label) >= c) {
        throw LabelError("class index " + std::to_string(label) + " outside [0, " + std::to_string(c) + ")");
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, z[(b * c + k) * inner + j]);
      double denom = 0.0;
      for (std::size_t k = 0; k < c; ++k) denom += std::exp(z[(b * c + k) * inner + j] - mx);
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t idx = (b * c + k) * inner + j;
        probs[idx] = std::exp(z[idx] - mx) / denom;
      }
      acc -= z[(b * c + static_cast<std::size_t>(label)) * inner + j] - mx - std::log(denom);
    }
  const double inv_n = 1.0 / static_cast<double>(n * inner);
  std::vector<int> saved(labels.begin(), labels.end());
  return tape.record(
      OpTag::cross_entropy_loss, {logits}, Tensor::scalar(acc * inv_n),
      [probs = std::move(probs), saved = std::move(saved), n, c, inner, inv_n](Tape& t, const Tape::Node& node) {
        const Var zin = detail::in(node, 0);
        if (!t.requires_grad(zin)) return;
        const double dy = t.tensor(detail::out(node)).grad()[0];
        auto& dz = t.tensor(zin).grad();
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t j = 0; j < inner; ++j) {
            const auto label = static_cast<std::size_t>(saved[b * inner + j]);
            for (std::size_t k = 0; k < c; ++k) {
              const std::size_t idx = (b * c + k) * inner + j;
              dz[idx] += dy * inv_n * (probs[idx] - (k == label ? 1.0 : 0.0));
            }
          }
      });
}

/// Dispatches on loss kind; the target must carry the matching payload.
inline Var compute_loss(Tape& tape, Var prediction, const Target& target, LossKind kind) {
  if (kind == LossKind::mse) {
    if (!target.dense) throw DataError("mse loss needs a dense regression target");
    return mse_loss(tape, prediction, *target.dense);
  }
  if (!target.labels) throw DataError("cross-entropy loss needs class-index targets");
  return cross_entropy_loss(tape, prediction, *target.labels);
}

}  // namespace csmtl
