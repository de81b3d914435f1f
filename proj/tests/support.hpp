#pragma once

#include "qcnn/graph.hpp"
#include "qcnn/ops.hpp"
#include "qcnn/tensor.hpp"

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <vector>

namespace qcnn::testing {

inline TensorPtr random_tensor(Shape shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f,
                               bool requires_grad = false) {
  std::uniform_real_distribution<float> dist(lo, hi);
  auto t = make_tensor(std::move(shape));
  for (auto& v : t->span()) v = dist(rng);
  t->set_requires_grad(requires_grad);
  return t;
}

// Scalar probe L = sum(w * f(inputs)) with fixed random w, evaluated in double.
struct Probe {
  std::function<TensorPtr(Graph&)> forward;
  std::vector<float> weights;

  double value() {
    Graph g(false);
    auto y = forward(g);
    if (weights.empty()) {
      std::mt19937_64 rng(99);
      std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
      weights.resize(y->size());
      for (auto& w : weights) w = dist(rng);
    }
    double acc = 0;
    for (std::size_t i = 0; i < y->size(); ++i) acc += static_cast<double>(weights[i]) * (*y)[i];
    return acc;
  }

  void backward() {
    if (weights.empty()) value();
    Graph g(true);
    auto y = forward(g);
    auto w = make_tensor(y->shape());
    for (std::size_t i = 0; i < y->size(); ++i) (*w)[i] = weights[i];
    g.backward(sum(g, mul(g, y, w)));
  }
};

// Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||, floor)
// for the gradient of the probe with respect to `target`.
inline double gradient_error(Probe& probe, const TensorPtr& target, double step = 1e-3,
                             double floor = 1e-6) {
  target->zero_grad();
  probe.backward();
  const ArrayXs analytic = target->grad();
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < target->size(); ++i) {
    const float orig = (*target)[i];
    (*target)[i] = orig + static_cast<float>(step);
    const double up = probe.value();
    (*target)[i] = orig - static_cast<float>(step);
    const double down = probe.value();
    (*target)[i] = orig;
    const double numeric = (up - down) / (2 * step);
    const double a = analytic[static_cast<Eigen::Index>(i)];
    diff += (a - numeric) * (a - numeric);
    na += a * a;
    nn += numeric * numeric;
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

// Naive six-loop convolution oracle.
inline Tensor naive_conv2d(const Tensor& x, const Tensor& k, const Tensor* bias, int stride, int pad) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int f = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const int oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  Tensor out({n, f, oh, ow});
  for (int ni = 0; ni < n; ++ni)
    for (int fi = 0; fi < f; ++fi)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = bias ? (*bias)[static_cast<std::size_t>(fi)] : 0.0;
          for (int ci = 0; ci < c; ++ci)
            for (int ki = 0; ki < kh; ++ki)
              for (int kj = 0; kj < kw; ++kj) {
                const int iy = oy * stride + ki - pad, ix = ox * stride + kj - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += static_cast<double>(x[static_cast<std::size_t>(((ni * c + ci) * h + iy) * w + ix)]) *
                       k[static_cast<std::size_t>(((fi * c + ci) * kh + ki) * kw + kj)];
              }
          out[static_cast<std::size_t>(((ni * f + fi) * oh + oy) * ow + ox)] = static_cast<float>(acc);
        }
  return out;
}

inline Tensor naive_linear(const Tensor& x, const Tensor& w, const Tensor* bias) {
  const int n = x.dim(0), d = x.dim(1), k = w.dim(0);
  Tensor out({n, k});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) {
      double acc = bias ? (*bias)[static_cast<std::size_t>(j)] : 0.0;
      for (int t = 0; t < d; ++t)
        acc += static_cast<double>(x[static_cast<std::size_t>(i * d + t)]) * w[static_cast<std::size_t>(j * d + t)];
      out[static_cast<std::size_t>(i * k + j)] = static_cast<float>(acc);
    }
  return out;
}

inline Tensor naive_pool(const Tensor& x, bool max_pool, int k, int stride) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  Tensor out({n, c, oh, ow});
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = max_pool ? -1e30 : 0.0;
          for (int a = 0; a < k; ++a)
            for (int b = 0; b < k; ++b) {
              const double v = x[static_cast<std::size_t>(((ni * c + ci) * h + oy * stride + a) * w + ox * stride + b)];
              acc = max_pool ? std::max(acc, v) : acc + v;
            }
          out[static_cast<std::size_t>(((ni * c + ci) * oh + oy) * ow + ox)] =
              static_cast<float>(max_pool ? acc : acc / (k * k));
        }
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  return (a.values() - b.values()).abs().maxCoeff();
}

// MNIST location for data-dependent tests; empty when the files are absent.
inline std::filesystem::path mnist_dir() {
  const char* v = std::getenv("QCNN_DATA_DIR");
  if (!v || !*v) return {};
  const std::filesystem::path root(v);
  for (const auto& p : {root, root / "mnist"})
    if (std::filesystem::exists(p / "train-images-idx3-ubyte") ||
        std::filesystem::exists(p / "train-images-idx3-ubyte.gz"))
      return p;
  return {};
}

}  // namespace qcnn::testing
