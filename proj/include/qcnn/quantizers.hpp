#pragma once

// Quantization maps as pure free functions over Eigen arrays. Elementwise maps
// accept any 1-D or 2-D array expression; per-channel maps take a 2-D array
// whose rows are output channels (a conv kernel [F,C,kH,kW] viewed as
// [F, C*kH*kW]). Every function is templated on the scalar type through the
// Eigen expression it receives.

#include "qcnn/errors.hpp"

#include <Eigen/Core>

#include <cmath>
#include <string>

namespace qcnn::quant {

template <typename S>
using RowArray = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using ColArray = Eigen::Array<S, Eigen::Dynamic, 1>;

// Half-way cases round away from zero (std::round semantics).
template <typename S>
inline S round_half_away(S x) {
  return std::round(x);
}

// Per-row mean of |w|, accumulated in double so a row of identical
// magnitudes returns that magnitude exactly.
template <typename Derived>
ColArray<typename Derived::Scalar> row_abs_mean(const Eigen::ArrayBase<Derived>& w) {
  using S = typename Derived::Scalar;
  return w.abs().template cast<double>().rowwise().mean().template cast<S>();
}

// +1 where r >= 0, -1 otherwise. sign(0) = +1.
template <typename Derived>
typename Derived::PlainObject sign_binarize(const Eigen::ArrayBase<Derived>& r) {
  using S = typename Derived::Scalar;
  return r.unaryExpr([](S v) { return v >= S(0) ? S(1) : S(-1); });
}

inline void check_linear_args(int bitwidth, double min_v, double max_v) {
  if (bitwidth == 1)
    throw ContractError("linear_quantize: 1-bit quantization uses sign_binarize");
  if (bitwidth < 2 || bitwidth > 31)
    throw ContractError("linear_quantize: bitwidth must be in [2,31], got " +
                        std::to_string(bitwidth));
  if (!(min_v < max_v)) throw ContractError("linear_quantize: min_v must be < max_v");
}

// clip(round(x * 2^(b-1)) / 2^(b-1), min_v, max_v)
template <typename Derived>
typename Derived::PlainObject linear_quantize(const Eigen::ArrayBase<Derived>& x, int bitwidth,
                                              typename Derived::Scalar min_v,
                                              typename Derived::Scalar max_v) {
  using S = typename Derived::Scalar;
  check_linear_args(bitwidth, min_v, max_v);
  const S step = std::ldexp(S(1), bitwidth - 1);
  return x.unaryExpr([=](S v) {
    const S q = round_half_away(v * step) / step;
    return q < min_v ? min_v : (q > max_v ? max_v : q);
  });
}

inline void check_dorefa_bits(int bits) {
  if (bits != 1 && bits != 2 && bits != 3 && bits != 4 && bits != 8)
    throw ConfigError("DoReFa bit width must be one of {1,2,3,4,8}, got " + std::to_string(bits));
}

// round((2^k - 1) x) / (2^k - 1) on [0,1] inputs.
template <typename Derived>
typename Derived::PlainObject quantize_k(const Eigen::ArrayBase<Derived>& x, int bits) {
  using S = typename Derived::Scalar;
  const S levels = std::ldexp(S(1), bits) - S(1);
  return x.unaryExpr([=](S v) { return round_half_away(v * levels) / levels; });
}

// quantize_k(clip(a, 0, 1)); 1 bit is a 0/1 step at 0.5.
template <typename Derived>
typename Derived::PlainObject dorefa_activation_quantize(const Eigen::ArrayBase<Derived>& a,
                                                         int bits) {
  using S = typename Derived::Scalar;
  check_dorefa_bits(bits);
  return quantize_k(a.max(S(0)).min(S(1)), bits);
}

template <typename S>
struct ScaledBinary {
  RowArray<S> binary;  // values in {-1,+1}
  ColArray<S> alpha;   // one scale per row (output channel)
};

// B = sign(W), alpha[f] = ||W_f||_1 / n: the least-squares scale for W_f ~ alpha B_f.
template <typename Derived>
ScaledBinary<typename Derived::Scalar> xnor_weight_quantize(const Eigen::ArrayBase<Derived>& w) {
  using S = typename Derived::Scalar;
  if (w.size() == 0) throw ContractError("xnor_weight_quantize: empty weights");
  ScaledBinary<S> out;
  out.binary = sign_binarize(w);
  out.alpha = row_abs_mean(w);
  return out;
}

template <typename S>
struct DorefaWeights {
  RowArray<S> values;  // before per-channel scaling; in [-1,1]
  ColArray<S> scale;   // per-channel scale; all ones for bits >= 2
  RowArray<S> effective() const { return values.colwise() * scale; }
};

// 1 bit: sign(W) scaled per channel by mean|W_f|.
// k bits: 2 quantize_k(tanh(W) / (2 max|tanh W|) + 1/2) - 1, max over the layer.
template <typename Derived>
DorefaWeights<typename Derived::Scalar> dorefa_weight_quantize(const Eigen::ArrayBase<Derived>& w,
                                                               int bits) {
  using S = typename Derived::Scalar;
  check_dorefa_bits(bits);
  DorefaWeights<S> out;
  if (bits == 1) {
    out.values = sign_binarize(w);
    out.scale = row_abs_mean(w);
    return out;
  }
  const RowArray<S> t = w.tanh();
  const S max_abs = t.abs().maxCoeff();
  const RowArray<S> normalized =
      max_abs > S(0) ? RowArray<S>(t / (S(2) * max_abs) + S(0.5))
                     : RowArray<S>(RowArray<S>::Constant(w.rows(), w.cols(), S(0.5)));
  out.values = S(2) * quantize_k(normalized, bits) - S(1);
  out.scale = ColArray<S>::Ones(w.rows());
  return out;
}

// Threshold ternarization: +1 above delta, -1 below -delta, 0 otherwise.
template <typename Derived>
typename Derived::PlainObject ternarize(const Eigen::ArrayBase<Derived>& w,
                                        typename Derived::Scalar delta) {
  using S = typename Derived::Scalar;
  return w.unaryExpr([=](S v) { return v > delta ? S(1) : (v < -delta ? S(-1) : S(0)); });
}

template <typename S>
struct TwnWeights {
  RowArray<S> ternary;  // {-1,0,+1}
  ColArray<S> alpha;    // per-channel scale, 0 when nothing survives the threshold
  ColArray<S> delta;    // per-channel threshold
  RowArray<S> effective() const { return ternary.colwise() * alpha; }
};

// delta_f = factor * mean|W_f|; alpha_f = mean of |W_i| over |W_i| > delta_f.
template <typename Derived>
TwnWeights<typename Derived::Scalar> twn_ternarize(const Eigen::ArrayBase<Derived>& w,
                                                   typename Derived::Scalar delta_factor =
                                                       typename Derived::Scalar(0.7)) {
  using S = typename Derived::Scalar;
  if (w.size() == 0) throw ContractError("twn_ternarize: empty weights");
  TwnWeights<S> out;
  const auto rows = w.rows();
  out.ternary.resize(rows, w.cols());
  out.alpha.resize(rows);
  out.delta = delta_factor * row_abs_mean(w);
  for (Eigen::Index f = 0; f < rows; ++f) {
    out.ternary.row(f) = ternarize(w.row(f), out.delta[f]);
    const auto kept = (w.row(f).abs() > out.delta[f]).template cast<S>();
    const double count = kept.template cast<double>().sum();
    out.alpha[f] = count > 0 ? static_cast<S>((w.row(f).abs() * kept).template cast<double>().sum() / count) : S(0);
  }
  return out;
}

template <typename S>
struct TtqScales {
  S pos = S(1);
  S neg = S(1);
};

// Layer-wide symmetric threshold t * max|W|.
template <typename Derived>
typename Derived::Scalar ttq_threshold(const Eigen::ArrayBase<Derived>& w,
                                       typename Derived::Scalar t) {
  return w.size() == 0 ? typename Derived::Scalar(0) : t * w.abs().maxCoeff();
}

// pos where W > delta, -neg where W < -delta, 0 otherwise.
template <typename Derived>
typename Derived::PlainObject ttq_apply(const Eigen::ArrayBase<Derived>& w,
                                        const TtqScales<typename Derived::Scalar>& scales,
                                        typename Derived::Scalar delta) {
  using S = typename Derived::Scalar;
  if (!(scales.pos > S(0)) || !(scales.neg > S(0)))
    throw ContractError("ttq: scales must be positive");
  return w.unaryExpr([=](S v) { return v > delta ? scales.pos : (v < -delta ? -scales.neg : S(0)); });
}

template <typename Derived>
typename Derived::PlainObject ttq_ternarize(const Eigen::ArrayBase<Derived>& w,
                                            const TtqScales<typename Derived::Scalar>& scales,
                                            typename Derived::Scalar t) {
  return ttq_apply(w, scales, ttq_threshold(w, t));
}

template <typename Plain>
struct TtqGradients {
  typename Plain::Scalar d_pos = 0;
  typename Plain::Scalar d_neg = 0;
  Plain d_w;
};

// Gradients of a TTQ layer given the upstream gradient of its output.
// Scales receive the summed upstream over their regions; the shadow weights
// receive upstream * pos / upstream * neg / upstream in the positive,
// negative and zero regions.
template <typename DerivedG, typename DerivedW>
TtqGradients<typename DerivedW::PlainObject> ttq_scale_gradients(
    const Eigen::ArrayBase<DerivedG>& upstream, const Eigen::ArrayBase<DerivedW>& w,
    typename DerivedW::Scalar delta, const TtqScales<typename DerivedW::Scalar>& scales) {
  using S = typename DerivedW::Scalar;
  TtqGradients<typename DerivedW::PlainObject> out;
  const auto pos_mask = (w > delta).template cast<S>();
  const auto neg_mask = (w < -delta).template cast<S>();
  out.d_pos = (upstream * pos_mask).sum();
  out.d_neg = -(upstream * neg_mask).sum();
  out.d_w = upstream * (pos_mask * scales.pos + neg_mask * scales.neg +
                        (S(1) - pos_mask - neg_mask));
  return out;
}

}  // namespace qcnn::quant
