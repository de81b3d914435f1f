#include "qcnn/ops.hpp"

#include "qcnn/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace qcnn {
namespace {

void require_rank(const Tensor& t, int rank, const char* what) {
  if (t.rank() != rank)
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + to_string(t.shape()));
}

struct ConvGeometry {
  int n, c, h, w;
  int f, kh, kw;
  int stride, pad;
  int oh, ow;
  int patch() const { return c * kh * kw; }
  int out_plane() const { return oh * ow; }
};

int conv_out_extent(int in, int k, int stride, int pad, const char* axis) {
  const int span = in + 2 * pad - k;
  if (span < 0)
    throw ConfigError(std::string("conv2d: kernel larger than padded input along ") + axis);
  // The floor drops a trailing remainder. Accept it when it is no wider than
  // the trailing padding plus the gap the stride already leaves between windows.
  if (span % stride > pad + std::max(0, stride - k))
    throw ConfigError(std::string("conv2d: non-integer output size along ") + axis + " ((" +
                      std::to_string(in) + " + 2*" + std::to_string(pad) + " - " +
                      std::to_string(k) + ") / " + std::to_string(stride) + ")");
  return span / stride + 1;
}

// Output columns [lo, hi) whose input column ox*s+kj-p lies inside [0, w).
std::pair<int, int> valid_columns(const ConvGeometry& g, int kj) {
  const int off = kj - g.pad;
  int lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  int hi = (g.w - 1 - off) >= 0 ? (g.w - 1 - off) / g.stride + 1 : 0;
  hi = std::min(hi, g.ow);
  lo = std::min(lo, hi);
  return {lo, hi};
}

// col[(ci*kh+ki)*kw+kj, oy*ow+ox] = image[ci, oy*s+ki-p, ox*s+kj-p], zero outside.
void im2col(const Scalar* image, const ConvGeometry& g, Scalar* col) {
  const int plane = g.out_plane();
  for (int ci = 0; ci < g.c; ++ci) {
    const Scalar* chan = image + static_cast<std::ptrdiff_t>(ci) * g.h * g.w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        Scalar* row = col + static_cast<std::ptrdiff_t>((ci * g.kh + ki) * g.kw + kj) * plane;
        const auto [lo, hi] = valid_columns(g, kj);
        const int off = kj - g.pad;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride + ki - g.pad;
          Scalar* dst = row + oy * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.ow, Scalar(0));
            continue;
          }
          const Scalar* src = chan + iy * g.w;
          std::fill(dst, dst + lo, Scalar(0));
          if (g.stride == 1) {
            std::copy(src + lo + off, src + hi + off, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride + off];
          }
          std::fill(dst + hi, dst + g.ow, Scalar(0));
        }
      }
    }
  }
}

void col2im(const Scalar* col, const ConvGeometry& g, Scalar* image) {
  const int plane = g.out_plane();
  for (int ci = 0; ci < g.c; ++ci) {
    Scalar* chan = image + static_cast<std::ptrdiff_t>(ci) * g.h * g.w;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const Scalar* row = col + static_cast<std::ptrdiff_t>((ci * g.kh + ki) * g.kw + kj) * plane;
        const auto [lo, hi] = valid_columns(g, kj);
        const int off = kj - g.pad;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride + ki - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          const Scalar* src = row + oy * g.ow;
          Scalar* dst = chan + iy * g.w;
          for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride + off] += src[ox];
        }
      }
    }
  }
}

using MatMap = Eigen::Map<RowMatrixXs>;
using ConstMatMap = Eigen::Map<const RowMatrixXs>;

// Channel iteration helper for [N,C] and [N,C,H,W].
struct ChannelLayout {
  int n, c, inner;
  explicit ChannelLayout(const Tensor& t) {
    if (t.rank() != 2 && t.rank() != 4)
      throw DimensionError("channel op: expected rank 2 or 4, got " + to_string(t.shape()));
    n = t.dim(0);
    c = t.dim(1);
    inner = t.rank() == 4 ? t.dim(2) * t.dim(3) : 1;
  }
  std::ptrdiff_t offset(int ni, int ci) const {
    return (static_cast<std::ptrdiff_t>(ni) * c + ci) * inner;
  }
};

}  // namespace

TensorPtr conv2d(Graph& g, const TensorPtr& input, const TensorPtr& kernel, const TensorPtr& bias,
                 int stride, int padding) {
  require_rank(*input, 4, "conv2d input");
  require_rank(*kernel, 4, "conv2d kernel");
  if (stride <= 0) throw ConfigError("conv2d: stride must be positive");
  if (padding < 0) throw ConfigError("conv2d: padding must be non-negative");
  if (kernel->dim(1) != input->dim(1))
    throw DimensionError("conv2d: axis 1 (channels) mismatch: input has " +
                         std::to_string(input->dim(1)) + ", kernel expects " +
                         std::to_string(kernel->dim(1)));
  if (bias && (bias->rank() != 1 || bias->dim(0) != kernel->dim(0)))
    throw DimensionError("conv2d: bias must have shape [" + std::to_string(kernel->dim(0)) + "]");

  ConvGeometry geo{input->dim(0), input->dim(1), input->dim(2), input->dim(3),
                   kernel->dim(0), kernel->dim(2), kernel->dim(3), stride, padding, 0, 0};
  geo.oh = conv_out_extent(geo.h, geo.kh, stride, padding, "axis 2 (height)");
  geo.ow = conv_out_extent(geo.w, geo.kw, stride, padding, "axis 3 (width)");

  auto out = make_tensor({geo.n, geo.f, geo.oh, geo.ow});
  const int patch = geo.patch();
  const int plane = geo.out_plane();
  const std::ptrdiff_t in_stride = static_cast<std::ptrdiff_t>(geo.c) * geo.h * geo.w;
  const std::ptrdiff_t out_stride = static_cast<std::ptrdiff_t>(geo.f) * plane;

  RowMatrixXs col(patch, plane);
  ConstMatMap k(kernel->values().data(), geo.f, patch);
  for (int ni = 0; ni < geo.n; ++ni) {
    im2col(input->values().data() + ni * in_stride, geo, col.data());
    MatMap o(out->values().data() + ni * out_stride, geo.f, plane);
    o.noalias() = k * col;
    if (bias) o.colwise() += bias->values().matrix();
  }

  if (g.needs_grad({input.get(), kernel.get(), bias.get()})) {
    std::vector<TensorPtr> inputs{input, kernel};
    if (bias) inputs.push_back(bias);
    g.record("conv2d", std::move(inputs), out, [input, kernel, bias, out, geo] {
      const int patch = geo.patch();
      const int plane = geo.out_plane();
      const std::ptrdiff_t in_stride = static_cast<std::ptrdiff_t>(geo.c) * geo.h * geo.w;
      const std::ptrdiff_t out_stride = static_cast<std::ptrdiff_t>(geo.f) * plane;
      ConstMatMap k(kernel->values().data(), geo.f, patch);
      RowMatrixXs col(patch, plane);
      RowMatrixXs dcol(patch, plane);
      const bool want_k = kernel->requires_grad();
      const bool want_x = input->requires_grad();
      const bool want_b = bias && bias->requires_grad();
      for (int ni = 0; ni < geo.n; ++ni) {
        ConstMatMap dout(out->grad().data() + ni * out_stride, geo.f, plane);
        if (want_k) {
          im2col(input->values().data() + ni * in_stride, geo, col.data());
          MatMap dk(kernel->grad().data(), geo.f, patch);
          dk.noalias() += dout * col.transpose();
        }
        if (want_x) {
          dcol.noalias() = k.transpose() * dout;
          col2im(dcol.data(), geo, input->grad().data() + ni * in_stride);
        }
        if (want_b) bias->grad().matrix() += dout.rowwise().sum();
      }
    });
  }
  return out;
}

TensorPtr linear(Graph& g, const TensorPtr& input, const TensorPtr& weight, const TensorPtr& bias) {
  require_rank(*input, 2, "linear input");
  require_rank(*weight, 2, "linear weight");
  if (input->dim(1) != weight->dim(1))
    throw DimensionError("linear: axis 1 (features) mismatch: input has " +
                         std::to_string(input->dim(1)) + ", weight expects " +
                         std::to_string(weight->dim(1)));
  if (bias && (bias->rank() != 1 || bias->dim(0) != weight->dim(0)))
    throw DimensionError("linear: bias must have shape [" + std::to_string(weight->dim(0)) + "]");
  const int n = input->dim(0), d = input->dim(1), k = weight->dim(0);
  auto out = make_tensor({n, k});
  MatMap o(out->values().data(), n, k);
  ConstMatMap x(input->values().data(), n, d);
  ConstMatMap w(weight->values().data(), k, d);
  o.noalias() = x * w.transpose();
  if (bias) o.rowwise() += bias->values().matrix().transpose();

  if (g.needs_grad({input.get(), weight.get(), bias.get()})) {
    std::vector<TensorPtr> inputs{input, weight};
    if (bias) inputs.push_back(bias);
    g.record("linear", std::move(inputs), out, [input, weight, bias, out, n, d, k] {
      ConstMatMap dout(out->grad().data(), n, k);
      if (weight->requires_grad()) {
        MatMap dw(weight->grad().data(), k, d);
        dw.noalias() += dout.transpose() * ConstMatMap(input->values().data(), n, d);
      }
      if (input->requires_grad()) {
        MatMap dx(input->grad().data(), n, d);
        dx.noalias() += dout * ConstMatMap(weight->values().data(), k, d);
      }
      if (bias && bias->requires_grad())
        bias->grad().matrix() += dout.colwise().sum().transpose();
    });
  }
  return out;
}

TensorPtr add(Graph& g, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape() != b->shape())
    throw DimensionError("add: shape mismatch " + to_string(a->shape()) + " vs " +
                         to_string(b->shape()));
  auto out = make_tensor(a->shape(), ArrayXs(a->values() + b->values()));
  if (g.needs_grad({a.get(), b.get()})) {
    g.record("add", {a, b}, out, [a, b, out] {
      if (a->requires_grad()) a->grad() += out->grad();
      if (b->requires_grad()) b->grad() += out->grad();
    });
  }
  return out;
}

TensorPtr mul(Graph& g, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape() != b->shape())
    throw DimensionError("mul: shape mismatch " + to_string(a->shape()) + " vs " +
                         to_string(b->shape()));
  auto out = make_tensor(a->shape(), ArrayXs(a->values() * b->values()));
  if (g.needs_grad({a.get(), b.get()})) {
    g.record("mul", {a, b}, out, [a, b, out] {
      if (a->requires_grad()) a->grad() += out->grad() * b->values();
      if (b->requires_grad()) b->grad() += out->grad() * a->values();
    });
  }
  return out;
}

TensorPtr sum(Graph& g, const TensorPtr& x) {
  auto out = make_tensor({1}, {x->values().sum()});
  if (g.needs_grad({x.get()})) {
    g.record("sum", {x}, out, [x, out] { x->grad() += out->grad()[0]; });
  }
  return out;
}

TensorPtr scale_channels(Graph& g, const TensorPtr& x, const ArrayXs& scale) {
  const ChannelLayout lay(*x);
  if (scale.size() != lay.c)
    throw DimensionError("scale_channels: axis 1 has " + std::to_string(lay.c) +
                         " channels, got " + std::to_string(scale.size()) + " scales");
  auto out = make_tensor(x->shape());
  for (int ni = 0; ni < lay.n; ++ni)
    for (int ci = 0; ci < lay.c; ++ci)
      out->values().segment(lay.offset(ni, ci), lay.inner) =
          x->values().segment(lay.offset(ni, ci), lay.inner) * scale[ci];
  if (g.needs_grad({x.get()})) {
    g.record("scale_channels", {x}, out, [x, out, scale, lay] {
      auto& dx = x->grad();
      for (int ni = 0; ni < lay.n; ++ni)
        for (int ci = 0; ci < lay.c; ++ci)
          dx.segment(lay.offset(ni, ci), lay.inner) +=
              out->grad().segment(lay.offset(ni, ci), lay.inner) * scale[ci];
    });
  }
  return out;
}

TensorPtr add_channel_bias(Graph& g, const TensorPtr& x, const TensorPtr& bias) {
  const ChannelLayout lay(*x);
  if (bias->size() != static_cast<std::size_t>(lay.c))
    throw DimensionError("add_channel_bias: axis 1 has " + std::to_string(lay.c) + " channels");
  auto out = make_tensor(x->shape());
  for (int ni = 0; ni < lay.n; ++ni)
    for (int ci = 0; ci < lay.c; ++ci)
      out->values().segment(lay.offset(ni, ci), lay.inner) =
          x->values().segment(lay.offset(ni, ci), lay.inner) + bias->values()[ci];
  if (g.needs_grad({x.get(), bias.get()})) {
    g.record("add_channel_bias", {x, bias}, out, [x, bias, out, lay] {
      if (x->requires_grad()) x->grad() += out->grad();
      if (bias->requires_grad()) {
        auto& db = bias->grad();
        for (int ni = 0; ni < lay.n; ++ni)
          for (int ci = 0; ci < lay.c; ++ci)
            db[ci] += out->grad().segment(lay.offset(ni, ci), lay.inner).sum();
      }
    });
  }
  return out;
}

TensorPtr elementwise_map(Graph& g, const TensorPtr& x, ArrayXs values, ArrayXs derivative,
                          const char* op_name) {
  if (static_cast<std::size_t>(values.size()) != x->size())
    throw DimensionError(std::string(op_name) + ": value count does not match input");
  auto out = make_tensor(x->shape(), std::move(values));
  if (g.needs_grad({x.get()})) {
    if (static_cast<std::size_t>(derivative.size()) != x->size())
      throw DimensionError(std::string(op_name) + ": derivative count does not match input");
    g.record(op_name, {x}, out, [x, out, d = std::move(derivative)] {
      x->grad() += out->grad() * d;
    });
  }
  return out;
}

TensorPtr ste_identity(Graph& g, const TensorPtr& x,
                       const std::function<ArrayXs(const ArrayXs&)>& forward_fn, Scalar clip_lo,
                       Scalar clip_hi) {
  if (!(clip_lo < clip_hi)) throw ContractError("ste_identity: clip_lo must be < clip_hi");
  ArrayXs values = forward_fn(x->values());
  ArrayXs mask;
  if (g.needs_grad({x.get()}))
    mask = ((x->values() >= clip_lo) && (x->values() <= clip_hi)).cast<Scalar>();
  return elementwise_map(g, x, std::move(values), std::move(mask), "ste");
}

TensorPtr relu(Graph& g, const TensorPtr& x) {
  const auto& v = x->values();
  ArrayXs d;
  if (g.needs_grad({x.get()})) d = (v > Scalar(0)).cast<Scalar>();
  return elementwise_map(g, x, v.max(Scalar(0)), std::move(d), "relu");
}

TensorPtr hardtanh(Graph& g, const TensorPtr& x) {
  const auto& v = x->values();
  ArrayXs d;
  if (g.needs_grad({x.get()})) d = ((v >= Scalar(-1)) && (v <= Scalar(1))).cast<Scalar>();
  return elementwise_map(g, x, v.max(Scalar(-1)).min(Scalar(1)), std::move(d), "hardtanh");
}

TensorPtr pool2d(Graph& g, const TensorPtr& x, PoolKind kind, int kernel, int stride) {
  require_rank(*x, 4, "pool2d input");
  if (kernel <= 0 || stride <= 0) throw ConfigError("pool2d: kernel and stride must be positive");
  const int n = x->dim(0), c = x->dim(1), h = x->dim(2), w = x->dim(3);
  if (kernel > h || kernel > w)
    throw ConfigError("pool2d: window " + std::to_string(kernel) + " larger than input " +
                      std::to_string(h) + "x" + std::to_string(w));
  const int oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
  auto out = make_tensor({n, c, oh, ow});
  const bool track = g.needs_grad({x.get()});
  std::vector<int> argmax;
  if (track && kind == PoolKind::Max) argmax.resize(out->size());

  const Scalar* in = x->values().data();
  Scalar* o = out->values().data();
  const Scalar inv_area = Scalar(1) / static_cast<Scalar>(kernel * kernel);
  std::size_t idx = 0;
  for (int plane = 0; plane < n * c; ++plane) {
    const Scalar* src = in + static_cast<std::ptrdiff_t>(plane) * h * w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++idx) {
        if (kind == PoolKind::Max) {
          Scalar best = -std::numeric_limits<Scalar>::infinity();
          int best_at = -1;
          for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx) {
              const int at = (oy * stride + ky) * w + ox * stride + kx;
              // strict '>' keeps the lowest flat index on ties
              if (best_at < 0 || src[at] > best) {
                best = src[at];
                best_at = at;
              }
            }
          o[idx] = best;
          if (track) argmax[idx] = plane * h * w + best_at;
        } else {
          Scalar acc = 0;
          for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx) acc += src[(oy * stride + ky) * w + ox * stride + kx];
          o[idx] = acc * inv_area;
        }
      }
    }
  }

  if (track) {
    g.record(kind == PoolKind::Max ? "max_pool2d" : "avg_pool2d", {x}, out,
             [x, out, kind, kernel, stride, h, w, oh, ow, n, c, argmax = std::move(argmax),
              inv_area] {
               auto& dx = x->grad();
               const auto& dout = out->grad();
               if (kind == PoolKind::Max) {
                 for (std::size_t i = 0; i < argmax.size(); ++i)
                   dx[argmax[i]] += dout[static_cast<Eigen::Index>(i)];
                 return;
               }
               std::size_t idx = 0;
               for (int plane = 0; plane < n * c; ++plane) {
                 Scalar* dst = dx.data() + static_cast<std::ptrdiff_t>(plane) * h * w;
                 for (int oy = 0; oy < oh; ++oy)
                   for (int ox = 0; ox < ow; ++ox, ++idx) {
                     const Scalar gval = dout[static_cast<Eigen::Index>(idx)] * inv_area;
                     for (int ky = 0; ky < kernel; ++ky)
                       for (int kx = 0; kx < kernel; ++kx)
                         dst[(oy * stride + ky) * w + ox * stride + kx] += gval;
                   }
               }
             });
  }
  return out;
}

TensorPtr global_avg_pool(Graph& g, const TensorPtr& x) {
  require_rank(*x, 4, "global_avg_pool input");
  const int n = x->dim(0), c = x->dim(1), area = x->dim(2) * x->dim(3);
  auto out = make_tensor({n, c});
  Eigen::Map<const RowMatrixXs> planes(x->values().data(), n * c, area);
  out->values() = planes.rowwise().mean().array();
  if (g.needs_grad({x.get()})) {
    g.record("global_avg_pool", {x}, out, [x, out, n, c, area] {
      Eigen::Map<RowMatrixXs> dx(x->grad().data(), n * c, area);
      dx.colwise() += (out->grad() / static_cast<Scalar>(area)).matrix();
    });
  }
  return out;
}

TensorPtr flatten(Graph& g, const TensorPtr& x) {
  if (x->rank() < 2) throw DimensionError("flatten: need rank >= 2, got " + to_string(x->shape()));
  const int n = x->dim(0);
  const int rest = static_cast<int>(x->size()) / n;
  auto out = make_tensor({n, rest}, x->values());
  if (g.needs_grad({x.get()})) {
    g.record("flatten", {x}, out, [x, out] { x->grad() += out->grad(); });
  }
  return out;
}

TensorPtr batch_norm(Graph& g, const TensorPtr& x, const BatchNormBuffers& bn, bool training) {
  const ChannelLayout lay(*x);
  if (bn.gamma->size() != static_cast<std::size_t>(lay.c))
    throw DimensionError("batch_norm: axis 1 has " + std::to_string(lay.c) +
                         " channels, state has " + std::to_string(bn.gamma->size()));
  const auto count = static_cast<Scalar>(lay.n) * static_cast<Scalar>(lay.inner);
  ArrayXs mean(lay.c), inv_std(lay.c);
  if (training) {
    for (int ci = 0; ci < lay.c; ++ci) {
      double s = 0, ss = 0;
      for (int ni = 0; ni < lay.n; ++ni) {
        const auto seg = x->values().segment(lay.offset(ni, ci), lay.inner);
        s += seg.cast<double>().sum();
      }
      const double m = s / count;
      for (int ni = 0; ni < lay.n; ++ni) {
        const auto seg = x->values().segment(lay.offset(ni, ci), lay.inner);
        ss += (seg.cast<double>() - m).square().sum();
      }
      const double var = ss / count;
      mean[ci] = static_cast<Scalar>(m);
      inv_std[ci] = static_cast<Scalar>(1.0 / std::sqrt(var + bn.epsilon));
      const double unbiased = count > 1 ? ss / (count - 1) : var;
      auto& rm = bn.running_mean->values();
      auto& rv = bn.running_var->values();
      rm[ci] = (1 - bn.momentum) * rm[ci] + bn.momentum * static_cast<Scalar>(m);
      rv[ci] = (1 - bn.momentum) * rv[ci] + bn.momentum * static_cast<Scalar>(unbiased);
    }
  } else {
    mean = bn.running_mean->values();
    inv_std = (bn.running_var->values() + bn.epsilon).rsqrt();
  }

  auto out = make_tensor(x->shape());
  const bool track = g.needs_grad({x.get(), bn.gamma.get(), bn.beta.get()});
  ArrayXs xhat;
  if (track) xhat.resize(static_cast<Eigen::Index>(x->size()));
  const auto& gamma = bn.gamma->values();
  const auto& beta = bn.beta->values();
  for (int ni = 0; ni < lay.n; ++ni)
    for (int ci = 0; ci < lay.c; ++ci) {
      const auto off = lay.offset(ni, ci);
      ArrayXs norm = (x->values().segment(off, lay.inner) - mean[ci]) * inv_std[ci];
      out->values().segment(off, lay.inner) = norm * gamma[ci] + beta[ci];
      if (track) xhat.segment(off, lay.inner) = norm;
    }

  if (track) {
    auto gamma_p = bn.gamma, beta_p = bn.beta;
    g.record("batch_norm", {x, gamma_p, beta_p}, out,
             [x, out, gamma_p, beta_p, lay, inv_std, training, count, xhat = std::move(xhat)] {
               const auto& dy = out->grad();
               const auto& gm = gamma_p->values();
               for (int ci = 0; ci < lay.c; ++ci) {
                 double sum_dy = 0, sum_dy_xhat = 0;
                 for (int ni = 0; ni < lay.n; ++ni) {
                   const auto off = lay.offset(ni, ci);
                   sum_dy += dy.segment(off, lay.inner).cast<double>().sum();
                   sum_dy_xhat += (dy.segment(off, lay.inner) * xhat.segment(off, lay.inner))
                                      .cast<double>()
                                      .sum();
                 }
                 if (gamma_p->requires_grad()) gamma_p->grad()[ci] += static_cast<Scalar>(sum_dy_xhat);
                 if (beta_p->requires_grad()) beta_p->grad()[ci] += static_cast<Scalar>(sum_dy);
                 if (!x->requires_grad()) continue;
                 auto& dx = x->grad();
                 const Scalar k = gm[ci] * inv_std[ci];
                 for (int ni = 0; ni < lay.n; ++ni) {
                   const auto off = lay.offset(ni, ci);
                   if (training) {
                     const auto mdy = static_cast<Scalar>(sum_dy / count);
                     const auto mdyx = static_cast<Scalar>(sum_dy_xhat / count);
                     dx.segment(off, lay.inner) +=
                         k * (dy.segment(off, lay.inner) - mdy - xhat.segment(off, lay.inner) * mdyx);
                   } else {
                     dx.segment(off, lay.inner) += k * dy.segment(off, lay.inner);
                   }
                 }
               }
             });
  }
  return out;
}

TensorPtr softmax_cross_entropy(Graph& g, const TensorPtr& logits, std::span<const int> labels) {
  require_rank(*logits, 2, "softmax_cross_entropy logits");
  const int n = logits->dim(0), k = logits->dim(1);
  if (labels.size() != static_cast<std::size_t>(n))
    throw DimensionError("softmax_cross_entropy: axis 0 (batch) has " + std::to_string(n) +
                         " rows but " + std::to_string(labels.size()) + " labels");
  ConstMatMap z(logits->values().data(), n, k);
  RowMatrixXs prob(n, k);
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) throw ContractError("softmax_cross_entropy: label out of range");
    const Scalar zmax = z.row(i).maxCoeff();
    prob.row(i) = (z.row(i).array() - zmax).exp().matrix();
    const Scalar denom = prob.row(i).sum();
    prob.row(i) /= denom;
    loss += std::log(static_cast<double>(denom)) - static_cast<double>(z(i, y) - zmax);
  }
  auto out = make_tensor({1}, {static_cast<Scalar>(loss / n)});
  if (g.needs_grad({logits.get()})) {
    std::vector<int> ys(labels.begin(), labels.end());
    g.record("softmax_cross_entropy", {logits}, out,
             [logits, out, prob = std::move(prob), ys = std::move(ys), n, k]() mutable {
               const Scalar scale = out->grad()[0] / static_cast<Scalar>(n);
               MatMap dz(logits->grad().data(), n, k);
               for (int i = 0; i < n; ++i) {
                 prob(i, ys[static_cast<std::size_t>(i)]) -= Scalar(1);
               }
               dz += prob * scale;
               for (int i = 0; i < n; ++i) prob(i, ys[static_cast<std::size_t>(i)]) += Scalar(1);
             });
  }
  return out;
}

}  // namespace qcnn
