// Elementwise, reduction and reshaping operations on Tensor<T>.
#pragma once

#include <cmath>
#include <cstdint>
#include <span>

#include "locseg/tensor.hpp"

namespace locseg {

/// Spatial axis of an N,C,D,H,W feature map.
enum class Axis : int { D = 0, H = 1, W = 2 };

inline const char* axis_name(Axis a) {
    switch (a) {
        case Axis::D: return "D";
        case Axis::H: return "H";
        case Axis::W: return "W";
    }
    return "?";
}

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

inline void require_5d(const Shape& s, const char* op) {
    require(s.size() == 5, std::string(op) + ": expected N,C,D,H,W tensor, got " + shape_str(s));
}

/// outer x extent x inner decomposition of a shape around `axis`.
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.extent = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
    const auto& xd = x.data();
    std::vector<T> out(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
    // Derivative is evaluated from (input, output) so sigmoid can reuse its output.
    auto saved_out = std::make_shared<std::vector<T>>();
    if (x.requires_grad() && grad_enabled()) *saved_out = out;
    return make_result<T>(x.shape(), std::move(out), {x}, [deriv, saved_out](Node<T>& self) {
        auto& p = *self.parents[0];
        auto& pg = p.ensure_grad();
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += self.grad[i] * deriv(p.data[i], (*saved_out)[i]);
    });
}

}  // namespace detail

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary(
        x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary(
        x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T alpha = T(0.01)) {
    return detail::unary(
        x, [alpha](T v) { return v > T(0) ? v : alpha * v; },
        [alpha](T v, T) { return v > T(0) ? T(1) : alpha; });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(),
                    "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            auto& pg = p->ensure_grad();
            for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(),
                    "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    double acc = 0.0;
    for (T v : x.data()) acc += static_cast<double>(v);
    return detail::make_result<T>(Shape{}, {static_cast<T>(acc)}, {x}, [](detail::Node<T>& self) {
        auto& p = *self.parents[0];
        auto& g = p.ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

/// Concatenates tensors that agree on every extent except `axis`.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    detail::require(!parts.empty(), "concat: no inputs");
    const Shape& s0 = parts[0].shape();
    detail::require(axis < s0.size(), "concat: axis out of range for " + shape_str(s0));
    Shape out_shape = s0;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
        detail::require(ok, "concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
        out_shape[axis] += s[axis];
    }
    const auto split = detail::split_at(out_shape, axis);
    std::vector<T> out(numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        const std::size_t chunk = p.shape()[axis] * split.inner;
        for (std::size_t o = 0; o < split.outer; ++o)
            std::copy_n(p.data().begin() + o * chunk, chunk,
                        out.begin() + (o * split.extent + offset) * split.inner);
        offset += p.shape()[axis];
    }
    return detail::make_result<T>(out_shape, std::move(out), parts,
                                  [split, offsets](detail::Node<T>& self) {
                                      for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                          auto& p = *self.parents[k];
                                          if (!p.requires_grad) continue;
                                          auto& g = p.ensure_grad();
                                          const std::size_t chunk = g.size() / split.outer;
                                          for (std::size_t o = 0; o < split.outer; ++o) {
                                              const T* src = self.grad.data() +
                                                             (o * split.extent + offsets[k]) * split.inner;
                                              T* dst = g.data() + o * chunk;
                                              for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                                          }
                                      }
                                  });
}

/// Contiguous range [start, start+length) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
    detail::require(axis < x.dim(), "slice: axis out of range for " + shape_str(x.shape()));
    detail::require(start + length <= x.shape()[axis], "slice: range exceeds extent of " + shape_str(x.shape()));
    const auto split = detail::split_at(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    std::vector<T> out(numel(out_shape));
    const std::size_t chunk = length * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o)
        std::copy_n(x.data().begin() + (o * split.extent + start) * split.inner, chunk, out.begin() + o * chunk);
    return detail::make_result<T>(out_shape, std::move(out), {x}, [split, start, chunk](detail::Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t o = 0; o < split.outer; ++o) {
            T* dst = g.data() + (o * split.extent + start) * split.inner;
            const T* src = self.grad.data() + o * chunk;
            for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
    });
}

/// Mean over the two spatial axes other than `keep`: [N,C,D,H,W] -> [N,C,L].
template <typename T>
Tensor<T> pool_avg_over_axes(const Tensor<T>& x, Axis keep) {
    detail::require_5d(x.shape(), "pool_avg_over_axes");
    const auto& s = x.shape();
    const std::size_t nc = s[0] * s[1], D = s[2], H = s[3], W = s[4];
    const std::size_t L = s[2 + static_cast<int>(keep)];
    const std::size_t spatial = D * H * W;
    const double inv = 1.0 / static_cast<double>(spatial / L);
    auto index_of = [keep](std::size_t d, std::size_t h, std::size_t w) {
        return keep == Axis::D ? d : keep == Axis::H ? h : w;
    };
    std::vector<T> out(nc * L);
    std::vector<double> acc(L);
    for (std::size_t b = 0; b < nc; ++b) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const T* xp = x.data().data() + b * spatial;
        for (std::size_t d = 0; d < D; ++d)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) acc[index_of(d, h, w)] += xp[(d * H + h) * W + w];
        for (std::size_t l = 0; l < L; ++l) out[b * L + l] = static_cast<T>(acc[l] * inv);
    }
    return detail::make_result<T>(Shape{s[0], s[1], L}, std::move(out), {x},
                                  [=](detail::Node<T>& self) {
                                      auto& g = self.parents[0]->ensure_grad();
                                      for (std::size_t b = 0; b < nc; ++b) {
                                          T* gp = g.data() + b * spatial;
                                          const T* op = self.grad.data() + b * L;
                                          for (std::size_t d = 0; d < D; ++d)
                                              for (std::size_t h = 0; h < H; ++h)
                                                  for (std::size_t w = 0; w < W; ++w)
                                                      gp[(d * H + h) * W + w] +=
                                                          static_cast<T>(op[index_of(d, h, w)] * inv);
                                      }
                                  });
}

/// Scales every (n, c) spatial slice at coordinate l along `axis` by gate[n, c, l].
template <typename T>
Tensor<T> broadcast_mul(const Tensor<T>& gate, const Tensor<T>& features, Axis axis) {
    detail::require_5d(features.shape(), "broadcast_mul");
    const auto& s = features.shape();
    const std::size_t L = s[2 + static_cast<int>(axis)];
    detail::require(gate.shape() == Shape{s[0], s[1], L},
                    "broadcast_mul: gate " + shape_str(gate.shape()) + " does not match features " + shape_str(s) +
                        " along axis " + axis_name(axis));
    const std::size_t nc = s[0] * s[1], D = s[2], H = s[3], W = s[4], spatial = D * H * W;
    auto index_of = [axis](std::size_t d, std::size_t h, std::size_t w) {
        return axis == Axis::D ? d : axis == Axis::H ? h : w;
    };
    std::vector<T> out(features.numel());
    for (std::size_t b = 0; b < nc; ++b) {
        const T* gp = gate.data().data() + b * L;
        const T* fp = features.data().data() + b * spatial;
        T* op = out.data() + b * spatial;
        for (std::size_t d = 0; d < D; ++d)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) {
                    const std::size_t i = (d * H + h) * W + w;
                    op[i] = gp[index_of(d, h, w)] * fp[i];
                }
    }
    return detail::make_result<T>(s, std::move(out), {gate, features}, [=](detail::Node<T>& self) {
        auto& pg = *self.parents[0];
        auto& pf = *self.parents[1];
        std::vector<T>* gg = pg.requires_grad ? &pg.ensure_grad() : nullptr;
        std::vector<T>* fg = pf.requires_grad ? &pf.ensure_grad() : nullptr;
        std::vector<double> acc(L);
        for (std::size_t b = 0; b < nc; ++b) {
            std::fill(acc.begin(), acc.end(), 0.0);
            const T* gp = pg.data.data() + b * L;
            const T* fp = pf.data.data() + b * spatial;
            const T* dp = self.grad.data() + b * spatial;
            for (std::size_t d = 0; d < D; ++d)
                for (std::size_t h = 0; h < H; ++h)
                    for (std::size_t w = 0; w < W; ++w) {
                        const std::size_t i = (d * H + h) * W + w;
                        const std::size_t l = index_of(d, h, w);
                        if (fg) (*fg)[b * spatial + i] += gp[l] * dp[i];
                        acc[l] += static_cast<double>(fp[i]) * dp[i];
                    }
            if (gg)
                for (std::size_t l = 0; l < L; ++l) (*gg)[b * L + l] += static_cast<T>(acc[l]);
        }
    });
}

/// y[n,c,...] = scale[c] * x[n,c,...] + shift[c].
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift) {
    detail::require(x.dim() >= 2, "channel_affine: expected at least N,C dims, got " + shape_str(x.shape()));
    const std::size_t N = x.size(0), C = x.size(1), inner = x.numel() / (N * C);
    detail::require(scale.shape() == Shape{C} && shift.shape() == Shape{C},
                    "channel_affine: scale/shift must have shape [" + std::to_string(C) + "]");
    std::vector<T> out(x.numel());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (n * C + c) * inner;
            for (std::size_t i = 0; i < inner; ++i)
                out[base + i] = scale.data()[c] * x.data()[base + i] + shift.data()[c];
        }
    return detail::make_result<T>(x.shape(), std::move(out), {x, scale, shift}, [=](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& ps = *self.parents[1];
        auto& pb = *self.parents[2];
        for (std::size_t c = 0; c < C; ++c) {
            double ds = 0.0, db = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t base = (n * C + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) {
                    const T g = self.grad[base + i];
                    ds += static_cast<double>(g) * px.data[base + i];
                    db += g;
                    if (px.requires_grad) px.ensure_grad()[base + i] += g * ps.data[c];
                }
            }
            if (ps.requires_grad) ps.ensure_grad()[c] += static_cast<T>(ds);
            if (pb.requires_grad) pb.ensure_grad()[c] += static_cast<T>(db);
        }
    });
}

/// Per-(sample, channel) normalization over all trailing dims followed by a
/// per-channel affine. Uses the biased variance.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    detail::require(x.dim() >= 3, "instance_norm: expected N,C,spatial... tensor, got " + shape_str(x.shape()));
    const std::size_t N = x.size(0), C = x.size(1), M = x.numel() / (N * C);
    detail::require(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
                    "instance_norm: gamma/beta must have shape [" + std::to_string(C) + "]");
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(N * C);
    std::vector<T> out(x.numel());
    for (std::size_t b = 0; b < N * C; ++b) {
        const T* xp = x.data().data() + b * M;
        double mean = 0.0;
        for (std::size_t i = 0; i < M; ++i) mean += xp[i];
        mean /= static_cast<double>(M);
        double var = 0.0;
        for (std::size_t i = 0; i < M; ++i) {
            const double d = xp[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(M);
        const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
        (*inv_std)[b] = is;
        const std::size_t c = b % C;
        for (std::size_t i = 0; i < M; ++i) {
            const T h = static_cast<T>((xp[i] - mean) * is);
            (*xhat)[b * M + i] = h;
            out[b * M + i] = gamma.data()[c] * h + beta.data()[c];
        }
    }
    return detail::make_result<T>(x.shape(), std::move(out), {x, gamma, beta}, [=](detail::Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pgam = *self.parents[1];
        auto& pbet = *self.parents[2];
        std::vector<double> dgamma(C, 0.0), dbeta(C, 0.0);
        for (std::size_t b = 0; b < N * C; ++b) {
            const std::size_t c = b % C;
            const T* dy = self.grad.data() + b * M;
            const T* h = xhat->data() + b * M;
            double sum_dy = 0.0, sum_dy_h = 0.0;
            for (std::size_t i = 0; i < M; ++i) {
                sum_dy += dy[i];
                sum_dy_h += static_cast<double>(dy[i]) * h[i];
            }
            dgamma[c] += sum_dy_h;
            dbeta[c] += sum_dy;
            if (px.requires_grad) {
                auto& g = px.ensure_grad();
                const double gm = pgam.data[c];
                const double k = gm * (*inv_std)[b] / static_cast<double>(M);
                for (std::size_t i = 0; i < M; ++i)
                    g[b * M + i] +=
                        static_cast<T>(k * (static_cast<double>(M) * dy[i] - sum_dy - h[i] * sum_dy_h));
            }
        }
        if (pgam.requires_grad)
            for (std::size_t c = 0; c < C; ++c) pgam.ensure_grad()[c] += static_cast<T>(dgamma[c]);
        if (pbet.requires_grad)
            for (std::size_t c = 0; c < C; ++c) pbet.ensure_grad()[c] += static_cast<T>(dbeta[c]);
    });
}

/// 2x2x2 max pooling with stride 2; odd trailing slices are dropped.
template <typename T>
Tensor<T> max_pool3d(const Tensor<T>& x) {
    detail::require_5d(x.shape(), "max_pool3d");
    const auto& s = x.shape();
    const std::size_t D = s[2], H = s[3], W = s[4];
    detail::require(D >= 2 && H >= 2 && W >= 2, "max_pool3d: extents must be >= 2, got " + shape_str(s));
    const std::size_t OD = D / 2, OH = H / 2, OW = W / 2, nc = s[0] * s[1];
    std::vector<T> out(nc * OD * OH * OW);
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    for (std::size_t b = 0; b < nc; ++b) {
        const std::size_t in_base = b * D * H * W;
        for (std::size_t od = 0; od < OD; ++od)
            for (std::size_t oh = 0; oh < OH; ++oh)
                for (std::size_t ow = 0; ow < OW; ++ow) {
                    std::size_t best = in_base + ((2 * od) * H + 2 * oh) * W + 2 * ow;
                    for (std::size_t a = 0; a < 2; ++a)
                        for (std::size_t c = 0; c < 2; ++c)
                            for (std::size_t e = 0; e < 2; ++e) {
                                const std::size_t idx = in_base + ((2 * od + a) * H + 2 * oh + c) * W + 2 * ow + e;
                                if (x.data()[idx] > x.data()[best]) best = idx;
                            }
                    const std::size_t o = ((b * OD + od) * OH + oh) * OW + ow;
                    out[o] = x.data()[best];
                    (*argmax)[o] = best;
                }
    }
    return detail::make_result<T>(Shape{s[0], s[1], OD, OH, OW}, std::move(out), {x},
                                  [argmax](detail::Node<T>& self) {
                                      auto& g = self.parents[0]->ensure_grad();
                                      for (std::size_t o = 0; o < argmax->size(); ++o) g[(*argmax)[o]] += self.grad[o];
                                  });
}

}  // namespace locseg
