// Convolutions: conv3d / conv1d via im2col + GEMM, and the stride-2
// transposed convolution used for decoder upsampling.
#pragma once

#include <array>

#include <Eigen/Core>

#include "locseg/ops.hpp"

namespace locseg {

using Triple = std::array<std::size_t, 3>;

namespace detail {

/// Sequential sum. Eigen's vectorized reductions depend on pointer alignment,
/// which would make gradients vary with allocation addresses.
template <typename T>
T ordered_sum(const T* p, std::size_t n) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += p[i];
    return acc;
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
    std::size_t N, C, D, H, W;
    std::size_t Cout;
    Triple k, stride, pad;
    std::size_t OD, OH, OW;

    std::size_t in_spatial() const { return D * H * W; }
    std::size_t out_spatial() const { return OD * OH * OW; }
    std::size_t col_rows() const { return C * k[0] * k[1] * k[2]; }
    bool pointwise() const {
        return k == Triple{1, 1, 1} && stride == Triple{1, 1, 1} && pad == Triple{0, 0, 0};
    }
};

inline ConvGeometry conv_geometry(const Shape& in, const Shape& w, std::size_t bias_len, const Triple& stride,
                                  const Triple& pad, const char* op) {
    require(in.size() == 5 && w.size() == 5,
            std::string(op) + ": bad ranks, input " + shape_str(in) + ", weight " + shape_str(w));
    require(stride[0] >= 1 && stride[1] >= 1 && stride[2] >= 1, std::string(op) + ": stride must be >= 1");
    require(w[1] == in[1], std::string(op) + ": weight expects " + std::to_string(w[1]) + " input channels, input " +
                               shape_str(in) + " has " + std::to_string(in[1]));
    require(bias_len == w[0], std::string(op) + ": bias length " + std::to_string(bias_len) +
                                  " does not match output channels " + std::to_string(w[0]));
    ConvGeometry g{in[0], in[1], in[2], in[3], in[4], w[0], {w[2], w[3], w[4]}, stride, pad, 0, 0, 0};
    std::array<std::size_t, 3> out{};
    for (int a = 0; a < 3; ++a) {
        const std::size_t padded = in[2 + a] + 2 * pad[a];
        require(g.k[a] >= 1 && g.k[a] <= padded, std::string(op) + ": kernel " + shape_str(w) +
                                                     " does not fit padded input " + shape_str(in));
        out[a] = (padded - g.k[a]) / stride[a] + 1;
    }
    g.OD = out[0];
    g.OH = out[1];
    g.OW = out[2];
    return g;
}

/// col[(c,kd,kh,kw), (od,oh,ow)] = x[c, od*s-p+kd, ...] or 0 when out of bounds.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
    const std::size_t P = g.out_spatial();
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.C; ++c)
        for (std::size_t kd = 0; kd < g.k[0]; ++kd)
            for (std::size_t kh = 0; kh < g.k[1]; ++kh)
                for (std::size_t kw = 0; kw < g.k[2]; ++kw, ++row) {
                    T* dst = col + row * P;
                    for (std::size_t od = 0; od < g.OD; ++od) {
                        const std::ptrdiff_t id = static_cast<std::ptrdiff_t>(od * g.stride[0] + kd) -
                                                  static_cast<std::ptrdiff_t>(g.pad[0]);
                        for (std::size_t oh = 0; oh < g.OH; ++oh) {
                            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride[1] + kh) -
                                                      static_cast<std::ptrdiff_t>(g.pad[1]);
                            T* out_row = dst + (od * g.OH + oh) * g.OW;
                            if (id < 0 || id >= static_cast<std::ptrdiff_t>(g.D) || ih < 0 ||
                                ih >= static_cast<std::ptrdiff_t>(g.H)) {
                                std::fill_n(out_row, g.OW, T(0));
                                continue;
                            }
                            const T* in_row = x + ((c * g.D + id) * g.H + ih) * g.W;
                            for (std::size_t ow = 0; ow < g.OW; ++ow) {
                                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride[2] + kw) -
                                                          static_cast<std::ptrdiff_t>(g.pad[2]);
                                out_row[ow] =
                                    (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.W)) ? T(0) : in_row[iw];
                            }
                        }
                    }
                }
}

/// Adjoint of im2col: scatters col back into dx (accumulating).
template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* dx) {
    const std::size_t P = g.out_spatial();
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.C; ++c)
        for (std::size_t kd = 0; kd < g.k[0]; ++kd)
            for (std::size_t kh = 0; kh < g.k[1]; ++kh)
                for (std::size_t kw = 0; kw < g.k[2]; ++kw, ++row) {
                    const T* src = col + row * P;
                    for (std::size_t od = 0; od < g.OD; ++od) {
                        const std::ptrdiff_t id = static_cast<std::ptrdiff_t>(od * g.stride[0] + kd) -
                                                  static_cast<std::ptrdiff_t>(g.pad[0]);
                        if (id < 0 || id >= static_cast<std::ptrdiff_t>(g.D)) continue;
                        for (std::size_t oh = 0; oh < g.OH; ++oh) {
                            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride[1] + kh) -
                                                      static_cast<std::ptrdiff_t>(g.pad[1]);
                            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.H)) continue;
                            const T* in_row = src + (od * g.OH + oh) * g.OW;
                            T* out_row = dx + ((c * g.D + id) * g.H + ih) * g.W;
                            for (std::size_t ow = 0; ow < g.OW; ++ow) {
                                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride[2] + kw) -
                                                          static_cast<std::ptrdiff_t>(g.pad[2]);
                                if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.W)) out_row[iw] += in_row[ow];
                            }
                        }
                    }
                }
}

template <typename T>
std::vector<T> conv_forward(const ConvGeometry& g, const T* x, const T* w, const T* b) {
    const std::size_t K = g.col_rows(), P = g.out_spatial();
    std::vector<T> out(g.N * g.Cout * P);
    std::vector<T> col(g.pointwise() ? 0 : K * P);
    ConstMapMat<T> wm(w, g.Cout, K);
    for (std::size_t n = 0; n < g.N; ++n) {
        const T* xn = x + n * g.C * g.in_spatial();
        const T* colp = xn;
        if (!g.pointwise()) {
            im2col(g, xn, col.data());
            colp = col.data();
        }
        MapMat<T> yn(out.data() + n * g.Cout * P, g.Cout, P);
        yn.noalias() = wm * ConstMapMat<T>(colp, K, P);
        for (std::size_t co = 0; co < g.Cout; ++co) yn.row(co).array() += b[co];
    }
    return out;
}

template <typename T>
void conv_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw, T* db) {
    const std::size_t K = g.col_rows(), P = g.out_spatial();
    std::vector<T> col(g.pointwise() ? 0 : K * P);
    std::vector<T> dcol(dx && !g.pointwise() ? K * P : 0);
    ConstMapMat<T> wm(w, g.Cout, K);
    for (std::size_t n = 0; n < g.N; ++n) {
        ConstMapMat<T> dyn(dy + n * g.Cout * P, g.Cout, P);
        const T* xn = x + n * g.C * g.in_spatial();
        if (dw) {
            const T* colp = xn;
            if (!g.pointwise()) {
                im2col(g, xn, col.data());
                colp = col.data();
            }
            MapMat<T>(dw, g.Cout, K).noalias() += dyn * ConstMapMat<T>(colp, K, P).transpose();
        }
        if (db)
            for (std::size_t co = 0; co < g.Cout; ++co) db[co] += ordered_sum(dy + (n * g.Cout + co) * P, P);
        if (dx) {
            T* dxn = dx + n * g.C * g.in_spatial();
            if (g.pointwise()) {
                MapMat<T>(dxn, K, P).noalias() += wm.transpose() * dyn;
            } else {
                MapMat<T>(dcol.data(), K, P).noalias() = wm.transpose() * dyn;
                col2im(g, dcol.data(), dxn);
            }
        }
    }
}

template <typename T>
Tensor<T> conv_op(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, const ConvGeometry& g,
                  Shape out_shape) {
    auto out = conv_forward(g, input.data().data(), weight.data().data(), bias.data().data());
    return make_result<T>(std::move(out_shape), std::move(out), {input, weight, bias}, [g](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        conv_backward(g, px.data.data(), pw.data.data(), self.grad.data(),
                      px.requires_grad ? px.ensure_grad().data() : nullptr,
                      pw.requires_grad ? pw.ensure_grad().data() : nullptr,
                      pb.requires_grad ? pb.ensure_grad().data() : nullptr);
    });
}

}  // namespace detail

/// input [N,C,D,H,W], weight [Cout,C,kd,kh,kw], bias [Cout] -> [N,Cout,D',H',W'].
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, Triple stride = {1, 1, 1},
                 Triple padding = {0, 0, 0}) {
    detail::require(bias.dim() == 1, "conv3d: bias must be 1-D, got " + shape_str(bias.shape()));
    const auto g = detail::conv_geometry(input.shape(), weight.shape(), bias.size(0), stride, padding, "conv3d");
    return detail::conv_op(input, weight, bias, g, Shape{g.N, g.Cout, g.OD, g.OH, g.OW});
}

/// input [N,C,L], weight [Cout,C,k], bias [Cout] -> [N,Cout,L'].
template <typename T>
Tensor<T> conv1d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride = 1,
                 std::size_t padding = 0) {
    detail::require(input.dim() == 3 && weight.dim() == 3,
                    "conv1d: bad ranks, input " + shape_str(input.shape()) + ", weight " + shape_str(weight.shape()));
    detail::require(bias.dim() == 1, "conv1d: bias must be 1-D, got " + shape_str(bias.shape()));
    const Shape& in = input.shape();
    const Shape& w = weight.shape();
    const auto g = detail::conv_geometry(Shape{in[0], in[1], 1, 1, in[2]}, Shape{w[0], w[1], 1, 1, w[2]},
                                         bias.size(0), {1, 1, stride}, {0, 0, padding}, "conv1d");
    return detail::conv_op(input, weight, bias, g, Shape{g.N, g.Cout, g.OW});
}

/// Transposed convolution with kernel 2, stride 2: input [N,Cin,D,H,W],
/// weight [Cin,Cout,2,2,2], bias [Cout] -> [N,Cout,2D,2H,2W].
template <typename T>
Tensor<T> up_conv3d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
    detail::require_5d(input.shape(), "up_conv3d");
    const Shape& s = input.shape();
    const Shape& ws = weight.shape();
    detail::require(ws.size() == 5 && ws[0] == s[1] && ws[2] == 2 && ws[3] == 2 && ws[4] == 2,
                    "up_conv3d: weight " + shape_str(ws) + " incompatible with input " + shape_str(s));
    const std::size_t N = s[0], Cin = s[1], D = s[2], H = s[3], W = s[4], Cout = ws[1];
    detail::require(bias.shape() == Shape{Cout}, "up_conv3d: bias must have shape [" + std::to_string(Cout) + "]");
    const std::size_t P = D * H * W, OH = 2 * H, OW = 2 * W, OP = 8 * P;

    // tmp[(co,a,b,c), p] = sum_ci w[ci,(co,a,b,c)] x[ci,p]
    auto scatter_index = [=](std::size_t co, std::size_t r, std::size_t p) {
        const std::size_t a = r >> 2, b = (r >> 1) & 1, c = r & 1;
        const std::size_t d = p / (H * W), h = (p / W) % H, w = p % W;
        return co * OP + ((2 * d + a) * OH + 2 * h + b) * OW + 2 * w + c;
    };
    std::vector<T> out(N * Cout * OP);
    detail::RowMat<T> tmp(Cout * 8, P);
    detail::ConstMapMat<T> wm(weight.data().data(), Cin, Cout * 8);
    for (std::size_t n = 0; n < N; ++n) {
        tmp.noalias() = wm.transpose() * detail::ConstMapMat<T>(input.data().data() + n * Cin * P, Cin, P);
        T* on = out.data() + n * Cout * OP;
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t r = 0; r < 8; ++r)
                for (std::size_t p = 0; p < P; ++p)
                    on[scatter_index(co, r, p)] = tmp(co * 8 + r, p) + bias.data()[co];
    }
    return detail::make_result<T>(Shape{N, Cout, 2 * D, 2 * H, 2 * W}, std::move(out), {input, weight, bias},
                                  [=](detail::Node<T>& self) {
                                      auto& px = *self.parents[0];
                                      auto& pw = *self.parents[1];
                                      auto& pb = *self.parents[2];
                                      detail::RowMat<T> dtmp(Cout * 8, P);
                                      detail::ConstMapMat<T> wmb(pw.data.data(), Cin, Cout * 8);
                                      for (std::size_t n = 0; n < N; ++n) {
                                          const T* dy = self.grad.data() + n * Cout * OP;
                                          for (std::size_t co = 0; co < Cout; ++co)
                                              for (std::size_t r = 0; r < 8; ++r)
                                                  for (std::size_t p = 0; p < P; ++p)
                                                      dtmp(co * 8 + r, p) = dy[scatter_index(co, r, p)];
                                          detail::ConstMapMat<T> xn(px.data.data() + n * Cin * P, Cin, P);
                                          if (px.requires_grad)
                                              detail::MapMat<T>(px.ensure_grad().data() + n * Cin * P, Cin, P)
                                                  .noalias() += wmb * dtmp;
                                          if (pw.requires_grad)
                                              detail::MapMat<T>(pw.ensure_grad().data(), Cin, Cout * 8).noalias() +=
                                                  xn * dtmp.transpose();
                                          if (pb.requires_grad) {
                                              auto& gb = pb.ensure_grad();
                                              for (std::size_t co = 0; co < Cout; ++co)
                                                  gb[co] += detail::ordered_sum(dtmp.data() + co * 8 * P, 8 * P);
                                          }
                                      }
                                  });
}

}  // namespace locseg
