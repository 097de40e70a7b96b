#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <vector>

#include "locseg/postprocess.hpp"
#include "locseg/tensor.hpp"

namespace locseg::test {

template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(shape, std::move(v), requires_grad);
}

/// Values bounded away from zero so piecewise-linear ops are smooth under
/// finite-difference perturbation.
template <typename T>
Tensor<T> random_tensor_off_kink(const Shape& shape, std::mt19937_64& rng, double margin = 0.05) {
    std::uniform_real_distribution<double> mag(margin, 1.0);
    std::bernoulli_distribution sign(0.5);
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(sign(rng) ? mag(rng) : -mag(rng));
    return Tensor<T>(shape, std::move(v));
}

inline std::vector<double> iota_values(std::size_t n) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<double>(i);
    return v;
}

/// Six-nested-loop (per output, per tap) convolution reference.
template <typename T>
std::vector<double> conv3d_reference(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                                     std::array<std::size_t, 3> stride, std::array<std::size_t, 3> pad) {
    const auto& s = x.shape();
    const auto& ws = w.shape();
    const std::size_t N = s[0], C = s[1], D = s[2], H = s[3], W = s[4];
    const std::size_t Co = ws[0], kd = ws[2], kh = ws[3], kw = ws[4];
    const std::size_t OD = (D + 2 * pad[0] - kd) / stride[0] + 1;
    const std::size_t OH = (H + 2 * pad[1] - kh) / stride[1] + 1;
    const std::size_t OW = (W + 2 * pad[2] - kw) / stride[2] + 1;
    std::vector<double> out(N * Co * OD * OH * OW);
    auto X = [&](std::size_t n, std::size_t c, long d, long h, long ww) -> double {
        if (d < 0 || h < 0 || ww < 0 || d >= long(D) || h >= long(H) || ww >= long(W)) return 0.0;
        return x.data()[(((n * C + c) * D + d) * H + h) * W + ww];
    };
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Co; ++co)
            for (std::size_t od = 0; od < OD; ++od)
                for (std::size_t oh = 0; oh < OH; ++oh)
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                        double acc = b.data()[co];
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t a = 0; a < kd; ++a)
                                for (std::size_t e = 0; e < kh; ++e)
                                    for (std::size_t f = 0; f < kw; ++f)
                                        acc += X(n, c, long(od * stride[0] + a) - long(pad[0]),
                                                 long(oh * stride[1] + e) - long(pad[1]),
                                                 long(ow * stride[2] + f) - long(pad[2])) *
                                               w.data()[(((co * C + c) * kd + a) * kh + e) * kw + f];
                        out[(((n * Co + co) * OD + od) * OH + oh) * OW + ow] = acc;
                    }
    return out;
}

// Union-find over all voxel pairs; shares no code with the flood fill.
inline std::vector<std::uint32_t> components_oracle(const std::vector<std::uint8_t>& m, const Index3& s, int connectivity) {
    const std::size_t n = m.size();
    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    auto coord = [&](std::size_t i) {
        return std::array<long, 3>{long(i / (s[1] * s[2])), long(i / s[2] % s[1]), long(i % s[2])};
    };
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            if (!m[i] || !m[j]) continue;
            const auto a = coord(i), b = coord(j);
            long cheb = 0, manh = 0;
            for (int k = 0; k < 3; ++k) {
                cheb = std::max(cheb, std::abs(a[k] - b[k]));
                manh += std::abs(a[k] - b[k]);
            }
            if (cheb == 1 && (connectivity == 26 || manh == 1)) parent[find(i)] = find(j);
        }
    // Number components by their first voxel in scan order.
    std::vector<std::uint32_t> out(n, 0);
    std::map<std::size_t, std::uint32_t> ids;
    for (std::size_t i = 0; i < n; ++i)
        if (m[i]) {
            auto [it, fresh] = ids.try_emplace(find(i), std::uint32_t(ids.size() + 1));
            out[i] = it->second;
        }
    return out;
}

inline std::vector<std::uint8_t> dilate_oracle(const std::vector<std::uint8_t>& m, const Index3& s, long r) {
    std::vector<std::uint8_t> out(m.size(), 0);
    for (long d = 0; d < long(s[0]); ++d)
        for (long h = 0; h < long(s[1]); ++h)
            for (long w = 0; w < long(s[2]); ++w)
                for (long a = std::max(0L, d - r); a <= std::min(long(s[0]) - 1, d + r); ++a)
                    for (long b = std::max(0L, h - r); b <= std::min(long(s[1]) - 1, h + r); ++b)
                        for (long c = std::max(0L, w - r); c <= std::min(long(s[2]) - 1, w + r); ++c)
                            if (m[(a * s[1] + b) * s[2] + c]) out[(d * s[1] + h) * s[2] + w] = 1;
    return out;
}

// Independent counting oracle: tallies set sizes with std::count.
inline double dice_oracle(const Labelmap& p, const Labelmap& r, std::uint8_t k) {
    const auto np = std::count(p.begin(), p.end(), k), nr = std::count(r.begin(), r.end(), k);
    std::size_t both = 0;
    for (std::size_t i = 0; i < p.size(); ++i) both += (p[i] == k) & (r[i] == k);
    if (np + nr == 0) return 1.0;
    return double(2 * both) / double(np + nr);
}

// 8^3 fixture: the atlas knows class 1 only at the centre voxel (3,3,3).
// The reference is the radius-2 cube around it; the prediction adds a false
// positive in the far corner. Radius 1 cuts true positives, radius 2 keeps
// them all and drops the corner, radius >= 4 readmits the corner.
struct DilationFixture {
    Index3 shape{8, 8, 8};
    Atlas atlas;
    Labelmap reference, prediction;

    DilationFixture() {
        atlas.shape = shape;
        atlas.probability.assign(2, std::vector<float>(512, 0.0f));
        atlas.probability[1][(3 * 8 + 3) * 8 + 3] = 1.0f;
        reference.assign(512, 0);
        for (std::size_t d = 1; d <= 5; ++d)
            for (std::size_t h = 1; h <= 5; ++h)
                for (std::size_t w = 1; w <= 5; ++w) reference[(d * 8 + h) * 8 + w] = 1;
        prediction = reference;
        prediction[511] = 1;
    }
};

}  // namespace locseg::test
