#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "marrowcast/error.hpp"
#include "marrowcast/tensor.hpp"

namespace marrowcast {

// ---------------------------------------------------------------------------
// conv2d: 3x3 kernel, stride 1, zero "same" padding.
//
// The accumulation order per output element is bias first, then terms in
// (c_in, ky, kx) order with out-of-bounds terms skipped, which is exactly what
// a naive nested-loop implementation does — the loop structure below only
// reorders work across output elements, so results are bit-identical to the
// reference (the build disables FP contraction for the same reason).
// ---------------------------------------------------------------------------

template <typename T>
inline void conv2d_check(const tensor4<T>& x, const tensor4<T>& k, const std::vector<T>& bias) {
    if (k.h != 3 || k.w != 3) {
        throw shape_error("conv2d: kernel must be 3x3, got " + k.shape_str());
    }
    if (k.c != x.c) {
        throw shape_error("conv2d: kernel expects " + std::to_string(k.c) +
                          " input channels, tensor has " + std::to_string(x.c));
    }
    if (bias.size() != static_cast<std::size_t>(k.n)) {
        throw shape_error("conv2d: bias length " + std::to_string(bias.size()) +
                          " != output channels " + std::to_string(k.n));
    }
}

template <typename T>
tensor4<T> conv2d(const tensor4<T>& x, const tensor4<T>& k, const std::vector<T>& bias) {
    conv2d_check(x, k, bias);
    const int h = x.h, w = x.w;
    tensor4<T> y(x.n, k.n, h, w);
    for (int ni = 0; ni < x.n; ++ni) {
        for (int co = 0; co < k.n; ++co) {
            T* yp = y.plane(ni, co);
            const T b = bias[static_cast<std::size_t>(co)];
            for (int i = 0; i < h * w; ++i) yp[i] = b;
            for (int ci = 0; ci < x.c; ++ci) {
                const T* xp = x.plane(ni, ci);
                for (int ky = 0; ky < 3; ++ky) {
                    const int y_lo = std::max(0, 1 - ky);
                    const int y_hi = std::min(h, h + 1 - ky);
                    for (int kx = 0; kx < 3; ++kx) {
                        const T wgt = k.at(co, ci, ky, kx);
                        const int x_lo = std::max(0, 1 - kx);
                        const int x_hi = std::min(w, w + 1 - kx);
                        for (int yy = y_lo; yy < y_hi; ++yy) {
                            T* orow = yp + static_cast<std::size_t>(yy) * w;
                            const T* irow = xp + static_cast<std::size_t>(yy + ky - 1) * w + (kx - 1);
                            for (int xx = x_lo; xx < x_hi; ++xx) {
                                orow[xx] += wgt * irow[xx];
                            }
                        }
                    }
                }
            }
        }
    }
    return y;
}

template <typename T>
struct conv2d_grads {
    tensor4<T> gx;
    tensor4<T> gk;
    std::vector<T> gb;
};

template <typename T>
conv2d_grads<T> conv2d_backward(const tensor4<T>& x, const tensor4<T>& k, const tensor4<T>& gy) {
    if (gy.n != x.n || gy.c != k.n || gy.h != x.h || gy.w != x.w) {
        throw shape_error("conv2d_backward: upstream gradient shape " + gy.shape_str() +
                          " does not match forward output");
    }
    const int h = x.h, w = x.w;
    conv2d_grads<T> g{tensor4<T>(x.n, x.c, h, w), tensor4<T>(k.n, k.c, 3, 3),
                      std::vector<T>(static_cast<std::size_t>(k.n), T(0))};
    for (int ni = 0; ni < x.n; ++ni) {
        for (int co = 0; co < k.n; ++co) {
            const T* gp = gy.plane(ni, co);
            double b_acc = 0.0;
            for (int i = 0; i < h * w; ++i) b_acc += static_cast<double>(gp[i]);
            g.gb[static_cast<std::size_t>(co)] += static_cast<T>(b_acc);
            for (int ci = 0; ci < x.c; ++ci) {
                T* gxp = g.gx.plane(ni, ci);
                const T* xp = x.plane(ni, ci);
                for (int ky = 0; ky < 3; ++ky) {
                    const int y_lo = std::max(0, 1 - ky);
                    const int y_hi = std::min(h, h + 1 - ky);
                    for (int kx = 0; kx < 3; ++kx) {
                        const T wgt = k.at(co, ci, ky, kx);
                        const int x_lo = std::max(0, 1 - kx);
                        const int x_hi = std::min(w, w + 1 - kx);
                        double k_acc0 = 0.0, k_acc1 = 0.0;
                        for (int yy = y_lo; yy < y_hi; ++yy) {
                            const T* grow = gp + static_cast<std::size_t>(yy) * w;
                            T* gxrow = gxp + static_cast<std::size_t>(yy + ky - 1) * w + (kx - 1);
                            const T* xrow = xp + static_cast<std::size_t>(yy + ky - 1) * w + (kx - 1);
                            int xx = x_lo;
                            for (; xx + 1 < x_hi; xx += 2) {
                                gxrow[xx] += wgt * grow[xx];
                                gxrow[xx + 1] += wgt * grow[xx + 1];
                                k_acc0 += static_cast<double>(grow[xx]) * xrow[xx];
                                k_acc1 += static_cast<double>(grow[xx + 1]) * xrow[xx + 1];
                            }
                            for (; xx < x_hi; ++xx) {
                                gxrow[xx] += wgt * grow[xx];
                                k_acc0 += static_cast<double>(grow[xx]) * xrow[xx];
                            }
                        }
                        g.gk.at(co, ci, ky, kx) += static_cast<T>(k_acc0 + k_acc1);
                    }
                }
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Pointwise activations. Backward passes take the forward *output*, which is
// enough to recover the derivative for both.
// ---------------------------------------------------------------------------

template <typename T>
tensor4<T> elu(const tensor4<T>& x) {
    tensor4<T> y = x;
    for (T& v : y.data) {
        if (v < T(0)) v = static_cast<T>(std::expm1(static_cast<double>(v)));
    }
    return y;
}

template <typename T>
tensor4<T> elu_backward(const tensor4<T>& y, const tensor4<T>& gy) {
    if (!y.same_shape(gy)) {
        throw shape_error("elu_backward: shape mismatch");
    }
    tensor4<T> gx = gy;
    for (std::size_t i = 0; i < y.data.size(); ++i) {
        if (y.data[i] <= T(0)) gx.data[i] *= y.data[i] + T(1);
    }
    return gx;
}

template <typename T>
tensor4<T> sigmoid(const tensor4<T>& x) {
    tensor4<T> y = x;
    for (T& v : y.data) {
        const double d = static_cast<double>(v);
        if (d >= 0.0) {
            v = static_cast<T>(1.0 / (1.0 + std::exp(-d)));
        } else {
            const double e = std::exp(d);
            v = static_cast<T>(e / (1.0 + e));
        }
    }
    return y;
}

template <typename T>
tensor4<T> sigmoid_backward(const tensor4<T>& y, const tensor4<T>& gy) {
    if (!y.same_shape(gy)) {
        throw shape_error("sigmoid_backward: shape mismatch");
    }
    tensor4<T> gx = gy;
    for (std::size_t i = 0; i < y.data.size(); ++i) {
        gx.data[i] *= y.data[i] * (T(1) - y.data[i]);
    }
    return gx;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2. Ties route the gradient to the first maximal
// element in scan order ((0,0),(0,1),(1,0),(1,1)).
// ---------------------------------------------------------------------------

template <typename T>
struct pool2_result {
    tensor4<T> y;
    std::vector<std::uint32_t> argmax; // flat index into the pooled input
};

template <typename T>
pool2_result<T> max_pool2(const tensor4<T>& x) {
    if (x.h % 2 != 0 || x.w % 2 != 0) {
        throw shape_error("max_pool2: spatial dims must be even, got " + x.shape_str());
    }
    pool2_result<T> r{tensor4<T>(x.n, x.c, x.h / 2, x.w / 2), {}};
    r.argmax.resize(r.y.size());
    std::size_t o = 0;
    for (int ni = 0; ni < x.n; ++ni) {
        for (int ci = 0; ci < x.c; ++ci) {
            for (int yy = 0; yy < x.h; yy += 2) {
                for (int xx = 0; xx < x.w; xx += 2, ++o) {
                    std::size_t best = x.index(ni, ci, yy, xx);
                    T best_v = x.data[best];
                    const std::size_t cands[3] = {x.index(ni, ci, yy, xx + 1),
                                                  x.index(ni, ci, yy + 1, xx),
                                                  x.index(ni, ci, yy + 1, xx + 1)};
                    for (std::size_t cand : cands) {
                        if (x.data[cand] > best_v) {
                            best = cand;
                            best_v = x.data[cand];
                        }
                    }
                    r.y.data[o] = best_v;
                    r.argmax[o] = static_cast<std::uint32_t>(best);
                }
            }
        }
    }
    return r;
}

template <typename T>
tensor4<T> max_pool2_backward(const tensor4<T>& x, const std::vector<std::uint32_t>& argmax,
                              const tensor4<T>& gy) {
    if (gy.size() != argmax.size()) {
        throw shape_error("max_pool2_backward: gradient/argmax size mismatch");
    }
    tensor4<T> gx(x.n, x.c, x.h, x.w);
    for (std::size_t o = 0; o < argmax.size(); ++o) {
        gx.data[argmax[o]] += gy.data[o];
    }
    return gx;
}

// Nearest-neighbor 2x upsampling; the adjoint sums each 2x2 block.
template <typename T>
tensor4<T> upsample2(const tensor4<T>& x) {
    tensor4<T> y(x.n, x.c, x.h * 2, x.w * 2);
    for (int ni = 0; ni < x.n; ++ni) {
        for (int ci = 0; ci < x.c; ++ci) {
            const T* xp = x.plane(ni, ci);
            T* yp = y.plane(ni, ci);
            for (int yy = 0; yy < y.h; ++yy) {
                const T* xrow = xp + static_cast<std::size_t>(yy / 2) * x.w;
                T* yrow = yp + static_cast<std::size_t>(yy) * y.w;
                for (int xx = 0; xx < y.w; ++xx) {
                    yrow[xx] = xrow[xx / 2];
                }
            }
        }
    }
    return y;
}

template <typename T>
tensor4<T> upsample2_backward(const tensor4<T>& gy) {
    if (gy.h % 2 != 0 || gy.w % 2 != 0) {
        throw shape_error("upsample2_backward: gradient dims must be even");
    }
    tensor4<T> gx(gy.n, gy.c, gy.h / 2, gy.w / 2);
    for (int ni = 0; ni < gy.n; ++ni) {
        for (int ci = 0; ci < gy.c; ++ci) {
            const T* gp = gy.plane(ni, ci);
            T* xp = gx.plane(ni, ci);
            for (int yy = 0; yy < gy.h; ++yy) {
                const T* grow = gp + static_cast<std::size_t>(yy) * gy.w;
                T* xrow = xp + static_cast<std::size_t>(yy / 2) * gx.w;
                for (int xx = 0; xx < gy.w; ++xx) {
                    xrow[xx / 2] += grow[xx];
                }
            }
        }
    }
    return gx;
}

// ---------------------------------------------------------------------------
// Channel concatenation [a; b] with exact gradient splitting.
// ---------------------------------------------------------------------------

template <typename T>
tensor4<T> concat_channels(const tensor4<T>& a, const tensor4<T>& b) {
    if (a.n != b.n || a.h != b.h || a.w != b.w) {
        throw shape_error("concat_channels: " + a.shape_str() + " vs " + b.shape_str());
    }
    tensor4<T> y(a.n, a.c + b.c, a.h, a.w);
    const std::size_t plane = static_cast<std::size_t>(a.h) * a.w;
    for (int ni = 0; ni < a.n; ++ni) {
        std::copy_n(a.data.begin() + static_cast<std::ptrdiff_t>(ni * a.c * plane),
                    static_cast<std::size_t>(a.c) * plane,
                    y.data.begin() + static_cast<std::ptrdiff_t>(ni * y.c * plane));
        std::copy_n(b.data.begin() + static_cast<std::ptrdiff_t>(ni * b.c * plane),
                    static_cast<std::size_t>(b.c) * plane,
                    y.data.begin() + static_cast<std::ptrdiff_t>((ni * y.c + a.c) * plane));
    }
    return y;
}

template <typename T>
std::pair<tensor4<T>, tensor4<T>> concat_channels_backward(int c_a, int c_b, const tensor4<T>& gy) {
    if (gy.c != c_a + c_b) {
        throw shape_error("concat_channels_backward: channel split mismatch");
    }
    tensor4<T> ga(gy.n, c_a, gy.h, gy.w), gb(gy.n, c_b, gy.h, gy.w);
    const std::size_t plane = static_cast<std::size_t>(gy.h) * gy.w;
    for (int ni = 0; ni < gy.n; ++ni) {
        std::copy_n(gy.data.begin() + static_cast<std::ptrdiff_t>(ni * gy.c * plane),
                    static_cast<std::size_t>(c_a) * plane,
                    ga.data.begin() + static_cast<std::ptrdiff_t>(ni * c_a * plane));
        std::copy_n(gy.data.begin() + static_cast<std::ptrdiff_t>((ni * gy.c + c_a) * plane),
                    static_cast<std::size_t>(c_b) * plane,
                    gb.data.begin() + static_cast<std::ptrdiff_t>(ni * c_b * plane));
    }
    return {std::move(ga), std::move(gb)};
}

// ---------------------------------------------------------------------------
// Losses. Predictions are clamped to [eps, 1-eps]; the gradient is zero where
// the clamp is active. Targets may be soft values in [0, 1].
// ---------------------------------------------------------------------------

inline constexpr double loss_eps = 1e-7;

template <typename T>
struct loss_result {
    double value = 0.0;
    tensor4<T> grad; // d(loss)/d(p)
};

template <typename T>
loss_result<T> weighted_bce_loss(const tensor4<T>& p, const tensor4<T>& y, double w_pos) {
    if (!p.same_shape(y)) {
        throw shape_error("weighted_bce_loss: prediction " + p.shape_str() + " vs target " +
                          y.shape_str());
    }
    if (!std::isfinite(w_pos) || w_pos < 0.0) {
        throw config_error("weighted_bce_loss: w_pos must be finite and >= 0");
    }
    if (p.size() == 0) {
        throw degenerate_input_error("weighted_bce_loss: empty tensors");
    }
    loss_result<T> r;
    r.grad = tensor4<T>(p.n, p.c, p.h, p.w);
    const double inv_n = 1.0 / static_cast<double>(p.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
        const double pi = static_cast<double>(p.data[i]);
        const double yi = static_cast<double>(y.data[i]);
        const double pc = std::clamp(pi, loss_eps, 1.0 - loss_eps);
        acc -= w_pos * yi * std::log(pc) + (1.0 - yi) * std::log(1.0 - pc);
        if (pi > loss_eps && pi < 1.0 - loss_eps) {
            r.grad.data[i] =
                static_cast<T>(-(w_pos * yi / pc - (1.0 - yi) / (1.0 - pc)) * inv_n);
        }
    }
    r.value = acc * inv_n;
    return r;
}

template <typename T>
loss_result<T> bce_loss(const tensor4<T>& p, const tensor4<T>& y) {
    return weighted_bce_loss(p, y, 1.0);
}

// ---------------------------------------------------------------------------
// Adam. Moments are kept in double regardless of the parameter type so that
// long runs stay well-conditioned; updates are computed in double and cast.
// ---------------------------------------------------------------------------

struct adam_config {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct adam_state {
    adam_config cfg;
    std::int64_t t = 0;
    std::vector<double> m, v;

    void reset(std::size_t n) {
        t = 0;
        m.assign(n, 0.0);
        v.assign(n, 0.0);
    }
};

template <typename T>
void adam_step(T* params, const T* grads, std::size_t n, adam_state& st, const std::string& name) {
    if (st.m.empty() && st.v.empty()) {
        st.reset(n);
    }
    if (st.m.size() != n || st.v.size() != n) {
        throw shape_error("adam_step: state size mismatch for " + name);
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(static_cast<double>(grads[i]))) {
            throw numeric_error("adam_step: non-finite gradient in parameter " + name);
        }
    }
    st.t += 1;
    const double b1 = st.cfg.beta1, b2 = st.cfg.beta2;
    const double corr1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
    const double corr2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < n; ++i) {
        const double g = static_cast<double>(grads[i]);
        st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
        st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
        const double m_hat = st.m[i] / corr1;
        const double v_hat = st.v[i] / corr2;
        params[i] = static_cast<T>(static_cast<double>(params[i]) -
                                   st.cfg.lr * m_hat / (std::sqrt(v_hat) + st.cfg.eps));
    }
}

template <typename T>
void adam_step(tensor4<T>& params, const tensor4<T>& grads, adam_state& st,
               const std::string& name) {
    if (!params.same_shape(grads)) {
        throw shape_error("adam_step: gradient shape mismatch for " + name);
    }
    adam_step(params.data.data(), grads.data.data(), params.data.size(), st, name);
}

template <typename T>
void adam_step(std::vector<T>& params, const std::vector<T>& grads, adam_state& st,
               const std::string& name) {
    if (params.size() != grads.size()) {
        throw shape_error("adam_step: gradient size mismatch for " + name);
    }
    adam_step(params.data(), grads.data(), params.size(), st, name);
}

} // namespace marrowcast
