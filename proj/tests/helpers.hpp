#pragma once

// Shared test-side oracles and utilities. Everything here is written as the
// most obvious possible implementation, independent of the library code it
// checks: nested loops, brute-force pair counting, breadth-first flood fill.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <queue>
#include <random>
#include <utility>
#include <vector>

#include "marrowcast/nn.hpp"
#include "marrowcast/tensor.hpp"
#include "marrowcast/unet.hpp"
#include "marrowcast/volume.hpp"

namespace testutil {

// Brute-force pairwise AUC: P(score_pos > score_neg) + 0.5 P(equal).
inline double brute_auc(const std::vector<double>& s, const std::vector<int>& l) {
    double num = 0.0;
    long long pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (l[i] != 1) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (l[j] != 0) continue;
            ++pairs;
            if (s[i] > s[j]) num += 1.0;
            else if (s[i] == s[j]) num += 0.5;
        }
    }
    return num / static_cast<double>(pairs);
}

// Nested-loop 3x3 same-padding convolution, the readable reference.
template <typename T>
marrowcast::tensor4<T> conv2d_reference(const marrowcast::tensor4<T>& x,
                                        const marrowcast::tensor4<T>& k,
                                        const std::vector<T>& bias) {
    marrowcast::tensor4<T> y(x.n, k.n, x.h, x.w);
    for (int n = 0; n < x.n; ++n) {
        for (int co = 0; co < k.n; ++co) {
            for (int yy = 0; yy < x.h; ++yy) {
                for (int xx = 0; xx < x.w; ++xx) {
                    T acc = bias[static_cast<std::size_t>(co)];
                    for (int ci = 0; ci < x.c; ++ci) {
                        for (int ky = 0; ky < 3; ++ky) {
                            for (int kx = 0; kx < 3; ++kx) {
                                const int sy = yy + ky - 1, sx = xx + kx - 1;
                                if (sy < 0 || sy >= x.h || sx < 0 || sx >= x.w) continue;
                                acc += k.at(co, ci, ky, kx) * x.at(n, ci, sy, sx);
                            }
                        }
                    }
                    y.at(n, co, yy, xx) = acc;
                }
            }
        }
    }
    return y;
}

// Central-difference derivative of `loss_fn` with respect to one scalar.
template <typename T, typename LossFn>
double fd_derivative(T& param, double h, LossFn&& loss_fn) {
    const T saved = param;
    param = static_cast<T>(saved + h);
    const double up = loss_fn();
    param = static_cast<T>(saved - h);
    const double down = loss_fn();
    param = saved;
    return (up - down) / (2.0 * h);
}

struct grad_check_stats {
    double max_rel = 0.0; // worst relative error across checked coordinates
    int checked = 0;
};

// Compare an analytic gradient vector against finite differences on a random
// subset of coordinates. rel = |fd - g| / max(|fd|, |g|, floor).
template <typename T, typename LossFn>
grad_check_stats check_gradient(std::vector<T>& params, const std::vector<T>& analytic,
                                double h, double floor, int n_probe, std::mt19937_64& eng,
                                LossFn&& loss_fn) {
    grad_check_stats st;
    std::uniform_int_distribution<std::size_t> pick(0, params.size() - 1);
    for (int p = 0; p < n_probe; ++p) {
        const std::size_t i = pick(eng);
        const double fd = fd_derivative(params[i], h, loss_fn);
        const double g = static_cast<double>(analytic[i]);
        const double rel = std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), floor});
        st.max_rel = std::max(st.max_rel, rel);
        ++st.checked;
    }
    return st;
}

// 6-connected components of a binary volume; label 0 = background.
struct components3d {
    std::vector<int> label;
    int count = 0;
    int nx = 0, ny = 0, nz = 0;
};

inline components3d connected_components(const marrowcast::mask_volume& m) {
    components3d cc;
    cc.nx = m.nx;
    cc.ny = m.ny;
    cc.nz = m.nz;
    cc.label.assign(m.data.size(), 0);
    const int dx[6] = {1, -1, 0, 0, 0, 0};
    const int dy[6] = {0, 0, 1, -1, 0, 0};
    const int dz[6] = {0, 0, 0, 0, 1, -1};
    for (int z = 0; z < m.nz; ++z) {
        for (int y = 0; y < m.ny; ++y) {
            for (int x = 0; x < m.nx; ++x) {
                const std::size_t i0 = m.index(x, y, z);
                if (m.data[i0] < 0.5f || cc.label[i0] != 0) continue;
                const int id = ++cc.count;
                std::queue<std::array<int, 3>> q;
                q.push({x, y, z});
                cc.label[i0] = id;
                while (!q.empty()) {
                    const auto [cx, cy, cz] = q.front();
                    q.pop();
                    for (int d = 0; d < 6; ++d) {
                        const int nx2 = cx + dx[d], ny2 = cy + dy[d], nz2 = cz + dz[d];
                        if (nx2 < 0 || nx2 >= m.nx || ny2 < 0 || ny2 >= m.ny || nz2 < 0 ||
                            nz2 >= m.nz) {
                            continue;
                        }
                        const std::size_t ni = m.index(nx2, ny2, nz2);
                        if (m.data[ni] >= 0.5f && cc.label[ni] == 0) {
                            cc.label[ni] = id;
                            q.push({nx2, ny2, nz2});
                        }
                    }
                }
            }
        }
    }
    return cc;
}

// Centroid of one labeled component, in voxel coordinates.
inline std::array<double, 3> centroid(const components3d& cc, int id) {
    double sx = 0, sy = 0, sz = 0;
    long long n = 0;
    for (int z = 0; z < cc.nz; ++z) {
        for (int y = 0; y < cc.ny; ++y) {
            for (int x = 0; x < cc.nx; ++x) {
                const std::size_t i = static_cast<std::size_t>((z * cc.ny + y) * cc.nx + x);
                if (cc.label[i] == id) {
                    sx += x;
                    sy += y;
                    sz += z;
                    ++n;
                }
            }
        }
    }
    return {sx / static_cast<double>(n), sy / static_cast<double>(n),
            sz / static_cast<double>(n)};
}

inline double dice(const marrowcast::mask_volume& a, const marrowcast::mask_volume& b) {
    double inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const bool va = a.data[i] >= 0.5f, vb = b.data[i] >= 0.5f;
        if (va) ++na;
        if (vb) ++nb;
        if (va && vb) ++inter;
    }
    return 2.0 * inter / (na + nb);
}

template <typename T>
marrowcast::tensor4<T> random_tensor(int n, int c, int h, int w, std::mt19937_64& eng,
                                     double scale = 1.0) {
    marrowcast::tensor4<T> t(n, c, h, w);
    std::normal_distribution<double> g(0.0, scale);
    for (T& v : t.data) v = static_cast<T>(g(eng));
    return t;
}

// Finite-difference probes for a float32 network. Two kinds:
//  - subset-direction trials: push a random half of the parameters one step
//    along sign(grad); the secant slope must match the summed |grad| of the
//    subset. Conditioning the direction on the gradient's sign keeps the
//    slope away from zero (no cancellation), while sign, scale, or routing
//    bugs in any layer's backward still break the match.
//  - coordinate trials: classic single-parameter probes on the top-decile
//    magnitude coordinates, where the f32 loss rounding is negligible
//    relative to the secant.
struct net_fd_result {
    double worst_rel = 0.0;
    int trials = 0;
};

inline net_fd_result net_fd_check(marrowcast::unet_model& m, const marrowcast::tensor4f& x,
                                  const marrowcast::tensor4f& y, int n_dir, int n_coord,
                                  std::mt19937_64& eng) {
    using marrowcast::backprop;
    const marrowcast::backprop_result r = backprop(m, x, y);
    net_fd_result out;
    const double floor = 1e-4;

    std::bernoulli_distribution keep(0.5);
    const double h_dir = 3e-4;
    for (int t = 0; t < n_dir; ++t) {
        std::vector<std::vector<float>> vk(m.layers.size()), vb(m.layers.size());
        double slope = 0.0;
        for (std::size_t li = 0; li < m.layers.size(); ++li) {
            vk[li].assign(m.layers[li].k.data.size(), 0.0f);
            vb[li].assign(m.layers[li].b.size(), 0.0f);
            for (std::size_t i = 0; i < vk[li].size(); ++i) {
                if (!keep(eng)) continue;
                const float g = r.grads[li].k.data[i];
                vk[li][i] = g >= 0.0f ? 1.0f : -1.0f;
                slope += std::abs(static_cast<double>(g));
            }
            for (std::size_t i = 0; i < vb[li].size(); ++i) {
                if (!keep(eng)) continue;
                const float g = r.grads[li].b[i];
                vb[li][i] = g >= 0.0f ? 1.0f : -1.0f;
                slope += std::abs(static_cast<double>(g));
            }
        }
        const auto saved = m.layers;
        const auto shift = [&](double s) {
            for (std::size_t li = 0; li < m.layers.size(); ++li) {
                for (std::size_t i = 0; i < vk[li].size(); ++i) {
                    m.layers[li].k.data[i] += static_cast<float>(s * vk[li][i]);
                }
                for (std::size_t i = 0; i < vb[li].size(); ++i) {
                    m.layers[li].b[i] += static_cast<float>(s * vb[li][i]);
                }
            }
        };
        shift(h_dir);
        const double up = backprop(m, x, y).loss;
        m.layers = saved;
        shift(-h_dir);
        const double down = backprop(m, x, y).loss;
        m.layers = saved;
        const double fd = (up - down) / (2.0 * h_dir);
        const double rel = std::abs(fd - slope) / std::max({std::abs(fd), slope, floor});
        out.worst_rel = std::max(out.worst_rel, rel);
        ++out.trials;
    }

    std::vector<std::pair<double, std::pair<std::size_t, std::size_t>>> mags;
    for (std::size_t li = 0; li < m.layers.size(); ++li) {
        for (std::size_t i = 0; i < r.grads[li].k.data.size(); ++i) {
            mags.push_back({std::abs(static_cast<double>(r.grads[li].k.data[i])), {li, i}});
        }
    }
    std::sort(mags.rbegin(), mags.rend());
    const double h_coord = 3e-3;
    std::uniform_int_distribution<std::size_t> pick(0, mags.size() / 10);
    for (int t = 0; t < n_coord; ++t) {
        const auto [li, i] = mags[pick(eng)].second;
        const double g = r.grads[li].k.data[i];
        const double fd = fd_derivative(m.layers[li].k.data[i], h_coord,
                                        [&] { return backprop(m, x, y).loss; });
        const double rel = std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), floor});
        out.worst_rel = std::max(out.worst_rel, rel);
        ++out.trials;
    }
    return out;
}

} // namespace testutil
