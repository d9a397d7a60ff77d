#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "marrowcast/error.hpp"

namespace marrowcast {

// (n, c, h, w) tensor, w-fastest. Float for production nets, double for
// finite-difference shadow checks.
template <typename T>
struct tensor4 {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> data;

    tensor4() = default;
    tensor4(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {
        if (n < 0 || c < 0 || h < 0 || w < 0) {
            throw shape_error("tensor4: negative dimension");
        }
        data.assign(size(), T(0));
    }

    std::size_t size() const {
        return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) *
               static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    }

    std::size_t index(int ni, int ci, int yi, int xi) const {
        return ((static_cast<std::size_t>(ni) * c + ci) * h + yi) * w + xi;
    }

    T& at(int ni, int ci, int yi, int xi) { return data[index(ni, ci, yi, xi)]; }
    const T& at(int ni, int ci, int yi, int xi) const { return data[index(ni, ci, yi, xi)]; }

    T* plane(int ni, int ci) { return data.data() + index(ni, ci, 0, 0); }
    const T* plane(int ni, int ci) const { return data.data() + index(ni, ci, 0, 0); }

    bool same_shape(const tensor4& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }

    std::string shape_str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }

    void require_finite(const char* what) const {
        for (const T& v : data) {
            if (!std::isfinite(static_cast<double>(v))) {
                throw numeric_error(std::string(what) + ": non-finite value in tensor " + shape_str());
            }
        }
    }
};

using tensor4f = tensor4<float>;
using tensor4d = tensor4<double>;

} // namespace marrowcast
