#pragma once

#include <array>
#include <cmath>

#include "marrowcast/error.hpp"

namespace marrowcast {

struct point3 {
    double x = 0.0, y = 0.0, z = 0.0;
};

// 3x4 affine map in millimetre coordinates, row-major [linear | translation].
struct affine_transform {
    std::array<double, 12> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};

    static affine_transform identity() { return affine_transform{}; }

    static affine_transform translation(double tx, double ty, double tz) {
        affine_transform t;
        t.m[3] = tx;
        t.m[7] = ty;
        t.m[11] = tz;
        return t;
    }

    // Rotation about the z axis through `center`, angle in radians.
    static affine_transform rotation_z(double angle, const point3& center) {
        const double c = std::cos(angle), s = std::sin(angle);
        affine_transform t;
        t.m = {c, -s, 0, 0, s, c, 0, 0, 0, 0, 1, 0};
        // shift so the rotation pivots around `center`
        t.m[3] = center.x - c * center.x + s * center.y;
        t.m[7] = center.y - s * center.x - c * center.y;
        return t;
    }

    double linear(int r, int c) const { return m[r * 4 + c]; }
    double& linear(int r, int c) { return m[r * 4 + c]; }

    point3 apply(const point3& p) const {
        return {m[0] * p.x + m[1] * p.y + m[2] * p.z + m[3],
                m[4] * p.x + m[5] * p.y + m[6] * p.z + m[7],
                m[8] * p.x + m[9] * p.y + m[10] * p.z + m[11]};
    }

    double det() const {
        return m[0] * (m[5] * m[10] - m[6] * m[9]) -
               m[1] * (m[4] * m[10] - m[6] * m[8]) +
               m[2] * (m[4] * m[9] - m[5] * m[8]);
    }

    affine_transform inverse() const {
        const double d = det();
        if (std::abs(d) <= 1e-9) {
            throw numeric_error("affine transform is singular (|det| <= 1e-9)");
        }
        const double inv = 1.0 / d;
        affine_transform r;
        r.m[0] = (m[5] * m[10] - m[6] * m[9]) * inv;
        r.m[1] = (m[2] * m[9] - m[1] * m[10]) * inv;
        r.m[2] = (m[1] * m[6] - m[2] * m[5]) * inv;
        r.m[4] = (m[6] * m[8] - m[4] * m[10]) * inv;
        r.m[5] = (m[0] * m[10] - m[2] * m[8]) * inv;
        r.m[6] = (m[2] * m[4] - m[0] * m[6]) * inv;
        r.m[8] = (m[4] * m[9] - m[5] * m[8]) * inv;
        r.m[9] = (m[1] * m[8] - m[0] * m[9]) * inv;
        r.m[10] = (m[0] * m[5] - m[1] * m[4]) * inv;
        // t' = -A^{-1} t
        r.m[3] = -(r.m[0] * m[3] + r.m[1] * m[7] + r.m[2] * m[11]);
        r.m[7] = -(r.m[4] * m[3] + r.m[5] * m[7] + r.m[6] * m[11]);
        r.m[11] = -(r.m[8] * m[3] + r.m[9] * m[7] + r.m[10] * m[11]);
        return r;
    }

    // Composition: (a.compose(b))(p) == a(b(p)).
    affine_transform compose(const affine_transform& b) const {
        affine_transform r;
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                r.linear(i, j) = linear(i, 0) * b.linear(0, j) +
                                 linear(i, 1) * b.linear(1, j) +
                                 linear(i, 2) * b.linear(2, j);
            }
            r.m[i * 4 + 3] = linear(i, 0) * b.m[3] + linear(i, 1) * b.m[7] +
                             linear(i, 2) * b.m[11] + m[i * 4 + 3];
        }
        return r;
    }
};

} // namespace marrowcast
