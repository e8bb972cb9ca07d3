#pragma once

#include <array>
#include <cmath>
#include <cstddef>

namespace voxcell {

struct Vec3 {
    double x = 0, y = 0, z = 0;

    double& operator[](std::size_t i) { return i == 0 ? x : (i == 1 ? y : z); }
    double operator[](std::size_t i) const { return i == 0 ? x : (i == 1 ? y : z); }

    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
    Vec3& operator*=(double s) { x *= s; y *= s; z *= s; return *this; }

    friend Vec3 operator+(Vec3 a, const Vec3& b) { return a += b; }
    friend Vec3 operator-(Vec3 a, const Vec3& b) { return a -= b; }
    friend Vec3 operator*(Vec3 a, double s) { return a *= s; }
    friend Vec3 operator*(double s, Vec3 a) { return a *= s; }
    friend bool operator==(const Vec3&, const Vec3&) = default;
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline double distance(const Vec3& a, const Vec3& b) { return norm(a - b); }
inline double distance_squared(const Vec3& a, const Vec3& b) {
    const Vec3 d = a - b;
    return dot(d, d);
}

/// Row-major 3x3 matrix. Rows are used as lattice vectors, so a row vector
/// times the matrix maps fractional to Cartesian coordinates.
struct Mat3 {
    std::array<double, 9> m{};

    static Mat3 identity() { return Mat3{{1, 0, 0, 0, 1, 0, 0, 0, 1}}; }
    static Mat3 from_rows(const Vec3& r0, const Vec3& r1, const Vec3& r2) {
        return Mat3{{r0.x, r0.y, r0.z, r1.x, r1.y, r1.z, r2.x, r2.y, r2.z}};
    }

    double& operator()(std::size_t r, std::size_t c) { return m[r * 3 + c]; }
    double operator()(std::size_t r, std::size_t c) const { return m[r * 3 + c]; }

    Vec3 row(std::size_t r) const { return {m[r * 3], m[r * 3 + 1], m[r * 3 + 2]}; }

    Mat3 transposed() const {
        Mat3 t;
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t c = 0; c < 3; ++c) t(c, r) = (*this)(r, c);
        return t;
    }

    double determinant() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }

    // Adjugate over determinant; callers guarantee non-singularity.
    Mat3 inverse() const {
        const double inv_det = 1.0 / determinant();
        Mat3 r;
        r(0, 0) = (m[4] * m[8] - m[5] * m[7]) * inv_det;
        r(0, 1) = (m[2] * m[7] - m[1] * m[8]) * inv_det;
        r(0, 2) = (m[1] * m[5] - m[2] * m[4]) * inv_det;
        r(1, 0) = (m[5] * m[6] - m[3] * m[8]) * inv_det;
        r(1, 1) = (m[0] * m[8] - m[2] * m[6]) * inv_det;
        r(1, 2) = (m[2] * m[3] - m[0] * m[5]) * inv_det;
        r(2, 0) = (m[3] * m[7] - m[4] * m[6]) * inv_det;
        r(2, 1) = (m[1] * m[6] - m[0] * m[7]) * inv_det;
        r(2, 2) = (m[0] * m[4] - m[1] * m[3]) * inv_det;
        return r;
    }

    friend Mat3 operator*(const Mat3& a, const Mat3& b) {
        Mat3 r;
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) {
                double s = 0;
                for (std::size_t k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
                r(i, j) = s;
            }
        return r;
    }

    // Column-vector product M·v.
    friend Vec3 operator*(const Mat3& a, const Vec3& v) {
        return {a(0, 0) * v.x + a(0, 1) * v.y + a(0, 2) * v.z,
                a(1, 0) * v.x + a(1, 1) * v.y + a(1, 2) * v.z,
                a(2, 0) * v.x + a(2, 1) * v.y + a(2, 2) * v.z};
    }
};

// Row-vector product v·M.
inline Vec3 row_times(const Vec3& v, const Mat3& a) {
    return {v.x * a(0, 0) + v.y * a(1, 0) + v.z * a(2, 0),
            v.x * a(0, 1) + v.y * a(1, 1) + v.z * a(2, 1),
            v.x * a(0, 2) + v.y * a(1, 2) + v.z * a(2, 2)};
}

}  // namespace voxcell
