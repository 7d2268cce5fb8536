#include "voxelseg/init.hpp"

#include <cmath>
#include <vector>

namespace voxelseg {

Fans kernel_fans(const Shape& s) {
    const std::int64_t receptive = std::int64_t(s.d) * s.h * s.w;
    return Fans{std::int64_t(s.c) * receptive, std::int64_t(s.b) * receptive};
}

Tensor init_glorot_uniform(Shape shape, Rng& rng) {
    const Fans f = kernel_fans(shape);
    if (f.fan_in <= 0 || f.fan_out <= 0)
        throw DataError("glorot init needs positive fan-in/fan-out");
    const double limit = std::sqrt(6.0 / double(f.fan_in + f.fan_out));
    Tensor t(shape);
    for (std::int64_t i = 0; i < t.size(); ++i)
        t.data()[i] = float(rng.uniform(-limit, limit));
    return t;
}

namespace {

/// Modified Gram-Schmidt over the rows of an n x m matrix (n <= m), in place.
/// Residual norms are positive by construction, which fixes the QR diagonal
/// sign. Throws on rank collapse (vanishing residual).
void orthonormalize_rows(std::vector<double>& a, std::int64_t n, std::int64_t m) {
    for (std::int64_t i = 0; i < n; ++i) {
        double* ri = a.data() + i * m;
        for (int pass = 0; pass < 2; ++pass) {
            for (std::int64_t j = 0; j < i; ++j) {
                const double* rj = a.data() + j * m;
                double dot = 0.0;
                for (std::int64_t k = 0; k < m; ++k)
                    dot += ri[k] * rj[k];
                for (std::int64_t k = 0; k < m; ++k)
                    ri[k] -= dot * rj[k];
            }
        }
        double norm = 0.0;
        for (std::int64_t k = 0; k < m; ++k)
            norm += ri[k] * ri[k];
        norm = std::sqrt(norm);
        if (norm < 1e-12)
            throw NumericalError("orthogonal init hit a rank-deficient draw");
        for (std::int64_t k = 0; k < m; ++k)
            ri[k] /= norm;
    }
}

} // namespace

Tensor init_orthogonal(Shape shape, Rng& rng) {
    const std::int64_t rows = shape.b;
    const std::int64_t cols = shape.count() / (rows > 0 ? rows : 1);
    if (rows <= 0 || cols <= 0)
        throw DataError("orthogonal init needs a non-degenerate shape");

    const std::int64_t n = std::min(rows, cols);
    const std::int64_t m = std::max(rows, cols);
    std::vector<double> a(std::size_t(n * m));
    for (auto& x : a)
        x = rng.normal();
    orthonormalize_rows(a, n, m);

    Tensor t(shape);
    if (rows <= cols) {
        for (std::int64_t i = 0; i < rows * cols; ++i)
            t.data()[i] = float(a[std::size_t(i)]);
    } else {
        // Stored matrix is (cols x rows); transpose so the tensor's columns
        // are orthonormal.
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t c = 0; c < cols; ++c)
                t.data()[r * cols + c] = float(a[std::size_t(c * rows + r)]);
    }
    return t;
}

} // namespace voxelseg
