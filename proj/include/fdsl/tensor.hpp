#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "fdsl/common.hpp"

namespace fdsl {

// Row-major dense tensor. The float instantiation is the model's numeric
// container; double is used by the finite-difference gradient checker.
template <class T>
struct basic_tensor {
    std::vector<int> shape;
    std::vector<T> data;

    basic_tensor() = default;
    explicit basic_tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(numel_of(shape), T(0));
    }
    basic_tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != data.size())
            throw shape_error("tensor: shape does not match data length");
    }

    static std::size_t numel_of(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int dim : s) {
            if (dim < 0) throw shape_error("tensor: negative dimension");
            n *= static_cast<std::size_t>(dim);
        }
        return n;
    }

    std::size_t numel() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }

    int rows() const { return shape.at(0); }
    int cols() const { return shape.at(1); }

    T& operator()(int i, int j) { return data[static_cast<std::size_t>(i) * cols() + j]; }
    const T& operator()(int i, int j) const {
        return data[static_cast<std::size_t>(i) * cols() + j];
    }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const std::vector<int>& s) const { return shape == s; }

    void check_finite(const std::string& what) const {
        for (const T& v : data)
            if (!std::isfinite(static_cast<double>(v)))
                throw nonfinite_error("non-finite value in " + what);
    }

    template <class U>
    basic_tensor<U> cast() const {
        basic_tensor<U> out(shape);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

using tensor32 = basic_tensor<float>;
using tensor64 = basic_tensor<double>;

// C[m,n] (+)= A[m,k] * B[k,n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    if (!accumulate)
        for (std::size_t i = 0; i < static_cast<std::size_t>(m) * n; ++i) c[i] = T(0);
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<std::size_t>(i) * k;
        T* crow = c + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            const T* brow = b + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<std::size_t>(i) * k;
        T* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* brow = b + static_cast<std::size_t>(j) * k;
            T acc = T(0);
            for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    if (!accumulate)
        for (std::size_t i = 0; i < static_cast<std::size_t>(m) * n; ++i) c[i] = T(0);
    for (int kk = 0; kk < k; ++kk) {
        const T* arow = a + static_cast<std::size_t>(kk) * m;
        const T* brow = b + static_cast<std::size_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const T av = arow[i];
            T* crow = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <class T>
basic_tensor<T> matmul(const basic_tensor<T>& a, const basic_tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw shape_error("matmul: incompatible shapes");
    basic_tensor<T> c({a.rows(), b.cols()});
    gemm_nn(a.ptr(), b.ptr(), c.ptr(), a.rows(), a.cols(), b.cols(), false);
    return c;
}

// Numerically stable row-wise softmax, in place.
template <class T>
void softmax_rows(basic_tensor<T>& x) {
    if (x.rank() != 2) throw shape_error("softmax_rows: expected rank 2");
    const int r = x.rows(), c = x.cols();
    for (int i = 0; i < r; ++i) {
        T* row = x.ptr() + static_cast<std::size_t>(i) * c;
        T mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (int j = 0; j < c; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int j = 0; j < c; ++j) row[j] /= sum;
    }
}

} // namespace fdsl
