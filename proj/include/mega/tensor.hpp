#ifndef MEGA_TENSOR_HPP
#define MEGA_TENSOR_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace mega {

// Fatal errors are exceptions; the CLI maps them to a nonzero exit with a
// single-line "error:" message.
struct FatalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fatal(const std::string& msg) { throw FatalError(msg); }

inline void require(bool cond, const std::string& msg) {
    if (!cond) fatal(msg);
}

struct Shape {
    std::array<int, 4> d{1, 1, 1, 1};
    int rank = 0;

    Shape() = default;
    Shape(std::initializer_list<int> dims) {
        rank = static_cast<int>(dims.size());
        if (rank > 4) fatal("Shape: rank > 4 unsupported");
        int i = 0;
        for (int v : dims) d[i++] = v;
    }

    int numel() const {
        int n = 1;
        for (int i = 0; i < rank; ++i) n *= d[i];
        return n;
    }

    bool operator==(const Shape& o) const { return rank == o.rank && d == o.d; }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::string s = "(";
        for (int i = 0; i < rank; ++i) {
            if (i) s += ",";
            s += std::to_string(d[i]);
        }
        return s + ")";
    }
};

// Dense row-major double tensor, rank <= 4. Double precision throughout:
// the gradient checks in the test suite run at tolerances that single
// precision cannot meet.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(s), data(static_cast<std::size_t>(s.numel()), fill) {}

    static Tensor zeros(Shape s) { return Tensor(s); }
    static Tensor full(Shape s, double v) { return Tensor(s, v); }
    static Tensor scalar(double v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }
    static Tensor from_vector(const std::vector<double>& v) {
        Tensor t({static_cast<int>(v.size())});
        t.data = v;
        return t;
    }

    int numel() const { return shape.numel(); }
    bool empty() const { return data.empty(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    // 2-d indexing (N x D)
    double& at2(int i, int j) { return data[static_cast<std::size_t>(i) * shape.d[1] + j]; }
    double at2(int i, int j) const { return data[static_cast<std::size_t>(i) * shape.d[1] + j]; }

    // 3-d indexing (C x H x W)
    double& at3(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * shape.d[1] + y) * shape.d[2] + x];
    }
    double at3(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * shape.d[1] + y) * shape.d[2] + x];
    }

    // 4-d indexing (N x C x H x W)
    std::size_t idx4(int n, int c, int y, int x) const {
        return ((static_cast<std::size_t>(n) * shape.d[1] + c) * shape.d[2] + y) * shape.d[3] + x;
    }
    double& at4(int n, int c, int y, int x) { return data[idx4(n, c, y, x)]; }
    double at4(int n, int c, int y, int x) const { return data[idx4(n, c, y, x)]; }

    double min() const {
        double m = data.empty() ? 0.0 : data[0];
        for (double v : data) m = std::min(m, v);
        return m;
    }
    double max() const {
        double m = data.empty() ? 0.0 : data[0];
        for (double v : data) m = std::max(m, v);
        return m;
    }
    double sum() const {
        double s = 0.0;
        for (double v : data) s += v;
        return s;
    }
    double abs_max() const {
        double m = 0.0;
        for (double v : data) m = std::max(m, std::abs(v));
        return m;
    }
    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    // Row view helpers for N x D matrices.
    const double* row(int i) const { return data.data() + static_cast<std::size_t>(i) * shape.d[1]; }
    double* row(int i) { return data.data() + static_cast<std::size_t>(i) * shape.d[1]; }
};

inline double euclidean(const double* a, const double* b, int d) {
    double s = 0.0;
    for (int i = 0; i < d; ++i) {
        double t = a[i] - b[i];
        s += t * t;
    }
    return std::sqrt(s);
}

// C(MxN) += A(MxK) * B(KxN), all row-major.
inline void gemm_nn(int M, int N, int K, const double* A, const double* B, double* C) {
    for (int i = 0; i < M; ++i) {
        const double* a = A + static_cast<std::size_t>(i) * K;
        double* c = C + static_cast<std::size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            double av = a[k];
            if (av == 0.0) continue;
            const double* b = B + static_cast<std::size_t>(k) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C(MxN) += A(MxK) * B(NxK)^T
inline void gemm_nt(int M, int N, int K, const double* A, const double* B, double* C) {
    for (int i = 0; i < M; ++i) {
        const double* a = A + static_cast<std::size_t>(i) * K;
        double* c = C + static_cast<std::size_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const double* b = B + static_cast<std::size_t>(j) * K;
            double s = 0.0;
            for (int k = 0; k < K; ++k) s += a[k] * b[k];
            c[j] += s;
        }
    }
}

// C(MxN) += A(KxM)^T * B(KxN)
inline void gemm_tn(int M, int N, int K, const double* A, const double* B, double* C) {
    for (int k = 0; k < K; ++k) {
        const double* a = A + static_cast<std::size_t>(k) * M;
        const double* b = B + static_cast<std::size_t>(k) * N;
        for (int i = 0; i < M; ++i) {
            double av = a[i];
            if (av == 0.0) continue;
            double* c = C + static_cast<std::size_t>(i) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// FNV-1a over raw bytes; used for parameter and config hashing.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t hash_tensor(const Tensor& t, std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(t.data.data(), t.data.size() * sizeof(double), h);
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

}  // namespace mega

#endif
