#pragma once

#include <Eigen/Dense>

#include <complex>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mumimo {

using cd = std::complex<double>;
using CMat = Eigen::MatrixXcd;
using CVec = Eigen::VectorXcd;
using CMatRM = Eigen::Matrix<cd, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Rng = std::mt19937_64;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kSpeedOfLight = 299792458.0;

/// One resource element, 0-based (subcarrier, OFDM symbol).
struct Re {
    int f = 0;
    int t = 0;
    friend bool operator==(const Re&, const Re&) = default;
};

/// splitmix64 finalizer; used to derive independent per-trial seeds from a
/// base seed so that parallel or reordered trials stay reproducible.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index = 0) {
    return mix64(mix64(mix64(base) ^ stream) ^ index);
}

/// Circularly-symmetric complex Gaussian with E|z|^2 = var.
inline cd complex_normal(Rng& rng, double var) {
    std::normal_distribution<double> n(0.0, std::sqrt(var / 2.0));
    const double re = n(rng);
    const double im = n(rng);
    return {re, im};
}

/// Dense row-major 3-D array.
template <typename T>
class Tensor3 {
public:
    Tensor3() = default;
    Tensor3(int n0, int n1, int n2, T fill = T{})
        : n0_(n0), n1_(n1), n2_(n2), data_(static_cast<std::size_t>(n0) * n1 * n2, fill) {}

    int dim0() const { return n0_; }
    int dim1() const { return n1_; }
    int dim2() const { return n2_; }
    std::size_t size() const { return data_.size(); }

    T& operator()(int i, int j, int k) { return data_[index(i, j, k)]; }
    const T& operator()(int i, int j, int k) const { return data_[index(i, j, k)]; }

    T* slice(int i, int j) { return data_.data() + index(i, j, 0); }
    const T* slice(int i, int j) const { return data_.data() + index(i, j, 0); }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

private:
    std::size_t index(int i, int j, int k) const {
        return (static_cast<std::size_t>(i) * n1_ + j) * n2_ + k;
    }

    int n0_ = 0;
    int n1_ = 0;
    int n2_ = 0;
    std::vector<T> data_;
};

using CTensor3 = Tensor3<cd>;
using RTensor3 = Tensor3<double>;

/// Prints a warning to stderr; numerical fallbacks use this.
void warn(const std::string& msg);

}  // namespace mumimo
