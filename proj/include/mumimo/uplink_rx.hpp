#pragma once

#include "mumimo/channel.hpp"
#include "mumimo/common.hpp"
#include "mumimo/estimator.hpp"
#include "mumimo/grid.hpp"

#include <span>
#include <vector>

namespace mumimo {

/// A rectangle of REs sharing one equalization matrix. Bounds are
/// inclusive, 0-based, and t is absolute over the 2N_t grid.
struct EqualizerGroup {
    int f_begin = 0, f_end = 0;
    int t_begin = 0, t_end = 0;

    int n_res() const { return (f_end - f_begin + 1) * (t_end - t_begin + 1); }
    bool contains(int f, int t) const { return f >= f_begin && f <= f_end && t >= t_begin && t <= t_end; }
};

/// Resource-block groups (freq_span subcarriers) split in time at the
/// nearest-pilot-symbol boundaries: one 14-symbol segment for OneP, 2x7
/// for TwoP. `slot` 0 is the uplink slot, 1 the downlink slot.
std::vector<EqualizerGroup> make_groups(const PilotPattern& pattern, int slot, int freq_span = 12);

/// W = (sum H_hat^H) (sum (H_hat H_hat^H + E + sigma^2 I))^{-1}. `e` may be
/// empty (E = 0); otherwise it has one entry per H_hat.
CMat grouped_lmmse_weights(std::span<const CMat> h_hat, std::span<const CMat> e, double sigma2);

/// Same, reading H_hat and E from grid tensors over the group's REs.
CMat grouped_lmmse_weights(const ChannelTensor& h_hat, const ErrorStats& e, double sigma2, const EqualizerGroup& g);

/// diag(D) = 1 / diag(W H_hat). Zero diagonal entries stay 0 (erased stream).
CVec unbias(const CMat& w, const CMat& h_hat);
/// x_hat = D W y
CVec equalize(const CVec& d, const CMat& w, const CVec& y);

/// nu^2 for user k given r = row k of W:
/// (sum_{j!=k} |r h_j|^2 + r E r^H + sigma^2 ||r||^2) / |r h_k|^2.
/// `e` may be empty. Returns +inf when the denominator vanishes.
double post_eq_noise_var(const CMat& w, int k, const CMat& h_hat, const CMat& e, double sigma2);

struct EqualizedGrid {
    CTensor3 x_hat;  // (N_f, N_t, N_k)
    RTensor3 nu2;    // (N_f, N_t, N_k), +inf marks an erased stream
};

/// Grouped-LMMSE equalization of the uplink slot.
EqualizedGrid equalize_uplink(const ChannelTensor& h_hat, const ErrorStats& e, const CTensor3& y, double sigma2,
                              const std::vector<EqualizerGroup>& groups);

/// Exact log-sum-exp LLRs ln P(b=1)/P(b=0) under x_hat = x + CN(0, nu2).
/// Erased streams (nu2 = inf) give zeros; non-finite x_hat throws.
void demap_llr(cd x_hat, double nu2, const Constellation& c, std::span<double> out);
std::vector<double> demap_llr(cd x_hat, double nu2, const Constellation& c);

/// LLRs over (f, t, user, bit) of one slot.
class LlrGrid {
public:
    LlrGrid() = default;
    LlrGrid(int n_f, int n_t, int n_k, int m)
        : n_f_(n_f), n_t_(n_t), n_k_(n_k), m_(m), data_(static_cast<std::size_t>(n_f) * n_t * n_k * m, 0.0) {}

    int n_f() const { return n_f_; }
    int n_t() const { return n_t_; }
    int n_k() const { return n_k_; }
    int m() const { return m_; }

    double& operator()(int f, int t, int k, int i) { return data_[index(f, t, k, i)]; }
    double operator()(int f, int t, int k, int i) const { return data_[index(f, t, k, i)]; }
    std::span<double> at(int f, int t, int k) { return {data_.data() + index(f, t, k, 0), static_cast<std::size_t>(m_)}; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

private:
    std::size_t index(int f, int t, int k, int i) const {
        return ((static_cast<std::size_t>(f) * n_t_ + t) * n_k_ + k) * m_ + i;
    }

    int n_f_ = 0, n_t_ = 0, n_k_ = 0, m_ = 0;
    std::vector<double> data_;
};

/// Conventional demapping at the data REs of the slot; pilot REs stay zero.
LlrGrid demap_grid(const EqualizedGrid& eq, const Constellation& c, const PilotPattern& pattern);

/// Data REs of one slot in (f, t) order, t relative to the slot.
std::vector<Re> data_res(const PilotPattern& pattern);

/// Symbol grid (N_f, N_t, N_k) for the uplink slot: per-user bits are
/// placed over data REs in (f, t, bit) order and pilots are 1 at the
/// owner's pilot REs. bits[k] must hold n_data_res * M bits.
CTensor3 build_uplink_symbols(const std::vector<std::vector<std::uint8_t>>& bits, const PilotPattern& pattern,
                              const Constellation& c);

/// Flattens an LlrGrid to per-user vectors in the same (f, t, bit) order.
std::vector<std::vector<double>> user_llrs(const LlrGrid& llr, const PilotPattern& pattern);

}  // namespace mumimo
