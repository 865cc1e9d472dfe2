#pragma once

#include "mumimo/channel.hpp"
#include "mumimo/common.hpp"
#include "mumimo/grid.hpp"

#include <vector>

namespace mumimo {

/// Per-RE N_m x N_m matrices over the full 2N_t grid.
class ErrorStats {
public:
    ErrorStats() = default;
    ErrorStats(int n_f, int n_t_total, int n_m)
        : n_f_(n_f), n_t_(n_t_total), n_m_(n_m),
          data_(static_cast<std::size_t>(n_f) * n_t_total * n_m * n_m) {}

    int n_f() const { return n_f_; }
    int n_t() const { return n_t_; }
    int n_m() const { return n_m_; }
    bool empty() const { return data_.empty(); }

    Eigen::Map<CMatRM> at(int f, int t) { return {data_.data() + offset(f, t), n_m_, n_m_}; }
    Eigen::Map<const CMatRM> at(int f, int t) const { return {data_.data() + offset(f, t), n_m_, n_m_}; }

    std::vector<cd>& data() { return data_; }
    const std::vector<cd>& data() const { return data_; }

private:
    std::size_t offset(int f, int t) const {
        return (static_cast<std::size_t>(f) * n_t_ + t) * n_m_ * n_m_;
    }

    int n_f_ = 0, n_t_ = 0, n_m_ = 0;
    std::vector<cd> data_;
};

/// LMMSE filter Sigma (Sigma + sigma^2 I)^{-1} for unit pilots, applied by
/// a precomputed Cholesky solve. Also exposes the error covariance
/// Sigma - Sigma (Sigma + sigma^2 I)^{-1} Sigma.
class PilotLmmse {
public:
    PilotLmmse(const CMat& sigma, double sigma2);

    CVec estimate(const CVec& y) const { return filter_ * y; }
    const CMat& filter() const { return filter_; }
    const CMat& error_covariance() const { return error_cov_; }
    double sigma2() const { return sigma2_; }

private:
    CMat filter_;
    CMat error_cov_;
    double sigma2_;
};

CVec lmmse_pilot_estimate(const CVec& y_p, const CMat& sigma, double sigma2);

enum class PilotCsi { Lmmse, Perfect };

/// Received pilot observations of user u, vec ordered (pilot fastest, antenna).
CVec pilot_observations(const CTensor3& y, const PilotPattern& pattern, int u);
/// True channel of user u at its uplink pilots, same ordering.
CVec true_pilot_channel(const ChannelTensor& h, const PilotPattern& pattern, int u);

/// Nearest-pilot extension. pilot_est[u] is an N_P x N_m matrix (column-major,
/// so its storage equals the vec ordering). The uplink slot is filled from
/// group_of; the downlink slot copies the last uplink symbol.
ChannelTensor extend_nearest_pilot(const std::vector<CMat>& pilot_est, const PilotPattern& pattern);

/// BS-side uplink channel estimation (LMMSE or perfect pilot CSI).
class UplinkEstimator {
public:
    static UplinkEstimator lmmse(const PilotPattern& pattern, const std::vector<CMat>& sigma, double sigma2);
    static UplinkEstimator perfect(const PilotPattern& pattern);

    PilotCsi csi() const { return csi_; }
    const PilotPattern& pattern() const { return pattern_; }

    /// Pilot estimates per user (N_P x N_m); `y` is the received uplink slot.
    std::vector<CMat> pilot_estimates(const CTensor3& y, const ChannelTensor& h) const;
    ChannelTensor estimate(const CTensor3& y, const ChannelTensor& h) const;
    /// Same as estimate() but simulates only the pilot observations.
    ChannelTensor estimate_from_channel(const ChannelTensor& h, double sigma2, Rng& rng) const;

    /// Error covariance a conventional receiver knows: the LMMSE pilot error
    /// covariance, summed over users and extended like the estimate. Zero
    /// for perfect pilot CSI.
    ErrorStats pilot_error_stats() const;

private:
    UplinkEstimator(const PilotPattern& pattern, PilotCsi csi) : pattern_(pattern), csi_(csi) {}

    PilotPattern pattern_;
    PilotCsi csi_;
    std::vector<PilotLmmse> filters_;
};

/// E_{f,t} = mean over n_mc realizations of sum_k (h_k - h_hat_k)(h_k - h_hat_k)^H.
ErrorStats true_error_stats_oracle(const ChannelModelConfig& cfg, const UplinkEstimator& estimator,
                                   double sigma2, int n_mc, Rng& rng);

/// Per-user Sigma from Monte Carlo at the uplink pilot positions.
std::vector<CMat> estimate_pilot_covariances(const ChannelModelConfig& cfg, const PilotPattern& pattern,
                                             int n_samples, Rng& rng);

/// Accumulates sum_k D_k D_k^H for D = H - H_hat at every RE.
void accumulate_error(ErrorStats& acc, const ChannelTensor& h, const ChannelTensor& h_hat);

}  // namespace mumimo
