#pragma once

#include "mumimo/channel.hpp"
#include "mumimo/common.hpp"
#include "mumimo/estimator.hpp"
#include "mumimo/grid.hpp"
#include "mumimo/uplink_rx.hpp"

#include <vector>

namespace mumimo {

/// N = ((W W^H) o I)^{-1}, returned as its diagonal. Throws on a zero row.
Eigen::VectorXd precoding_normalizer(const CMat& w);
/// s = W^H N u
CVec precode(const CMat& w, const Eigen::VectorXd& n, const CVec& u);
/// G = H^H W^H N (N_k x N_k); row k is what user k sees.
CMat equivalent_channel(const CMat& h, const CMat& w, const Eigen::VectorXd& n);

/// BS-side precoding for the downlink slot, reusing the uplink grouped-LMMSE
/// matrices computed from the uplink pilots.
class DownlinkPrecoder {
public:
    /// h_hat covers both slots (its downlink half is the copied estimate);
    /// groups are the downlink-slot groups of `bs_pattern`.
    DownlinkPrecoder(const ChannelTensor& h_hat, const ErrorStats& e, double sigma2, const PilotPattern& bs_pattern);

    const CMat& w(int f, int t) const { return w_[group_index(f, t)]; }
    const Eigen::VectorXd& n(int f, int t) const { return n_[group_index(f, t)]; }

    /// U (N_f, N_t, N_k) over the downlink slot -> S (N_f, N_t, N_m).
    CTensor3 precode_grid(const CTensor3& u) const;
    /// G over the downlink slot as a (N_f, N_t, N_k, N_k) tensor; `h` covers both slots.
    ChannelTensor equivalent_channel_grid(const ChannelTensor& h) const;

private:
    int group_index(int f, int t) const { return lookup_[static_cast<std::size_t>(f) * n_t_ + t]; }

    int n_f_ = 0, n_t_ = 0, n_m_ = 0, n_k_ = 0;
    std::vector<int> lookup_;  // (f, t in slot) -> group
    std::vector<EqualizerGroup> groups_;
    std::vector<CMat> w_;
    std::vector<Eigen::VectorXd> n_;
};

/// U over the downlink slot: per-user bits over the data REs of
/// `dl_pattern` in (f, t, bit) order, u = e_k at user k's pilot REs.
CTensor3 build_downlink_symbols(const std::vector<std::vector<std::uint8_t>>& bits, const PilotPattern& dl_pattern,
                                const Constellation& c);

/// Received pilots r_k at user k's downlink pilot REs (t relative to the slot).
CVec ue_pilot_observations(const CTensor3& r, const PilotPattern& dl_pattern, int k);

/// Per-user equivalent-channel estimates over the downlink slot.
struct UeEstimate {
    CTensor3 g_hat;  // (N_f, N_t, N_k)
    RTensor3 v;      // (N_f, N_t, N_k) estimation error variance
};

/// Scalar LMMSE per user with its Omega filter; v is the mean pilot
/// error variance tr(Omega - Omega (Omega + sigma^2 I)^{-1} Omega) / N_P.
UeEstimate ue_estimate(const CTensor3& r, const PilotPattern& dl_pattern, const std::vector<PilotLmmse>& omega_filters);
UeEstimate ue_estimate(const CTensor3& r, const PilotPattern& dl_pattern, const std::vector<CMat>& omega, double sigma2);
/// True g_kk at the pilots, nearest-pilot extended; v = 0.
UeEstimate ue_estimate_perfect(const ChannelTensor& g, const PilotPattern& dl_pattern);

/// tau^2 = (v + j + sigma^2) / |g_hat|^2, +inf when g_hat = 0.
double dl_noise_var(cd g_hat, double v, double j, double sigma2);

/// u_hat = r / g_hat with tau^2 per RE.
EqualizedGrid equalize_downlink(const CTensor3& r, const CTensor3& g_hat, const RTensor3& v, const RTensor3& j,
                                double sigma2);

/// Oracle v and j over the downlink slot, (N_f, N_t, N_k).
struct DownlinkStats {
    RTensor3 v;
    RTensor3 j;
};

/// UE-side CSI used by the oracle: LMMSE with the given Omega filters, or
/// perfect pilot knowledge when `ue_filters` is null.
DownlinkStats downlink_oracle(const ChannelModelConfig& cfg, const UplinkEstimator& bs, const PilotPattern& dl_pattern,
                              const std::vector<PilotLmmse>* ue_filters, double sigma2, int n_mc, Rng& rng);

/// Omega per user: second moment of g_kk over user k's downlink pilots.
std::vector<CMat> estimate_omega(const ChannelModelConfig& cfg, const UplinkEstimator& bs,
                                 const PilotPattern& dl_pattern, double sigma2, int n_samples, Rng& rng);

/// Draws one realization and runs the BS side: returns H, the BS estimate and G.
struct DownlinkRealization {
    ChannelTensor h;
    ChannelTensor h_hat;
    ChannelTensor g;  // downlink slot
};
DownlinkRealization draw_downlink_realization(const ChannelModelConfig& cfg, const UplinkEstimator& bs,
                                              const ErrorStats& bs_e, double sigma2, Rng& rng);

}  // namespace mumimo
