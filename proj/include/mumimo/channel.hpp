#pragma once

#include "mumimo/common.hpp"
#include "mumimo/grid.hpp"

#include <optional>
#include <vector>

namespace mumimo {

/// Tapped-delay-line Rayleigh channel with Jakes Doppler, realized by a
/// sum of sinusoids per (user, antenna, tap). Antennas fade independently.
struct ChannelModelConfig {
    std::vector<double> tap_delays_s{0.0, 100e-9, 200e-9, 300e-9};
    std::vector<double> tap_powers;  // empty -> exponential profile e^{-p}, normalized
    double carrier_freq_hz = 3.5e9;
    double subcarrier_spacing_hz = 15e3;
    double symbol_duration_s = 1.0 / 14000.0;
    /// Fixed per-user speeds (m/s). When empty, every realization draws
    /// independent speeds uniformly from [speed_lo_mps, speed_hi_mps].
    std::vector<double> user_speeds_mps;
    double speed_lo_mps = 0.0;
    double speed_hi_mps = 0.0;
    int n_scatterers = 32;
    std::uint64_t seed = 0;

    std::vector<double> resolved_tap_powers() const;
    void validate() const;
};

double kmh_to_mps(double kmh);
double doppler_hz(double speed_mps, double carrier_freq_hz);

/// H over (subcarrier, symbol of both slots, BS antenna, user).
class ChannelTensor {
public:
    ChannelTensor() = default;
    ChannelTensor(int n_f, int n_t_total, int n_m, int n_k)
        : n_f_(n_f), n_t_(n_t_total), n_m_(n_m), n_k_(n_k),
          data_(static_cast<std::size_t>(n_f) * n_t_total * n_m * n_k) {}

    int n_f() const { return n_f_; }
    int n_t() const { return n_t_; }
    int n_m() const { return n_m_; }
    int n_k() const { return n_k_; }

    cd& operator()(int f, int t, int m, int k) { return data_[index(f, t, m, k)]; }
    const cd& operator()(int f, int t, int m, int k) const { return data_[index(f, t, m, k)]; }

    /// H_{f,t} as an N_m x N_k matrix.
    Eigen::Map<CMatRM> at(int f, int t) { return {data_.data() + index(f, t, 0, 0), n_m_, n_k_}; }
    Eigen::Map<const CMatRM> at(int f, int t) const {
        return {data_.data() + index(f, t, 0, 0), n_m_, n_k_};
    }

    /// Energy of user k summed over the whole grid.
    double user_energy(int k) const;

    std::vector<cd>& data() { return data_; }
    const std::vector<cd>& data() const { return data_; }

private:
    std::size_t index(int f, int t, int m, int k) const {
        return ((static_cast<std::size_t>(f) * n_t_ + t) * n_m_ + m) * n_k_ + k;
    }

    int n_f_ = 0, n_t_ = 0, n_m_ = 0, n_k_ = 0;
    std::vector<cd> data_;
};

/// Draws per-user speeds for one realization (fixed speeds pass through).
std::vector<double> draw_speeds(const ChannelModelConfig& cfg, int n_users, Rng& rng);

/// Unnormalized realization for the given per-user speeds.
ChannelTensor generate_raw_channel(const ChannelModelConfig& cfg, const GridConfig& grid,
                                   const std::vector<double>& speeds_mps, Rng& rng);

/// Normalized realization; speeds drawn per draw_speeds.
ChannelTensor generate_channel(const ChannelModelConfig& cfg, const GridConfig& grid, Rng& rng);
ChannelTensor generate_channel(const ChannelModelConfig& cfg, const GridConfig& grid);

/// Scales each user so that sum_{f,t} ||h^(k)_{f,t}||^2 = N_f * 2N_t * N_m.
void normalize_rg(ChannelTensor& h);
ChannelTensor normalized(ChannelTensor h);

/// Sample covariance of vec(H^(k) at positions) over n_samples user channels
/// (every user of every realization contributes one sample). Vectorization
/// runs positions fastest, then antennas. Hermitian-symmetrized.
CMat estimate_covariance(const ChannelModelConfig& cfg, const GridConfig& grid,
                         const std::vector<Re>& positions, int n_samples, Rng& rng);

/// One covariance per position list, all from the same realizations.
std::vector<CMat> estimate_covariances(const ChannelModelConfig& cfg, const GridConfig& grid,
                                       const std::vector<std::vector<Re>>& positions, int n_samples,
                                       Rng& rng);

/// Per-user Sigma at uplink pilot positions.
struct CovarianceSet {
    std::vector<CMat> sigma;  // per user, (N_P N_m) x (N_P N_m)
    std::vector<CMat> omega;  // per user, N_P x N_P (downlink equivalent channel)
};

/// y_{f,t} = H_{f,t} x_{f,t} + n over the uplink slot. X: (N_f, N_t, N_k); Y: (N_f, N_t, N_m).
CTensor3 apply_uplink(const ChannelTensor& h, const CTensor3& x, double sigma2, Rng& rng);
/// r_{f,t} = H^H_{f,t} s_{f,t} + q over the downlink slot. S: (N_f, N_t, N_m); R: (N_f, N_t, N_k).
CTensor3 apply_downlink(const ChannelTensor& h, const CTensor3& s, double sigma2, Rng& rng);

/// sigma^2 = 10^(-snr_db/10); channels are normalized to unit mean energy.
double snr_to_sigma2(double snr_db);

nlohmann::json to_json(const ChannelModelConfig& cfg);
ChannelModelConfig channel_config_from_json(const nlohmann::json& j);

/// Little-endian float32 interleaved (re, im) blob with a JSON sidecar.
void save_channel(const std::string& path, const ChannelTensor& h, const nlohmann::json& meta);
ChannelTensor load_channel(const std::string& path);

}  // namespace mumimo
