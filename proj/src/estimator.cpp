#include "mumimo/estimator.hpp"

#include "mumimo/linalg.hpp"

namespace mumimo {

PilotLmmse::PilotLmmse(const CMat& sigma, double sigma2) : sigma2_(sigma2) {
    if (sigma.rows() != sigma.cols()) throw std::invalid_argument("PilotLmmse: Sigma must be square");
    CMat reg = sigma;
    reg.diagonal().array() += sigma2;
    HermitianSolver solver(reg);
    // X = (Sigma + s2 I)^{-1} Sigma, filter = X^H = Sigma (Sigma + s2 I)^{-1}.
    const CMat x = solver.solve(sigma);
    filter_ = x.adjoint();
    error_cov_ = hermitian_part(sigma - sigma * x);
}

CVec lmmse_pilot_estimate(const CVec& y_p, const CMat& sigma, double sigma2) {
    if (y_p.size() != sigma.rows()) throw std::invalid_argument("lmmse_pilot_estimate: dimension mismatch");
    return PilotLmmse(sigma, sigma2).estimate(y_p);
}

CVec pilot_observations(const CTensor3& y, const PilotPattern& pattern, int u) {
    const auto& pilots = pattern.pilots(u);
    const int n_p = static_cast<int>(pilots.size());
    const int n_m = y.dim2();
    CVec out(n_p * n_m);
    for (int m = 0; m < n_m; ++m)
        for (int p = 0; p < n_p; ++p) out(p + n_p * m) = y(pilots[p].f, pilots[p].t, m);
    return out;
}

CVec true_pilot_channel(const ChannelTensor& h, const PilotPattern& pattern, int u) {
    const auto& pilots = pattern.pilots(u);
    const int n_p = static_cast<int>(pilots.size());
    CVec out(n_p * h.n_m());
    for (int m = 0; m < h.n_m(); ++m)
        for (int p = 0; p < n_p; ++p) out(p + n_p * m) = h(pilots[p].f, pilots[p].t, m, u);
    return out;
}

ChannelTensor extend_nearest_pilot(const std::vector<CMat>& pilot_est, const PilotPattern& pattern) {
    const GridConfig& g = pattern.config();
    const int n_t = g.n_symbols;
    ChannelTensor out(g.n_subcarriers, 2 * n_t, g.n_bs_antennas, g.n_users);
    for (int k = 0; k < g.n_users; ++k) {
        const CMat& est = pilot_est.at(k);
        if (est.rows() != pattern.n_pilots() || est.cols() != g.n_bs_antennas) {
            throw std::invalid_argument("extend_nearest_pilot: estimate shape mismatch");
        }
        for (int f = 0; f < g.n_subcarriers; ++f) {
            for (int t = 0; t < 2 * n_t; ++t) {
                const int t_src = t < n_t ? t : n_t - 1;
                const int p = pattern.governing_index(k, f, t_src);
                for (int m = 0; m < g.n_bs_antennas; ++m) out(f, t, m, k) = est(p, m);
            }
        }
    }
    return out;
}

UplinkEstimator UplinkEstimator::lmmse(const PilotPattern& pattern, const std::vector<CMat>& sigma, double sigma2) {
    UplinkEstimator e(pattern, PilotCsi::Lmmse);
    if (static_cast<int>(sigma.size()) != pattern.config().n_users) {
        throw std::invalid_argument("UplinkEstimator: need one Sigma per user");
    }
    for (const CMat& s : sigma) e.filters_.emplace_back(s, sigma2);
    return e;
}

UplinkEstimator UplinkEstimator::perfect(const PilotPattern& pattern) {
    return UplinkEstimator(pattern, PilotCsi::Perfect);
}

std::vector<CMat> UplinkEstimator::pilot_estimates(const CTensor3& y, const ChannelTensor& h) const {
    const GridConfig& g = pattern_.config();
    std::vector<CMat> out(g.n_users);
    for (int k = 0; k < g.n_users; ++k) {
        const CVec v = csi_ == PilotCsi::Perfect ? true_pilot_channel(h, pattern_, k)
                                                 : filters_[k].estimate(pilot_observations(y, pattern_, k));
        out[k] = Eigen::Map<const CMat>(v.data(), pattern_.n_pilots(), g.n_bs_antennas);
    }
    return out;
}

ChannelTensor UplinkEstimator::estimate(const CTensor3& y, const ChannelTensor& h) const {
    return extend_nearest_pilot(pilot_estimates(y, h), pattern_);
}

ChannelTensor UplinkEstimator::estimate_from_channel(const ChannelTensor& h, double sigma2, Rng& rng) const {
    const GridConfig& g = pattern_.config();
    std::vector<CMat> est(g.n_users);
    for (int k = 0; k < g.n_users; ++k) {
        CVec v = true_pilot_channel(h, pattern_, k);
        if (csi_ == PilotCsi::Lmmse) {
            for (Eigen::Index i = 0; i < v.size(); ++i) v(i) += complex_normal(rng, sigma2);
            v = filters_[k].estimate(v);
        }
        est[k] = Eigen::Map<const CMat>(v.data(), pattern_.n_pilots(), g.n_bs_antennas);
    }
    return extend_nearest_pilot(est, pattern_);
}

ErrorStats UplinkEstimator::pilot_error_stats() const {
    const GridConfig& g = pattern_.config();
    const int n_t = g.n_symbols;
    const int n_m = g.n_bs_antennas;
    const int n_p = pattern_.n_pilots();
    ErrorStats e(g.n_subcarriers, 2 * n_t, n_m);
    if (csi_ == PilotCsi::Perfect) return e;

    // Per-user N_m x N_m blocks of the pilot error covariance, one per pilot.
    std::vector<std::vector<CMat>> blocks(g.n_users, std::vector<CMat>(n_p));
    for (int k = 0; k < g.n_users; ++k) {
        const CMat& c = filters_[k].error_covariance();
        for (int p = 0; p < n_p; ++p) {
            CMat b(n_m, n_m);
            for (int m = 0; m < n_m; ++m)
                for (int mm = 0; mm < n_m; ++mm) b(m, mm) = c(p + n_p * m, p + n_p * mm);
            blocks[k][p] = b;
        }
    }
    for (int f = 0; f < g.n_subcarriers; ++f) {
        for (int t = 0; t < 2 * n_t; ++t) {
            const int t_src = t < n_t ? t : n_t - 1;
            auto dst = e.at(f, t);
            for (int k = 0; k < g.n_users; ++k) dst += blocks[k][pattern_.governing_index(k, f, t_src)];
        }
    }
    return e;
}

void accumulate_error(ErrorStats& acc, const ChannelTensor& h, const ChannelTensor& h_hat) {
    for (int f = 0; f < h.n_f(); ++f) {
        for (int t = 0; t < h.n_t(); ++t) {
            const CMat d = h.at(f, t) - h_hat.at(f, t);
            acc.at(f, t).noalias() += d * d.adjoint();
        }
    }
}

ErrorStats true_error_stats_oracle(const ChannelModelConfig& cfg, const UplinkEstimator& estimator, double sigma2,
                                   int n_mc, Rng& rng) {
    if (n_mc < 1) throw std::invalid_argument("true_error_stats_oracle: n_mc must be >= 1");
    const GridConfig& g = estimator.pattern().config();
    ErrorStats acc(g.n_subcarriers, g.n_total_symbols(), g.n_bs_antennas);
    for (int i = 0; i < n_mc; ++i) {
        const ChannelTensor h = generate_channel(cfg, g, rng);
        const ChannelTensor h_hat = estimator.estimate_from_channel(h, sigma2, rng);
        accumulate_error(acc, h, h_hat);
    }
    const double inv = 1.0 / n_mc;
    for (int f = 0; f < acc.n_f(); ++f) {
        for (int t = 0; t < acc.n_t(); ++t) {
            auto m = acc.at(f, t);
            const CMat sym = hermitian_part(CMat(m)) * inv;
            m = sym;
        }
    }
    return acc;
}

std::vector<CMat> estimate_pilot_covariances(const ChannelModelConfig& cfg, const PilotPattern& pattern,
                                             int n_samples, Rng& rng) {
    std::vector<std::vector<Re>> positions;
    for (int u = 0; u < pattern.config().n_users; ++u) positions.push_back(pattern.pilots(u));
    return estimate_covariances(cfg, pattern.config(), positions, n_samples, rng);
}

}  // namespace mumimo
