#include "mumimo/downlink.hpp"

#include "mumimo/linalg.hpp"

#include <cmath>
#include <limits>

namespace mumimo {

Eigen::VectorXd precoding_normalizer(const CMat& w) {
    Eigen::VectorXd n(w.rows());
    for (Eigen::Index k = 0; k < w.rows(); ++k) {
        const double d = w.row(k).squaredNorm();
        if (d == 0.0) throw std::invalid_argument("precoding_normalizer: user " + std::to_string(k) + " has a zero precoder");
        n(k) = 1.0 / d;
    }
    return n;
}

CVec precode(const CMat& w, const Eigen::VectorXd& n, const CVec& u) {
    return w.adjoint() * n.cast<cd>().cwiseProduct(u);
}

CMat equivalent_channel(const CMat& h, const CMat& w, const Eigen::VectorXd& n) {
    return (h.adjoint() * w.adjoint()) * n.cast<cd>().asDiagonal();
}

DownlinkPrecoder::DownlinkPrecoder(const ChannelTensor& h_hat, const ErrorStats& e, double sigma2,
                                   const PilotPattern& bs_pattern) {
    const GridConfig& g = bs_pattern.config();
    n_f_ = g.n_subcarriers;
    n_t_ = g.n_symbols;
    n_m_ = g.n_bs_antennas;
    n_k_ = g.n_users;
    if (h_hat.n_t() != 2 * n_t_ || h_hat.n_f() != n_f_) throw std::invalid_argument("DownlinkPrecoder: shape mismatch");
    groups_ = make_groups(bs_pattern, 1);
    lookup_.assign(static_cast<std::size_t>(n_f_) * n_t_, -1);
    for (std::size_t i = 0; i < groups_.size(); ++i) {
        const auto& gr = groups_[i];
        w_.push_back(grouped_lmmse_weights(h_hat, e, sigma2, gr));
        n_.push_back(precoding_normalizer(w_.back()));
        for (int f = gr.f_begin; f <= gr.f_end; ++f)
            for (int t = gr.t_begin; t <= gr.t_end; ++t) lookup_[static_cast<std::size_t>(f) * n_t_ + (t - n_t_)] = static_cast<int>(i);
    }
}

CTensor3 DownlinkPrecoder::precode_grid(const CTensor3& u) const {
    if (u.dim0() != n_f_ || u.dim1() != n_t_ || u.dim2() != n_k_) throw std::invalid_argument("precode_grid: shape mismatch");
    CTensor3 s(n_f_, n_t_, n_m_);
    for (int f = 0; f < n_f_; ++f) {
        for (int t = 0; t < n_t_; ++t) {
            const CVec uv = Eigen::Map<const CVec>(u.slice(f, t), n_k_);
            Eigen::Map<CVec>(s.slice(f, t), n_m_) = precode(w(f, t), n(f, t), uv);
        }
    }
    return s;
}

ChannelTensor DownlinkPrecoder::equivalent_channel_grid(const ChannelTensor& h) const {
    ChannelTensor g(n_f_, n_t_, n_k_, n_k_);
    for (int f = 0; f < n_f_; ++f)
        for (int t = 0; t < n_t_; ++t) g.at(f, t) = equivalent_channel(CMat(h.at(f, t + n_t_)), w(f, t), n(f, t));
    return g;
}

CTensor3 build_downlink_symbols(const std::vector<std::vector<std::uint8_t>>& bits, const PilotPattern& dl_pattern,
                                const Constellation& c) {
    // Same layout as the uplink: data REs of the pattern, unit pilots.
    return build_uplink_symbols(bits, dl_pattern, c);
}

CVec ue_pilot_observations(const CTensor3& r, const PilotPattern& dl_pattern, int k) {
    const auto& pilots = dl_pattern.pilots(k);
    CVec out(pilots.size());
    for (std::size_t p = 0; p < pilots.size(); ++p) out(p) = r(pilots[p].f, pilots[p].t, k);
    return out;
}

namespace {

UeEstimate extend_ue(const std::vector<CVec>& pilot_est, const std::vector<double>& v, const PilotPattern& dl_pattern) {
    const GridConfig& g = dl_pattern.config();
    UeEstimate out{CTensor3(g.n_subcarriers, g.n_symbols, g.n_users), RTensor3(g.n_subcarriers, g.n_symbols, g.n_users)};
    for (int k = 0; k < g.n_users; ++k) {
        for (int f = 0; f < g.n_subcarriers; ++f) {
            for (int t = 0; t < g.n_symbols; ++t) {
                out.g_hat(f, t, k) = pilot_est[k](dl_pattern.governing_index(k, f, t));
                out.v(f, t, k) = v[k];
            }
        }
    }
    return out;
}

}  // namespace

UeEstimate ue_estimate(const CTensor3& r, const PilotPattern& dl_pattern, const std::vector<PilotLmmse>& omega_filters) {
    const int n_k = dl_pattern.config().n_users;
    if (static_cast<int>(omega_filters.size()) != n_k) throw std::invalid_argument("ue_estimate: one Omega per user");
    std::vector<CVec> est(n_k);
    std::vector<double> v(n_k);
    for (int k = 0; k < n_k; ++k) {
        est[k] = omega_filters[k].estimate(ue_pilot_observations(r, dl_pattern, k));
        v[k] = omega_filters[k].error_covariance().trace().real() / dl_pattern.n_pilots();
    }
    return extend_ue(est, v, dl_pattern);
}

UeEstimate ue_estimate(const CTensor3& r, const PilotPattern& dl_pattern, const std::vector<CMat>& omega, double sigma2) {
    std::vector<PilotLmmse> filters;
    for (const CMat& o : omega) filters.emplace_back(o, sigma2);
    return ue_estimate(r, dl_pattern, filters);
}

UeEstimate ue_estimate_perfect(const ChannelTensor& g, const PilotPattern& dl_pattern) {
    const int n_k = dl_pattern.config().n_users;
    std::vector<CVec> est(n_k);
    for (int k = 0; k < n_k; ++k) {
        const auto& pilots = dl_pattern.pilots(k);
        est[k].resize(pilots.size());
        for (std::size_t p = 0; p < pilots.size(); ++p) est[k](p) = g(pilots[p].f, pilots[p].t, k, k);
    }
    return extend_ue(est, std::vector<double>(n_k, 0.0), dl_pattern);
}

double dl_noise_var(cd g_hat, double v, double j, double sigma2) {
    const double p = std::norm(g_hat);
    if (p == 0.0) return std::numeric_limits<double>::infinity();
    return (v + j + sigma2) / p;
}

EqualizedGrid equalize_downlink(const CTensor3& r, const CTensor3& g_hat, const RTensor3& v, const RTensor3& j,
                                double sigma2) {
    const int n_f = r.dim0(), n_t = r.dim1(), n_k = r.dim2();
    if (g_hat.dim0() != n_f || g_hat.dim1() != n_t || g_hat.dim2() != n_k) {
        throw std::invalid_argument("equalize_downlink: shape mismatch");
    }
    EqualizedGrid out{CTensor3(n_f, n_t, n_k), RTensor3(n_f, n_t, n_k)};
    for (int f = 0; f < n_f; ++f) {
        for (int t = 0; t < n_t; ++t) {
            for (int k = 0; k < n_k; ++k) {
                const cd g = g_hat(f, t, k);
                out.x_hat(f, t, k) = g == cd(0) ? cd(0) : r(f, t, k) / g;
                out.nu2(f, t, k) = dl_noise_var(g, v(f, t, k), j(f, t, k), sigma2);
            }
        }
    }
    return out;
}

DownlinkRealization draw_downlink_realization(const ChannelModelConfig& cfg, const UplinkEstimator& bs,
                                              const ErrorStats& bs_e, double sigma2, Rng& rng) {
    DownlinkRealization out;
    out.h = generate_channel(cfg, bs.pattern().config(), rng);
    out.h_hat = bs.estimate_from_channel(out.h, sigma2, rng);
    DownlinkPrecoder pre(out.h_hat, bs_e, sigma2, bs.pattern());
    out.g = pre.equivalent_channel_grid(out.h);
    return out;
}

DownlinkStats downlink_oracle(const ChannelModelConfig& cfg, const UplinkEstimator& bs, const PilotPattern& dl_pattern,
                              const std::vector<PilotLmmse>* ue_filters, double sigma2, int n_mc, Rng& rng) {
    if (n_mc < 1) throw std::invalid_argument("downlink_oracle: n_mc must be >= 1");
    const GridConfig& g = dl_pattern.config();
    const int n_f = g.n_subcarriers, n_t = g.n_symbols, n_k = g.n_users;
    DownlinkStats acc{RTensor3(n_f, n_t, n_k), RTensor3(n_f, n_t, n_k)};
    const ErrorStats bs_e = bs.pilot_error_stats();
    for (int i = 0; i < n_mc; ++i) {
        const DownlinkRealization real = draw_downlink_realization(cfg, bs, bs_e, sigma2, rng);
        UeEstimate est;
        if (ue_filters == nullptr) {
            est = ue_estimate_perfect(real.g, dl_pattern);
        } else {
            // Pilot observations r_k = g_kk + q at the UE's pilot REs.
            std::vector<CVec> pe(n_k);
            CTensor3 r(n_f, n_t, n_k);
            for (int k = 0; k < n_k; ++k)
                for (const Re& p : dl_pattern.pilots(k)) r(p.f, p.t, k) = real.g(p.f, p.t, k, k) + complex_normal(rng, sigma2);
            est = ue_estimate(r, dl_pattern, *ue_filters);
        }
        for (int f = 0; f < n_f; ++f) {
            for (int t = 0; t < n_t; ++t) {
                const auto gm = real.g.at(f, t);
                for (int k = 0; k < n_k; ++k) {
                    acc.v(f, t, k) += std::norm(gm(k, k) - est.g_hat(f, t, k));
                    acc.j(f, t, k) += gm.row(k).squaredNorm() - std::norm(gm(k, k));
                }
            }
        }
    }
    for (auto* t : {&acc.v, &acc.j})
        for (double& x : t->data()) x /= n_mc;
    return acc;
}

std::vector<CMat> estimate_omega(const ChannelModelConfig& cfg, const UplinkEstimator& bs,
                                 const PilotPattern& dl_pattern, double sigma2, int n_samples, Rng& rng) {
    if (n_samples < 1) throw std::invalid_argument("estimate_omega: n_samples must be >= 1");
    const int n_k = dl_pattern.config().n_users;
    const int n_p = dl_pattern.n_pilots();
    std::vector<CMat> omega(n_k, CMat::Zero(n_p, n_p));
    const ErrorStats bs_e = bs.pilot_error_stats();
    for (int i = 0; i < n_samples; ++i) {
        const DownlinkRealization real = draw_downlink_realization(cfg, bs, bs_e, sigma2, rng);
        for (int k = 0; k < n_k; ++k) {
            const auto& pilots = dl_pattern.pilots(k);
            CVec x(n_p);
            for (int p = 0; p < n_p; ++p) x(p) = real.g(pilots[p].f, pilots[p].t, k, k);
            omega[k].noalias() += x * x.adjoint();
        }
    }
    for (CMat& o : omega) o = hermitian_part(o) * (1.0 / n_samples);
    return omega;
}

}  // namespace mumimo
