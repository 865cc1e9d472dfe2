#include "mumimo/ml_rx.hpp"

#include "mumimo/linalg.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <memory>
#include <numeric>

namespace mumimo {

namespace {

// Distance planes are divided by these so that inputs stay O(1).
constexpr double kTimeDistScale = 7.0;
constexpr double kFreqDistScale = 4.0;
// Conventional LLRs enter the demapper CNN as tanh(LLR / kLlrInputScale).
constexpr double kLlrInputScale = 8.0;

}  // namespace

const char* to_string(Direction d) { return d == Direction::Uplink ? "uplink" : "downlink"; }

const char* to_string(Scheme s) {
    switch (s) {
    case Scheme::Baseline: return "baseline";
    case Scheme::PerfectCsi: return "perfect_csi";
    case Scheme::MlChest: return "ml_chest";
    case Scheme::MlReceiver: return "ml_receiver";
    }
    return "?";
}

Direction direction_from_string(const std::string& s) {
    if (s == "uplink" || s == "ul") return Direction::Uplink;
    if (s == "downlink" || s == "dl") return Direction::Downlink;
    throw std::invalid_argument("direction: unknown value '" + s + "'");
}

Scheme scheme_from_string(const std::string& s) {
    if (s == "baseline") return Scheme::Baseline;
    if (s == "perfect_csi") return Scheme::PerfectCsi;
    if (s == "ml_chest") return Scheme::MlChest;
    if (s == "ml_receiver") return Scheme::MlReceiver;
    throw std::invalid_argument("scheme: unknown value '" + s + "' (baseline, perfect_csi, ml_chest, ml_receiver)");
}

ad::Tensor Cnn::forward(const ad::Tensor& x) const {
    ad::Tensor h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        h = ad::conv2d(h, layers[i].w, layers[i].b);
        if (i + 1 < layers.size()) h = ad::relu(h);
    }
    return h;
}

Cnn make_cnn(const std::vector<int>& channels, int kh, int kw, Rng& rng) {
    Cnn cnn;
    for (std::size_t i = 0; i + 1 < channels.size(); ++i) {
        const int in = channels[i], out = channels[i + 1];
        std::normal_distribution<double> n(0.0, std::sqrt(2.0 / (in * kh * kw)));
        std::vector<double> w(static_cast<std::size_t>(out) * in * kh * kw);
        for (double& v : w) v = n(rng);
        cnn.layers.push_back({ad::Tensor::parameter({out, in, kh, kw}, std::move(w)),
                              ad::Tensor::parameter({out}, std::vector<double>(out, 0.0))});
    }
    return cnn;
}

CMat decay_template(double gamma, double theta, int n_m) {
    CMat t(n_m, n_m);
    for (int m = 0; m < n_m; ++m)
        for (int n = 0; n < n_m; ++n)
            t(m, n) = std::exp(-gamma * std::abs(m - n)) * std::polar(1.0, theta * (m - n));
    return t;
}

double MlParams::gamma() const { return ad::softplus(gamma_raw.value()[0]); }

std::vector<ad::NamedTensor> MlParams::named() const {
    std::vector<ad::NamedTensor> out;
    auto add_cnn = [&](const std::string& prefix, const Cnn& c) {
        for (std::size_t i = 0; i < c.layers.size(); ++i) {
            out.push_back({prefix + "." + std::to_string(i) + ".w", c.layers[i].w});
            out.push_back({prefix + "." + std::to_string(i) + ".b", c.layers[i].b});
        }
    };
    add_cnn("cnn_e", cnn_e);
    add_cnn("cnn_l", cnn_l);
    add_cnn("cnn_demap", cnn_demap);
    out.push_back({"gamma_raw", gamma_raw});
    out.push_back({"theta_p", theta_p});
    return out;
}

std::vector<ad::Tensor> MlParams::trainable(Scheme scheme) const {
    std::vector<ad::Tensor> out;
    for (const auto& nt : named()) {
        if (scheme == Scheme::MlChest && nt.name.rfind("cnn_demap", 0) == 0) continue;
        out.push_back(nt.tensor);
    }
    return out;
}

int cnn_e_inputs(Direction d) { return d == Direction::Uplink ? 4 : 5; }
int cnn_e_outputs(Direction d) { return d == Direction::Uplink ? 1 : 2; }

MlParams init_ml_params(Direction direction, int bits_per_symbol, std::uint64_t seed) {
    MlParams p;
    p.direction = direction;
    p.bits_per_symbol = bits_per_symbol;
    Rng rng(derive_seed(seed, 0x6d6c5f696e6974ULL));
    const int c = kCnnChannels;
    p.cnn_e = make_cnn({cnn_e_inputs(direction), c, c, c, cnn_e_outputs(direction)}, 3, 3, rng);
    p.cnn_l = make_cnn({1, c, 1}, 1, 3, rng);
    p.cnn_demap = make_cnn({3 + bits_per_symbol, c, c, c, bits_per_symbol}, 3, 3, rng);
    p.gamma_raw = ad::Tensor::parameter({1}, {ad::softplus_inv(kGammaInit)});
    std::normal_distribution<double> n(0.0, 0.1);
    p.theta_p = ad::Tensor::parameter({1}, {n(rng)});
    return p;
}

void zero_demapper(MlParams& p) {
    for (auto& l : p.cnn_demap.layers) {
        std::fill(l.w.value().begin(), l.w.value().end(), 0.0);
        std::fill(l.b.value().begin(), l.b.value().end(), 0.0);
    }
}

std::vector<std::vector<double>> doppler_feature(const ChannelTensor& h_hat, const PilotPattern& pattern) {
    const GridConfig& g = pattern.config();
    std::vector<std::vector<double>> out(g.n_users, std::vector<double>(g.n_subcarriers, 0.0));
    if (pattern.n_pt() < 2) return out;
    const int t1 = pattern.pilot_symbols()[0];
    const int t2 = pattern.pilot_symbols()[1];
    for (int k = 0; k < g.n_users; ++k) {
        for (int f = 0; f < g.n_subcarriers; ++f) {
            double acc = 0.0;
            for (int m = 0; m < g.n_bs_antennas; ++m) acc += std::norm(h_hat(f, t2, m, k) - h_hat(f, t1, m, k));
            out[k][f] = acc / g.n_bs_antennas;
        }
    }
    return out;
}

std::vector<std::vector<double>> doppler_feature(const CTensor3& g_hat, const PilotPattern& dl_pattern) {
    const GridConfig& g = dl_pattern.config();
    std::vector<std::vector<double>> out(g.n_users, std::vector<double>(g.n_subcarriers, 0.0));
    if (dl_pattern.n_pt() < 2) return out;
    const int t1 = dl_pattern.pilot_symbols()[0];
    const int t2 = dl_pattern.pilot_symbols()[1];
    for (int k = 0; k < g.n_users; ++k)
        for (int f = 0; f < g.n_subcarriers; ++f) out[k][f] = std::norm(g_hat(f, t2, k) - g_hat(f, t1, k));
    return out;
}

ad::Tensor doppler_plane(const MlParams& p, const std::vector<std::vector<double>>& raw, const PilotPattern& pattern) {
    const GridConfig& g = pattern.config();
    const int n_k = g.n_users, n_f = g.n_subcarriers, n_t = g.n_symbols;
    if (pattern.n_pt() < 2) return ad::Tensor::zeros({n_k, 1, n_f, n_t});
    if (static_cast<int>(raw.size()) != n_k) throw std::invalid_argument("doppler_plane: one feature row per user");
    std::vector<double> v;
    v.reserve(static_cast<std::size_t>(n_k) * n_f);
    for (const auto& r : raw) {
        if (static_cast<int>(r.size()) != n_f) throw std::invalid_argument("doppler_plane: feature length mismatch");
        v.insert(v.end(), r.begin(), r.end());
    }
    const ad::Tensor x = ad::Tensor::constant({n_k, 1, 1, n_f}, std::move(v));
    const ad::Tensor l = ad::softplus(ad::mean_hw(p.cnn_l.forward(x)));  // [N_k, 1]
    return ad::repeat_axis(ad::repeat_axis(ad::reshape(l, {n_k, 1, 1, 1}), 2, n_f), 3, n_t);
}

ad::Tensor uplink_feature_planes(const PilotPattern& pattern, double sigma2) {
    const GridConfig& g = pattern.config();
    const int n_k = g.n_users, n_f = g.n_subcarriers, n_t = g.n_symbols;
    const std::size_t plane = static_cast<std::size_t>(n_f) * n_t;
    std::vector<double> v(n_k * 3 * plane);
    for (int k = 0; k < n_k; ++k) {
        double* base = v.data() + k * 3 * plane;
        for (int f = 0; f < n_f; ++f) {
            for (int t = 0; t < n_t; ++t) {
                const std::size_t i = static_cast<std::size_t>(f) * n_t + t;
                base[i] = sigma2;
                base[plane + i] = std::abs(pattern.time_offset(k, f, t)) / kTimeDistScale;
                base[2 * plane + i] = std::abs(pattern.freq_offset(k, f, t)) / kFreqDistScale;
            }
        }
    }
    return ad::Tensor::constant({n_k, 3, n_f, n_t}, std::move(v));
}

ad::Tensor downlink_feature_planes(const PilotPattern& dl_pattern, const PilotPattern& ul_pattern, double sigma2) {
    const GridConfig& g = dl_pattern.config();
    const int n_k = g.n_users, n_f = g.n_subcarriers, n_t = g.n_symbols;
    const std::size_t plane = static_cast<std::size_t>(n_f) * n_t;
    const int last_ul_pilot = ul_pattern.pilot_symbols().back();
    const ad::Tensor base = uplink_feature_planes(dl_pattern, sigma2);
    std::vector<double> v(n_k * plane);
    for (int k = 0; k < n_k; ++k)
        for (int f = 0; f < n_f; ++f)
            for (int t = 0; t < n_t; ++t)
                v[k * plane + static_cast<std::size_t>(f) * n_t + t] = (n_t + t - last_ul_pilot) / static_cast<double>(n_t);
    return ad::concat({base, ad::Tensor::constant({n_k, 1, n_f, n_t}, std::move(v))}, 1);
}

ad::Tensor predict_error_scale(const MlParams& p, const ad::Tensor& features) {
    return ad::softplus(p.cnn_e.forward(features));
}

ErrorStats predict_error_stats(const MlParams& p, const ad::Tensor& features, int n_m) {
    const ad::Tensor s = ad::sum_axis(predict_error_scale(p, features), 0);
    const int n_f = features.dim(2), n_t = features.dim(3);
    const CMat t = decay_template(p.gamma(), p.theta(), n_m);
    ErrorStats e(n_f, 2 * n_t, n_m);
    for (int f = 0; f < n_f; ++f)
        for (int tt = 0; tt < n_t; ++tt) e.at(f, tt) = s.value()[static_cast<std::size_t>(f) * n_t + tt] * t;
    return e;
}

std::vector<std::uint8_t> data_mask(const PilotPattern& pattern) {
    const GridConfig& g = pattern.config();
    std::vector<std::uint8_t> m(static_cast<std::size_t>(g.n_subcarriers) * g.n_symbols);
    for (int f = 0; f < g.n_subcarriers; ++f)
        for (int t = 0; t < g.n_symbols; ++t) m[static_cast<std::size_t>(f) * g.n_symbols + t] = pattern.is_data(f, t);
    return m;
}

ad::Tensor grouped_equalizer(const ad::Tensor& s_tot, const ad::Tensor& gamma, const ad::Tensor& theta,
                             const EqualizerContext& ctx) {
    const ChannelTensor& h = *ctx.h_hat;
    const CTensor3& y = *ctx.y;
    const int n_f = y.dim0(), n_t = y.dim1(), n_m = y.dim2(), n_k = h.n_k();
    if (s_tot.numel() != static_cast<std::size_t>(n_f) * n_t) throw std::invalid_argument("grouped_equalizer: s_tot shape");
    const double sigma2 = ctx.sigma2;
    const double gam = gamma.value()[0];
    const double th = theta.value()[0];
    const CMat tmpl = decay_template(gam, th, n_m);
    // dT/dgamma and dT/dtheta
    CMat dt_g(n_m, n_m), dt_th(n_m, n_m);
    for (int m = 0; m < n_m; ++m)
        for (int n = 0; n < n_m; ++n) {
            dt_g(m, n) = -static_cast<double>(std::abs(m - n)) * tmpl(m, n);
            dt_th(m, n) = cd(0, m - n) * tmpl(m, n);
        }
    const std::vector<std::uint8_t> mask = data_mask(*ctx.pattern);
    const auto& sv = s_tot.value();
    const std::size_t plane = static_cast<std::size_t>(n_f) * n_t;
    auto out_idx = [plane, n_t](int k, int c, int f, int t) { return (static_cast<std::size_t>(k) * 3 + c) * plane + f * n_t + t; };

    struct GroupState {
        CMat w, a_inv;
        double s_g;
    };
    auto states = std::make_shared<std::vector<GroupState>>();
    std::vector<double> out(static_cast<std::size_t>(n_k) * 3 * plane, 0.0);
    for (int k = 0; k < n_k; ++k)
        for (std::size_t i = 0; i < plane; ++i) out[(static_cast<std::size_t>(k) * 3 + 2) * plane + i] = 1.0;

    for (const auto& g : *ctx.groups) {
        CMat a = CMat::Zero(n_m, n_m);
        CMat b = CMat::Zero(n_k, n_m);
        double s_g = 0.0;
        for (int f = g.f_begin; f <= g.f_end; ++f)
            for (int t = g.t_begin; t <= g.t_end; ++t) {
                const auto hm = h.at(f, t);
                a.noalias() += hm * hm.adjoint();
                b += hm.adjoint();
                s_g += sv[static_cast<std::size_t>(f) * n_t + t];
            }
        a.diagonal().array() += sigma2 * g.n_res();
        a += s_g * tmpl;
        HermitianSolver solver(hermitian_part(a));
        const CMat w = solver.solve(CMat(b.adjoint())).adjoint();
        const CMat a_inv = solver.solve(CMat(CMat::Identity(n_m, n_m)));
        for (int f = g.f_begin; f <= g.f_end; ++f) {
            for (int t = g.t_begin; t <= g.t_end; ++t) {
                if (!mask[static_cast<std::size_t>(f) * n_t + t]) continue;
                const CMat hm = h.at(f, t);
                const CVec yv = Eigen::Map<const CVec>(y.slice(f, t), n_m);
                const double s_re = sv[static_cast<std::size_t>(f) * n_t + t];
                const CMat rh = w * hm;       // N_k x N_k
                const CVec ry = w * yv;
                for (int k = 0; k < n_k; ++k) {
                    const auto r = w.row(k);
                    const cd ak = rh(k, k);
                    const double d = std::norm(ak);
                    if (d == 0.0) {
                        out[out_idx(k, 2, f, t)] = std::numeric_limits<double>::infinity();
                        continue;
                    }
                    const cd x = ry(k) / ak;
                    const double num = rh.row(k).squaredNorm() - d + s_re * (r * tmpl * r.adjoint())(0, 0).real() +
                                       sigma2 * r.squaredNorm();
                    out[out_idx(k, 0, f, t)] = x.real();
                    out[out_idx(k, 1, f, t)] = x.imag();
                    out[out_idx(k, 2, f, t)] = num / d;
                }
            }
        }
        states->push_back({w, a_inv, s_g});
    }

    const ChannelTensor* hp = ctx.h_hat;
    const CTensor3* yp = ctx.y;
    const std::vector<EqualizerGroup> groups = *ctx.groups;
    auto bw = [=](const std::vector<double>& gout, const std::vector<std::vector<double>*>& pg) {
        std::vector<double>* gs = pg[0];
        std::vector<double>* gg = pg[1];
        std::vector<double>* gth = pg[2];
        const ChannelTensor& h = *hp;
        const CTensor3& y = *yp;
        const auto& sv_b = sv;
        const std::array<const CMat*, 3> dt_dir{nullptr, &dt_g, &dt_th};
        for (std::size_t gi = 0; gi < groups.size(); ++gi) {
            const auto& g = groups[gi];
            const GroupState& st = (*states)[gi];
            // Tangents of W along (S_g, gamma, theta): dW = -W dA A^{-1}.
            std::array<CMat, 3> dw;
            dw[0] = -st.w * tmpl * st.a_inv;
            dw[1] = -st.w * (st.s_g * dt_g) * st.a_inv;
            dw[2] = -st.w * (st.s_g * dt_th) * st.a_inv;
            std::array<double, 3> acc{0.0, 0.0, 0.0};
            for (int f = g.f_begin; f <= g.f_end; ++f) {
                for (int t = g.t_begin; t <= g.t_end; ++t) {
                    if (!mask[static_cast<std::size_t>(f) * n_t + t]) continue;
                    const CMat hm = h.at(f, t);
                    const CVec yv = Eigen::Map<const CVec>(y.slice(f, t), n_m);
                    const double s_re = sv_b[static_cast<std::size_t>(f) * n_t + t];
                    const CMat rh = st.w * hm;
                    const CVec ry = st.w * yv;
                    std::array<CMat, 3> drh;
                    std::array<CVec, 3> dry;
                    for (int dd = 0; dd < 3; ++dd) {
                        drh[dd] = dw[dd] * hm;
                        dry[dd] = dw[dd] * yv;
                    }
                    double direct = 0.0;
                    for (int k = 0; k < n_k; ++k) {
                        const double gxr = gout[out_idx(k, 0, f, t)];
                        const double gxi = gout[out_idx(k, 1, f, t)];
                        const double gnu = gout[out_idx(k, 2, f, t)];
                        if (gxr == 0.0 && gxi == 0.0 && gnu == 0.0) continue;
                        const auto r = st.w.row(k);
                        const cd ak = rh(k, k);
                        const double d = std::norm(ak);
                        if (d == 0.0) continue;
                        const cd x = ry(k) / ak;
                        const double quad = (r * tmpl * r.adjoint())(0, 0).real();
                        const double num = rh.row(k).squaredNorm() - d + s_re * quad + sigma2 * r.squaredNorm();
                        const double nu2 = num / d;
                        direct += gnu * quad / d;
                        for (int dd = 0; dd < 3; ++dd) {
                            const auto dr = dw[dd].row(k);
                            const cd da = drh[dd](k, k);
                            const cd dx = (dry[dd](k) - x * da) / ak;
                            double dnum = 0.0;
                            for (int j = 0; j < n_k; ++j) {
                                if (j == k) continue;
                                dnum += 2.0 * (std::conj(rh(k, j)) * drh[dd](k, j)).real();
                            }
                            dnum += s_re * 2.0 * (dr * tmpl * r.adjoint())(0, 0).real();
                            if (dt_dir[dd] != nullptr) dnum += s_re * (r * (*dt_dir[dd]) * r.adjoint())(0, 0).real();
                            dnum += sigma2 * 2.0 * (dr * r.adjoint())(0, 0).real();
                            const double dden = 2.0 * (std::conj(ak) * da).real();
                            const double dnu = (dnum - nu2 * dden) / d;
                            acc[dd] += gxr * dx.real() + gxi * dx.imag() + gnu * dnu;
                        }
                    }
                    if (gs != nullptr) (*gs)[static_cast<std::size_t>(f) * n_t + t] += direct;
                }
            }
            if (gs != nullptr)
                for (int f = g.f_begin; f <= g.f_end; ++f)
                    for (int t = g.t_begin; t <= g.t_end; ++t) (*gs)[static_cast<std::size_t>(f) * n_t + t] += acc[0];
            if (gg != nullptr) (*gg)[0] += acc[1];
            if (gth != nullptr) (*gth)[0] += acc[2];
        }
    };
    return ad::custom({n_k, 3, n_f, n_t}, std::move(out), {s_tot, gamma, theta}, bw);
}

ad::Tensor demap_op(const ad::Tensor& eq, const Constellation& c, const std::vector<std::uint8_t>& re_mask) {
    const int n_k = eq.dim(0), n_f = eq.dim(2), n_t = eq.dim(3);
    if (eq.dim(1) != 3) throw std::invalid_argument("demap_op: expected 3 input planes");
    const std::size_t plane = static_cast<std::size_t>(n_f) * n_t;
    if (re_mask.size() != plane) throw std::invalid_argument("demap_op: mask size mismatch");
    const int m = c.bits_per_symbol();
    std::vector<double> out(static_cast<std::size_t>(n_k) * m * plane, 0.0);
    const auto& ev = eq.value();
    std::vector<double> llr(m);
    for (int k = 0; k < n_k; ++k) {
        for (std::size_t i = 0; i < plane; ++i) {
            if (!re_mask[i]) continue;
            const cd x(ev[(k * 3 + 0) * plane + i], ev[(k * 3 + 1) * plane + i]);
            demap_llr(x, ev[(k * 3 + 2) * plane + i], c, llr);
            for (int b = 0; b < m; ++b) out[(static_cast<std::size_t>(k) * m + b) * plane + i] = llr[b];
        }
    }
    auto bw = [c, re_mask, n_k, m, plane, ev](const std::vector<double>& gout,
                                             const std::vector<std::vector<double>*>& pg) {
        std::vector<double>* ge = pg[0];
        if (ge == nullptr) return;
        const int n = c.size();
        std::vector<double> metric(n), dmx(n), dmy(n), dmv(n);
        for (int k = 0; k < n_k; ++k) {
            for (std::size_t i = 0; i < plane; ++i) {
                if (!re_mask[i]) continue;
                const double xr = ev[(k * 3 + 0) * plane + i];
                const double xi = ev[(k * 3 + 1) * plane + i];
                const double nu2 = ev[(k * 3 + 2) * plane + i];
                if (!(nu2 > 0.0) || std::isinf(nu2)) continue;
                for (int s = 0; s < n; ++s) {
                    const double er = xr - c.point(s).real();
                    const double ei = xi - c.point(s).imag();
                    const double d2 = er * er + ei * ei;
                    metric[s] = -d2 / nu2;
                    dmx[s] = -2.0 * er / nu2;
                    dmy[s] = -2.0 * ei / nu2;
                    dmv[s] = d2 / (nu2 * nu2);
                }
                double gxr = 0.0, gxi = 0.0, gnu = 0.0;
                for (int b = 0; b < m; ++b) {
                    const double go = gout[(static_cast<std::size_t>(k) * m + b) * plane + i];
                    if (go == 0.0) continue;
                    for (int v = 0; v < 2; ++v) {
                        const auto& set = c.subset(b, v);
                        double mx = -std::numeric_limits<double>::infinity();
                        for (int s : set) mx = std::max(mx, metric[s]);
                        double z = 0.0, ax = 0.0, ay = 0.0, av = 0.0;
                        for (int s : set) {
                            const double p = std::exp(metric[s] - mx);
                            z += p;
                            ax += p * dmx[s];
                            ay += p * dmy[s];
                            av += p * dmv[s];
                        }
                        const double sign = v == 1 ? go : -go;
                        gxr += sign * ax / z;
                        gxi += sign * ay / z;
                        gnu += sign * av / z;
                    }
                }
                (*ge)[(k * 3 + 0) * plane + i] += gxr;
                (*ge)[(k * 3 + 1) * plane + i] += gxi;
                (*ge)[(k * 3 + 2) * plane + i] += gnu;
            }
        }
    };
    return ad::custom({n_k, m, n_f, n_t}, std::move(out), {eq}, bw);
}

ad::Tensor cnn_demap(const MlParams& p, const ad::Tensor& eq, const ad::Tensor& llr_conv) {
    if (llr_conv.dim(1) != p.bits_per_symbol) throw std::invalid_argument("cnn_demap: bits_per_symbol mismatch");
    const ad::Tensor llr_in = ad::tanh(ad::scale(llr_conv, 1.0 / kLlrInputScale));
    const ad::Tensor x = ad::concat({eq, llr_in}, 1);
    return ad::add(llr_conv, p.cnn_demap.forward(x));
}

MlContext::MlContext(const PilotPattern& pattern_, const PilotPattern& ul_pattern_, int bits_per_symbol)
    : pattern(pattern_), ul_pattern(ul_pattern_), groups(make_groups(pattern_, 0)),
      constellation(bits_per_symbol), mask(data_mask(pattern_)) {}

std::pair<ad::Tensor, ad::Tensor> bit_targets(const std::vector<std::vector<std::uint8_t>>& bits, const MlContext& ctx,
                                              int n_k) {
    const GridConfig& g = ctx.pattern.config();
    const int n_f = g.n_subcarriers, n_t = g.n_symbols;
    const int m = ctx.constellation.bits_per_symbol();
    const std::size_t plane = static_cast<std::size_t>(n_f) * n_t;
    const auto res = data_res(ctx.pattern);
    std::vector<double> tv(static_cast<std::size_t>(n_k) * m * plane, 0.0), wv(tv.size(), 0.0);
    if (static_cast<int>(bits.size()) != n_k) throw std::invalid_argument("bit_targets: one bit vector per user");
    for (int k = 0; k < n_k; ++k) {
        if (bits[k].size() != res.size() * m) throw std::invalid_argument("bit_targets: wrong bit count");
        for (std::size_t i = 0; i < res.size(); ++i) {
            const std::size_t re = static_cast<std::size_t>(res[i].f) * n_t + res[i].t;
            for (int b = 0; b < m; ++b) {
                const std::size_t idx = (static_cast<std::size_t>(k) * m + b) * plane + re;
                tv[idx] = bits[k][i * m + b];
                wv[idx] = 1.0;
            }
        }
    }
    return {ad::Tensor::constant({n_k, m, n_f, n_t}, std::move(tv)), ad::Tensor::constant({n_k, m, n_f, n_t}, std::move(wv))};
}

ForwardResult forward_uplink(const MlParams& p, const UplinkSample& s, const MlContext& ctx, Scheme scheme) {
    if (p.direction != Direction::Uplink) throw std::invalid_argument("forward_uplink: parameters are for the downlink");
    const int n_k = ctx.pattern.config().n_users;
    const ad::Tensor feats =
        ad::concat({uplink_feature_planes(ctx.pattern, s.sigma2), doppler_plane(p, s.doppler_raw, ctx.pattern)}, 1);
    ForwardResult r;
    r.error_scale = predict_error_scale(p, feats);
    const ad::Tensor s_tot = ad::sum_axis(r.error_scale, 0);
    const ad::Tensor gamma = ad::softplus(p.gamma_raw);
    const EqualizerContext ectx{&s.h_hat, &s.y, s.sigma2, &ctx.groups, &ctx.pattern};
    const ad::Tensor eq = grouped_equalizer(s_tot, gamma, p.theta_p, ectx);
    const ad::Tensor llr_conv = demap_op(eq, ctx.constellation, ctx.mask);
    r.llr = scheme == Scheme::MlReceiver ? cnn_demap(p, eq, llr_conv) : llr_conv;
    if (!s.bits.empty()) {
        const auto [targets, weights] = bit_targets(s.bits, ctx, n_k);
        r.loss = ad::bce_with_logits(r.llr, targets, weights);
    }
    return r;
}

ForwardResult forward_downlink(const MlParams& p, const DownlinkSample& s, const MlContext& ctx, Scheme scheme) {
    if (p.direction != Direction::Downlink) throw std::invalid_argument("forward_downlink: parameters are for the uplink");
    const GridConfig& g = ctx.pattern.config();
    const int n_k = g.n_users, n_f = g.n_subcarriers, n_t = g.n_symbols;
    const std::size_t plane = static_cast<std::size_t>(n_f) * n_t;
    const ad::Tensor feats = ad::concat(
        {downlink_feature_planes(ctx.pattern, ctx.ul_pattern, s.sigma2), doppler_plane(p, s.doppler_raw, ctx.pattern)}, 1);
    ForwardResult r;
    r.error_scale = predict_error_scale(p, feats);  // [N_k, 2, N_f, N_t]: v_hat, j_hat
    const ad::Tensor vj = ad::sum_axis(r.error_scale, 1);
    std::vector<double> u(static_cast<std::size_t>(n_k) * 2 * plane), inv_g2(static_cast<std::size_t>(n_k) * plane);
    for (int k = 0; k < n_k; ++k)
        for (int f = 0; f < n_f; ++f)
            for (int t = 0; t < n_t; ++t) {
                const std::size_t i = static_cast<std::size_t>(f) * n_t + t;
                const cd gh = s.g_hat(f, t, k);
                const double p2 = std::norm(gh);
                const cd uh = p2 == 0.0 ? cd(0) : s.r(f, t, k) / gh;
                u[(k * 2 + 0) * plane + i] = uh.real();
                u[(k * 2 + 1) * plane + i] = uh.imag();
                inv_g2[k * plane + i] = p2 == 0.0 ? std::numeric_limits<double>::infinity() : 1.0 / p2;
            }
    const ad::Tensor noise = ad::add(vj, ad::Tensor::full({n_k, 1, n_f, n_t}, s.sigma2));
    const ad::Tensor tau2 = ad::mul(noise, ad::Tensor::constant({n_k, 1, n_f, n_t}, std::move(inv_g2)));
    const ad::Tensor eq = ad::concat({ad::Tensor::constant({n_k, 2, n_f, n_t}, std::move(u)), tau2}, 1);
    const ad::Tensor llr_conv = demap_op(eq, ctx.constellation, ctx.mask);
    r.llr = scheme == Scheme::MlReceiver ? cnn_demap(p, eq, llr_conv) : llr_conv;
    if (!s.bits.empty()) {
        const auto [targets, weights] = bit_targets(s.bits, ctx, n_k);
        r.loss = ad::bce_with_logits(r.llr, targets, weights);
    }
    return r;
}

std::vector<std::vector<double>> llr_tensor_to_users(const ad::Tensor& llr, const MlContext& ctx) {
    const GridConfig& g = ctx.pattern.config();
    const int n_k = llr.dim(0), m = llr.dim(1), n_t = g.n_symbols;
    const std::size_t plane = static_cast<std::size_t>(g.n_subcarriers) * n_t;
    const auto res = data_res(ctx.pattern);
    std::vector<std::vector<double>> out(n_k, std::vector<double>(res.size() * m));
    for (int k = 0; k < n_k; ++k)
        for (std::size_t i = 0; i < res.size(); ++i)
            for (int b = 0; b < m; ++b)
                out[k][i * m + b] = llr.value()[(static_cast<std::size_t>(k) * m + b) * plane +
                                                static_cast<std::size_t>(res[i].f) * n_t + res[i].t];
    return out;
}

namespace {

template <typename Sample, typename Forward>
TrainResult train_impl(const std::vector<Sample>& data, const MlContext& ctx, Scheme scheme, MlParams& params,
                       const TrainOptions& opt, Rng& rng, ad::Adam* adam, Forward fwd) {
    if (!is_ml(scheme)) throw std::invalid_argument("train: scheme must be ml_chest or ml_receiver");
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    if (opt.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    std::unique_ptr<ad::Adam> own;
    if (adam == nullptr) {
        own = std::make_unique<ad::Adam>(params.trainable(scheme), opt.learning_rate);
        adam = own.get();
    }
    const auto start = std::chrono::steady_clock::now();
    TrainResult res;
    std::vector<std::size_t> order(data.size());
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t b0 = 0; b0 < order.size(); b0 += opt.batch_size) {
            const std::size_t b1 = std::min(order.size(), b0 + opt.batch_size);
            const double inv = 1.0 / static_cast<double>(b1 - b0);
            adam->zero_grad();
            double batch_loss = 0.0;
            for (std::size_t i = b0; i < b1; ++i) {
                const ForwardResult fr = fwd(params, data[order[i]], ctx, scheme);
                const double l = fr.loss.item();
                if (!std::isfinite(l)) {
                    throw std::runtime_error("train: non-finite loss at step " + std::to_string(res.steps) +
                                             ", sample " + std::to_string(order[i]));
                }
                batch_loss += l * inv;
                ad::backward(ad::scale(fr.loss, inv), i > b0);
            }
            adam->step();
            ++res.steps;
            res.log.push_back({res.steps, batch_loss, params.gamma()});
            if (opt.verbose) {
                std::cerr << "step " << res.steps << " loss " << std::setprecision(6) << batch_loss << " gamma "
                          << params.gamma() << '\n';
            }
            const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            if ((opt.max_steps > 0 && res.steps >= opt.max_steps) ||
                (opt.time_budget_s > 0 && elapsed >= opt.time_budget_s)) {
                return res;
            }
        }
    }
    return res;
}

}  // namespace

TrainResult train(const std::vector<UplinkSample>& data, const MlContext& ctx, Scheme scheme, MlParams& params,
                  const TrainOptions& opt, Rng& rng, ad::Adam* adam) {
    return train_impl(data, ctx, scheme, params, opt, rng, adam, forward_uplink);
}

TrainResult train(const std::vector<DownlinkSample>& data, const MlContext& ctx, Scheme scheme, MlParams& params,
                  const TrainOptions& opt, Rng& rng, ad::Adam* adam) {
    return train_impl(data, ctx, scheme, params, opt, rng, adam, forward_downlink);
}

void write_train_log(const std::string& path, const std::vector<TrainLogEntry>& log) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "step,loss,gamma\n" << std::setprecision(10);
    for (const auto& e : log) os << e.step << ',' << e.loss << ',' << e.gamma << '\n';
}

}  // namespace mumimo
