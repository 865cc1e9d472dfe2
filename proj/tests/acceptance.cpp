// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset; exits non-zero if any selected one fails.

#include "mumimo/autodiff.hpp"
#include "mumimo/coding.hpp"
#include "mumimo/downlink.hpp"
#include "mumimo/estimator.hpp"
#include "mumimo/harness.hpp"
#include "mumimo/ml_rx.hpp"
#include "mumimo/uplink_rx.hpp"

#include "test_util.hpp"

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace mumimo;
using testutil::max_abs;
using testutil::rel_err;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Tolerances.
constexpr double kTolGroupW = 1e-6;
constexpr double kTolPerReW = 1e-10;
constexpr double kTolNu2 = 0.05;
constexpr double kTolTau2 = 0.10;
constexpr double kTolLlr = 1e-9;
constexpr double kAwgnSe = 3.0;
constexpr double kTolFdPrimitive = 1e-4;
constexpr double kTolFdEndToEnd = 1e-3;
constexpr double kMinPearson = 0.5;
constexpr double kOrderingSe = 3.0;
constexpr double kMinRelReduction = 0.10;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// ---------------------------------------------------------------- 1

Outcome grouped_lmmse_oracle() {
    Rng rng(101);
    std::uniform_int_distribution<int> nf(1, 2), nt(1, 7);
    std::uniform_real_distribution<double> s2u(0.01, 0.5);
    double worst_group = 0, worst_re = 0;
    for (int inst = 0; inst < 20; ++inst) {
        const int n = nf(rng) * nt(rng);
        std::vector<CMat> h, e;
        for (int i = 0; i < n; ++i) {
            h.push_back(testutil::random_cmat(4, 2, rng));
            e.push_back(testutil::random_psd(4, rng, 0.2));
        }
        const double s2 = s2u(rng);
        const CMat w = grouped_lmmse_weights(h, e, s2);
        worst_group = std::max(worst_group, max_abs(w - testutil::minimize_group_mse(h, e, s2)));

        // One RE: push-through form (H^H R^-1 H + I)^-1 H^H R^-1 with R = E + sigma^2 I.
        const std::vector<CMat> h1{h[0]}, e1{e[0]};
        const CMat r_inv = (e[0] + s2 * CMat::Identity(4, 4)).inverse();
        const CMat ref = (h[0].adjoint() * r_inv * h[0] + CMat::Identity(2, 2)).inverse() * h[0].adjoint() * r_inv;
        worst_re = std::max(worst_re, max_abs(grouped_lmmse_weights(h1, e1, s2) - ref));
    }
    return {worst_group < kTolGroupW && worst_re < kTolPerReW,
            "20 instances, max |W - W_num| = " + fmt("%.2e", worst_group) + ", 1x1 vs per-RE = " + fmt("%.2e", worst_re)};
}

// ---------------------------------------------------------------- 2

CMat psd_sqrt(const CMat& a) {
    Eigen::SelfAdjointEigenSolver<CMat> es(a);
    const Eigen::VectorXd l = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * l.asDiagonal() * es.eigenvectors().adjoint();
}

GridConfig small_grid(int m) {
    GridConfig g;
    g.n_subcarriers = 24;
    g.n_bs_antennas = 4;
    g.n_users = 2;
    g.bits_per_symbol = m;
    g.pilot_kind = PilotKind::TwoP;
    return g;
}

// Uplink: fixed H_hat, per-user aging error D_k ~ CN(0, E_k) with E_k the
// Monte Carlo error covariance of perfect pilot CSI at 120 km/h.
double uplink_nu2_worst() {
    const GridConfig g = small_grid(4);
    const PilotPattern pattern(g);
    ChannelModelConfig ch;
    ch.user_speeds_mps = {kmh_to_mps(120), kmh_to_mps(120)};
    const UplinkEstimator est = UplinkEstimator::perfect(pattern);
    const EqualizerGroup grp = make_groups(pattern, 0).front();
    const double s2 = 0.1;

    std::vector<Re> res;
    for (int f = grp.f_begin; f <= grp.f_end; ++f)
        for (int t = grp.t_begin; t <= grp.t_end; ++t) res.push_back({f, t});
    std::vector<std::vector<CMat>> ek(res.size(), std::vector<CMat>(2, CMat::Zero(4, 4)));
    Rng rng(202);
    const int n_mc = 1000;
    for (int i = 0; i < n_mc; ++i) {
        const ChannelTensor h = generate_channel(ch, g, rng);
        const ChannelTensor hh = est.estimate_from_channel(h, s2, rng);
        for (std::size_t r = 0; r < res.size(); ++r) {
            const CMat d = h.at(res[r].f, res[r].t) - hh.at(res[r].f, res[r].t);
            for (int k = 0; k < 2; ++k) ek[r][k] += d.col(k) * d.col(k).adjoint() / double(n_mc);
        }
    }
    const ChannelTensor h0 = generate_channel(ch, g, rng);
    const ChannelTensor hh0 = est.estimate_from_channel(h0, s2, rng);
    std::vector<CMat> hg, eg;
    for (std::size_t r = 0; r < res.size(); ++r) {
        hg.push_back(hh0.at(res[r].f, res[r].t));
        eg.push_back(ek[r][0] + ek[r][1]);
    }
    const CMat w = grouped_lmmse_weights(hg, eg, s2);

    const Constellation c(4);
    std::uniform_int_distribution<int> sym(0, c.size() - 1);
    double worst = 0;
    for (std::size_t r = 0; r < res.size(); ++r) {
        if (!pattern.is_data(res[r].f, res[r].t)) continue;
        const CMat& hr = hg[r];
        const CVec d = unbias(w, hr);
        const CMat sq0 = psd_sqrt(ek[r][0]), sq1 = psd_sqrt(ek[r][1]);
        std::vector<double> err2(2, 0.0);
        std::vector<cd> errm(2, 0.0);
        const int n_draws = 100000;
        for (int i = 0; i < n_draws; ++i) {
            CVec x(2), z0(4), z1(4), n(4);
            for (int k = 0; k < 2; ++k) x(k) = c.point(sym(rng));
            for (int a = 0; a < 4; ++a) {
                z0(a) = complex_normal(rng, 1.0);
                z1(a) = complex_normal(rng, 1.0);
                n(a) = complex_normal(rng, s2);
            }
            CMat ht = hr;
            ht.col(0) += sq0 * z0;
            ht.col(1) += sq1 * z1;
            const CVec xh = equalize(d, w, ht * x + n);
            for (int k = 0; k < 2; ++k) {
                err2[k] += std::norm(xh(k) - x(k));
                errm[k] += xh(k) - x(k);
            }
        }
        for (int k = 0; k < 2; ++k) {
            const double var = err2[k] / n_draws - std::norm(errm[k] / double(n_draws));
            worst = std::max(worst, std::abs(var / post_eq_noise_var(w, k, hr, eg[r], s2) - 1.0));
        }
    }
    return worst;
}

// Downlink: E|r_k - g_hat u_k|^2 from simulated reception against the
// independent Monte Carlo oracle v + j + sigma^2 (= tau^2 |g_hat|^2),
// binned per (symbol, user) and averaged over subcarriers.
double downlink_tau2_worst(bool perfect_ue) {
    const GridConfig g = small_grid(2);
    const PilotPattern pattern(g);
    ChannelModelConfig ch;
    ch.user_speeds_mps = {kmh_to_mps(50), kmh_to_mps(50)};
    const double s2 = 0.1;
    Rng rng(303);
    const UplinkEstimator bs = UplinkEstimator::lmmse(pattern, estimate_pilot_covariances(ch, pattern, 2000, rng), s2);
    const ErrorStats bs_e = bs.pilot_error_stats();
    std::vector<PilotLmmse> filters;
    if (!perfect_ue)
        for (const CMat& o : estimate_omega(ch, bs, pattern, s2, 1000, rng)) filters.emplace_back(o, s2);

    const int n_mc = 6000, n_f = g.n_subcarriers, n_t = g.n_symbols;
    Rng oracle_rng(304);
    const DownlinkStats oracle = downlink_oracle(ch, bs, pattern, perfect_ue ? nullptr : &filters, s2, n_mc, oracle_rng);

    const Constellation c(2);
    std::uniform_int_distribution<int> sym(0, c.size() - 1);
    std::vector<double> emp(n_t * 2, 0.0), ref(n_t * 2, 0.0);
    std::vector<int> cnt(n_t * 2, 0);
    for (int i = 0; i < n_mc; ++i) {
        const DownlinkRealization real = draw_downlink_realization(ch, bs, bs_e, s2, rng);
        UeEstimate est;
        if (perfect_ue) {
            est = ue_estimate_perfect(real.g, pattern);
        } else {
            CTensor3 r(n_f, n_t, 2);
            for (int k = 0; k < 2; ++k)
                for (const Re& p : pattern.pilots(k)) r(p.f, p.t, k) = real.g(p.f, p.t, k, k) + complex_normal(rng, s2);
            est = ue_estimate(r, pattern, filters);
        }
        for (int f = 0; f < n_f; ++f)
            for (int t = 0; t < n_t; ++t) {
                if (!pattern.is_data(f, t)) continue;
                const CVec u = CVec::NullaryExpr(2, [&](Eigen::Index) { return c.point(sym(rng)); });
                const auto gm = real.g.at(f, t);
                for (int k = 0; k < 2; ++k) {
                    const cd r = (gm.row(k) * u).value() + complex_normal(rng, s2);
                    emp[t * 2 + k] += std::norm(r - est.g_hat(f, t, k) * u(k));
                    if (i == 0) {
                        ref[t * 2 + k] += oracle.v(f, t, k) + oracle.j(f, t, k) + s2;
                        ++cnt[t * 2 + k];
                    }
                }
            }
    }
    double worst = 0;
    for (int b = 0; b < n_t * 2; ++b) {
        if (cnt[b] == 0) continue;
        const double e = emp[b] / (static_cast<double>(n_mc) * cnt[b]);
        worst = std::max(worst, std::abs(e / (ref[b] / cnt[b]) - 1.0));
    }
    return worst;
}

Outcome noise_variance_fidelity() {
    const double ul = uplink_nu2_worst();
    const double dl_p = downlink_tau2_worst(true);
    const double dl_l = downlink_tau2_worst(false);
    return {ul < kTolNu2 && dl_p < kTolTau2 && dl_l < kTolTau2,
            "uplink nu2 max rel dev " + fmt("%.2f%%", 100 * ul) + " (1e5 draws/RE), downlink tau2 " +
                fmt("%.2f%%", 100 * dl_p) + " (perfect UE CSI) / " + fmt("%.2f%%", 100 * dl_l) + " (UE LMMSE)"};
}

// ---------------------------------------------------------------- 3

Outcome demapper_exactness() {
    Rng rng(404);
    std::uniform_real_distribution<double> lg(-2.0, 1.0);
    double worst = 0, worst_qpsk = 0;
    for (int m : {2, 4, 6}) {
        const Constellation c(m);
        for (int i = 0; i < 1000; ++i) {
            const cd x = complex_normal(rng, 1.5);
            const double nu2 = std::pow(10.0, lg(rng));
            const auto got = demap_llr(x, nu2, c);
            const auto ref = testutil::brute_force_llr(x, nu2, c.points(), m);
            for (int b = 0; b < m; ++b)
                worst = std::max(worst, std::abs(got[b] - ref[b]) / std::max(1.0, std::abs(ref[b])));
            if (m == 2) {
                const double k = 2.0 * std::sqrt(2.0) / nu2;
                worst_qpsk = std::max(worst_qpsk, std::abs(got[0] - k * x.real()) / std::max(1.0, std::abs(got[0])));
                worst_qpsk = std::max(worst_qpsk, std::abs(got[1] - k * x.imag()) / std::max(1.0, std::abs(got[1])));
            }
        }
    }
    return {worst < kTolLlr && worst_qpsk < kTolLlr,
            "3000 points, max dev vs enumeration " + fmt("%.2e", worst) + ", QPSK closed form " + fmt("%.2e", worst_qpsk)};
}

// ---------------------------------------------------------------- 4

Outcome awgn_anchor() {
    SimConfig c;
    c.direction = Direction::Uplink;
    c.scheme = Scheme::PerfectCsi;
    c.grid.n_bs_antennas = 1;
    c.grid.n_users = 1;
    c.grid.bits_per_symbol = 2;
    c.channel.tap_delays_s = {0.0};
    c.channel.tap_powers = {1.0};
    c.speed = {0.0, 0.0};
    c.snr_mode = "ebn0";
    c.snr_db = {0, 2, 4, 6};
    c.n_rgs = 60;
    c.code = "uncoded";
    c.seed = 11;
    bool pass = true;
    std::string detail;
    long long bits = 0;
    for (const ResultRow& r : run_ber(c)) {
        bits = r.total_bits;
        const double ref = testutil::q_function(std::sqrt(2.0 * std::pow(10.0, r.snr_db / 10.0)));
        const double se = std::sqrt(ref * (1 - ref) / r.total_bits);
        const double z = (r.ber - ref) / se;
        pass = pass && r.total_bits >= 100000 && std::abs(z) < kAwgnSe;
        detail += fmt("%g dB: ", r.snr_db) + fmt("%.3e", r.ber) + " vs " + fmt("%.3e", ref) + fmt(" (%+.1f SE); ", z);
    }
    detail += std::to_string(bits) + " bits/point";
    return {pass, detail};
}

// ---------------------------------------------------------------- 5

Outcome ldpc_sanity() {
    const LdpcCode code = ieee80211n_1296_r12();
    // Dense parity rows straight from the check lists.
    std::vector<std::vector<std::uint8_t>> dense(code.m(), std::vector<std::uint8_t>(code.n(), 0));
    for (int c = 0; c < code.m(); ++c)
        for (int v : code.rows()[c]) dense[c][v] ^= 1;
    auto zero_syndrome = [&](const std::vector<std::uint8_t>& x) {
        for (const auto& row : dense) {
            int acc = 0;
            for (int v = 0; v < code.n(); ++v) acc ^= row[v] & x[v];
            if (acc) return false;
        }
        return true;
    };
    Rng rng(505);
    std::bernoulli_distribution coin(0.5);
    auto awgn = [&](const std::vector<std::uint8_t>& cw, double ebn0_db) {
        const double s2 = 1.0 / (2.0 * code.rate() * std::pow(10.0, ebn0_db / 10.0));
        std::normal_distribution<double> nd(0.0, std::sqrt(s2));
        std::vector<double> llr(cw.size());
        for (std::size_t i = 0; i < cw.size(); ++i) llr[i] = 2.0 * ((cw[i] ? -1.0 : 1.0) + nd(rng)) / s2;
        return llr;
    };

    long long bit_errors = 0, syndrome_fail = 0, n_converged = 0, over_cap = 0;
    int max_iter_seen = 0;
    for (int i = 0; i < 1000; ++i) {
        std::vector<std::uint8_t> msg(code.k());
        for (auto& b : msg) b = coin(rng);
        const auto cw = code.encode(msg);
        const DecodeResult r = bp_decode(code, awgn(cw, 5.0));
        for (int j = 0; j < code.k(); ++j) bit_errors += r.bits[j] != msg[j];
        if (r.converged) {
            ++n_converged;
            syndrome_fail += !zero_syndrome(r.bits);
        }
        max_iter_seen = std::max(max_iter_seen, r.iterations);
    }
    // Hard inputs at low SNR: decodes that do not converge stop at the cap.
    int unconverged_at_cap = 0, unconverged = 0;
    for (int i = 0; i < 50; ++i) {
        const auto cw = code.encode(std::vector<std::uint8_t>(code.k(), 0));
        const DecodeResult r = bp_decode(code, awgn(cw, -1.0), SimConfig{}.bp_iterations);
        over_cap += r.iterations > 40;
        if (!r.converged) {
            ++unconverged;
            unconverged_at_cap += r.iterations == 40;
        } else {
            ++n_converged;
            syndrome_fail += !zero_syndrome(r.bits);
        }
    }
    const DecodeResult z = bp_decode(code, std::vector<double>(code.n(), 0.0));
    const bool pass = bit_errors == 0 && syndrome_fail == 0 && over_cap == 0 && unconverged == unconverged_at_cap &&
                      unconverged > 0 && z.iterations == 40 && !z.converged && SimConfig{}.bp_iterations == 40;
    return {pass, "1000 codewords at Eb/N0 5 dB: " + std::to_string(bit_errors) + " bit errors (max " +
                      std::to_string(max_iter_seen) + " iterations); " + std::to_string(n_converged) +
                      " converged decodes, " + std::to_string(syndrome_fail) + " nonzero syndromes; " +
                      std::to_string(unconverged) + " unconverged at -1 dB all stopped at 40; all-zero input ran " +
                      std::to_string(z.iterations)};
}

// ---------------------------------------------------------------- 6

ad::Tensor rand_param(const ad::Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(ad::numel(s));
    for (double& x : v) x = u(rng);
    return ad::Tensor::parameter(s, v);
}

// Worst relative error of backward() against central differences over all
// input entries; loss = sum(op(inputs) * random weights).
double fd_worst(const std::vector<ad::Tensor>& inputs, const std::function<ad::Tensor()>& op, Rng& rng,
                double h = 1e-6) {
    const ad::Tensor probe = op();
    std::normal_distribution<double> nd;
    std::vector<double> wv(probe.numel());
    for (double& x : wv) x = nd(rng);
    const ad::Tensor w = ad::Tensor::constant(probe.shape(), wv);
    auto loss = [&]() { return ad::sum(ad::mul(op(), w)); };
    for (ad::Tensor t : inputs) t.zero_grad();
    ad::backward(loss());
    double worst = 0;
    for (ad::Tensor t : inputs)
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const double g = t.grad().empty() ? 0.0 : t.grad()[i];
            const double fd = testutil::central_diff([&] { return loss().item(); }, t.value()[i], h);
            worst = std::max(worst, rel_err(g, fd, 1e-6));
        }
    return worst;
}

Outcome gradient_integrity() {
    Rng rng(606);
    std::map<std::string, double> prim;
    const ad::Tensor a = rand_param({2, 3}, rng), b = rand_param({2, 3}, rng);
    prim["add"] = fd_worst({a, b}, [&] { return ad::add(a, b); }, rng);
    prim["sub"] = fd_worst({a, b}, [&] { return ad::sub(a, b); }, rng);
    prim["mul"] = fd_worst({a, b}, [&] { return ad::mul(a, b); }, rng);
    prim["scale"] = fd_worst({a}, [&] { return ad::scale(a, -1.7); }, rng);
    prim["softplus"] = fd_worst({a}, [&] { return ad::softplus(a); }, rng);
    prim["sigmoid"] = fd_worst({a}, [&] { return ad::sigmoid(a); }, rng);
    prim["tanh"] = fd_worst({a}, [&] { return ad::tanh(a); }, rng);
    const ad::Tensor kinked = ad::Tensor::parameter({6}, {-1.2, -0.6, -0.1, 0.2, 0.5, 1.3});
    prim["relu"] = fd_worst({kinked}, [&] { return ad::relu(kinked); }, rng);

    const ad::Tensor x3 = rand_param({2, 3, 4}, rng), y3 = rand_param({2, 1, 4}, rng);
    prim["concat"] = fd_worst({x3, y3}, [&] { return ad::concat({x3, y3}, 1); }, rng);
    prim["slice"] = fd_worst({x3}, [&] { return ad::slice(x3, 2, 1, 3); }, rng);
    prim["reshape"] = fd_worst({x3}, [&] { return ad::reshape(x3, {4, 6}); }, rng);
    prim["sum_axis"] = fd_worst({x3}, [&] { return ad::sum_axis(x3, 2); }, rng);
    prim["repeat_axis"] = fd_worst({y3}, [&] { return ad::repeat_axis(y3, 1, 3); }, rng);
    prim["sum"] = fd_worst({x3}, [&] { return ad::sum(x3); }, rng);
    prim["mean"] = fd_worst({x3}, [&] { return ad::mean(x3); }, rng);
    const ad::Tensor x4 = rand_param({2, 3, 5, 6}, rng);
    prim["mean_hw"] = fd_worst({x4}, [&] { return ad::mean_hw(x4); }, rng);
    const ad::Tensor wc = rand_param({4, 3, 3, 5}, rng), bc = rand_param({4}, rng);
    prim["conv2d"] = fd_worst({x4, wc, bc}, [&] { return ad::conv2d(x4, wc, bc); }, rng);
    const ad::Tensor xd = rand_param({3, 5}, rng), wd = rand_param({2, 5}, rng), bd = rand_param({2}, rng);
    prim["dense"] = fd_worst({xd, wd, bd}, [&] { return ad::dense(xd, wd, bd); }, rng);
    const ad::Tensor logits = rand_param({2, 4}, rng, -3.0, 3.0);
    const ad::Tensor targets = ad::Tensor::constant({2, 4}, {1, 0, 0, 1, 1, 1, 0, 0});
    const ad::Tensor weights = ad::Tensor::constant({2, 4}, {1, 1, 0, 1, 0.5, 1, 1, 2});
    prim["bce_with_logits"] = std::max(fd_worst({logits}, [&] { return ad::bce_with_logits(logits, targets); }, rng),
                                       fd_worst({logits}, [&] { return ad::bce_with_logits(logits, targets, weights); }, rng));

    // Receiver-specific ops on a small uplink grid.
    const GridConfig g = small_grid(4);
    const PilotPattern pattern(g);
    ChannelModelConfig ch;
    ch.speed_lo_mps = kmh_to_mps(110);
    ch.speed_hi_mps = kmh_to_mps(130);
    const double s2 = 0.05;
    const UplinkEstimator est =
        UplinkEstimator::lmmse(pattern, estimate_pilot_covariances(ch, pattern, 1000, rng), s2);
    const MlContext ctx(pattern, pattern, 4);
    UplinkSample s;
    {
        const ChannelTensor h = generate_channel(ch, g, rng);
        std::bernoulli_distribution coin(0.5);
        s.bits.assign(2, std::vector<std::uint8_t>(pattern.n_data_res() * 4));
        for (auto& v : s.bits)
            for (auto& x : v) x = coin(rng);
        s.y = apply_uplink(h, build_uplink_symbols(s.bits, pattern, ctx.constellation), s2, rng);
        s.h_hat = uplink_half(est.estimate(s.y, h));
        s.sigma2 = s2;
        s.doppler_raw = doppler_feature(s.h_hat, pattern);
    }
    {
        const int n_f = g.n_subcarriers, n_t = g.n_symbols;
        const EqualizerContext ectx{&s.h_hat, &s.y, s2, &ctx.groups, &pattern};
        const ad::Tensor st = rand_param({1, 1, n_f, n_t}, rng, 0.02, 0.2);
        const ad::Tensor gm = ad::Tensor::parameter({1}, {0.9}), th = ad::Tensor::parameter({1}, {0.4});
        prim["grouped_equalizer"] = fd_worst({st, gm, th}, [&] { return grouped_equalizer(st, gm, th, ectx); }, rng);
        std::vector<double> v(2 * 3 * 12);
        std::normal_distribution<double> nd(0.0, 0.8);
        std::uniform_real_distribution<double> un(0.05, 0.6);
        for (int k = 0; k < 2; ++k)
            for (int i = 0; i < 12; ++i) {
                v[(k * 3 + 0) * 12 + i] = nd(rng);
                v[(k * 3 + 1) * 12 + i] = nd(rng);
                v[(k * 3 + 2) * 12 + i] = un(rng);
            }
        const ad::Tensor eq = ad::Tensor::parameter({2, 3, 3, 4}, v);
        const std::vector<std::uint8_t> mask(12, 1);
        prim["demap_op"] = fd_worst({eq}, [&] { return demap_op(eq, ctx.constellation, mask); }, rng);
    }

    std::string worst_name;
    double worst_prim = 0;
    for (const auto& [name, e] : prim)
        if (e >= worst_prim) {
            worst_prim = e;
            worst_name = name;
        }

    // End to end: gamma plus ten weights sampled over all networks.
    MlParams p = init_ml_params(Direction::Uplink, 4, 607);
    for (auto& t : p.trainable(Scheme::MlReceiver)) t.zero_grad();
    ad::backward(forward_uplink(p, s, ctx, Scheme::MlReceiver).loss);
    auto f = [&]() { return forward_uplink(p, s, ctx, Scheme::MlReceiver).loss.item(); };
    double worst_e2e = rel_err(p.gamma_raw.grad()[0], testutil::central_diff(f, p.gamma_raw.value()[0], 1e-5), 1e-7);
    std::vector<ad::Tensor> weights_pool;
    for (const Cnn* net : {&p.cnn_e, &p.cnn_l, &p.cnn_demap})
        for (const auto& l : net->layers) weights_pool.push_back(l.w);
    std::uniform_int_distribution<std::size_t> pick_t(0, weights_pool.size() - 1);
    for (int i = 0; i < 10; ++i) {
        ad::Tensor t = weights_pool[pick_t(rng)];
        const std::size_t idx = std::uniform_int_distribution<std::size_t>(0, t.numel() - 1)(rng);
        const double g_ad = t.grad().empty() ? 0.0 : t.grad()[idx];
        worst_e2e = std::max(worst_e2e, rel_err(g_ad, testutil::central_diff(f, t.value()[idx], 1e-5), 1e-7));
    }
    return {worst_prim < kTolFdPrimitive && worst_e2e < kTolFdEndToEnd,
            std::to_string(prim.size()) + " primitives, worst rel err " + fmt("%.2e", worst_prim) + " (" + worst_name +
                "); end-to-end gamma + 10 weights " + fmt("%.2e", worst_e2e)};
}

// ---------------------------------------------------------------- 7, 8

struct SeedResult {
    double pearson = 0;
    double e_fast = 0, e_slow = 0;
    std::vector<ResultRow> base, perfect, ml;
    double train_s = 0;
};

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i] / n;
        mb += b[i] / n;
    }
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

constexpr double kLearnSnrDb = 10.0;
constexpr int kLearnRgs = 20;

SeedResult train_and_evaluate(std::uint64_t seed) {
    SimConfig cfg;
    cfg.seed = seed;
    cfg.scheme = Scheme::MlReceiver;
    cfg.code = "uncoded";
    cfg.training.epochs = 15;
    cfg.speed = {110, 130};
    cfg.snr_db = {10, 20};
    cfg.n_rgs = 100;
    Simulator sim(cfg);
    SeedResult out;

    const auto t0 = std::chrono::steady_clock::now();
    const TrainOutcome trained = train_from_config(cfg, sim);
    out.train_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const MlParams& p = trained.params;

    // Mean predicted ||E_hat||_F per RE over fresh grids at fixed speeds.
    const PilotPattern& pattern = sim.pattern();
    const int n_f = cfg.grid.n_subcarriers, n_t = cfg.grid.n_symbols, n_m = cfg.grid.n_bs_antennas;
    const double s2 = config_sigma2(cfg, kLearnSnrDb);
    auto mean_pred = [&](double kmh) {
        std::vector<double> acc(static_cast<std::size_t>(n_f) * n_t, 0.0);
        for (int i = 0; i < kLearnRgs; ++i) {
            const RgRecord rec = sim.draw(derive_seed(seed, 0x4c45524e, i), s2, {kmh, kmh});
            const UplinkSample smp = sim.uplink_sample(rec);
            const ad::Tensor feats = ad::concat(
                {uplink_feature_planes(pattern, s2), doppler_plane(p, smp.doppler_raw, pattern)}, 1);
            const ErrorStats e = predict_error_stats(p, feats, n_m);
            for (int f = 0; f < n_f; ++f)
                for (int t = 0; t < n_t; ++t) acc[f * n_t + t] += e.at(f, t).norm() / kLearnRgs;
        }
        return acc;
    };
    const auto fast = mean_pred(120), slow = mean_pred(50);
    const ErrorStats& oracle = sim.oracle_e({120, 120}, s2, PilotCsi::Lmmse);
    std::vector<double> a, b;
    double sf = 0, ss = 0;
    for (int f = 0; f < n_f; ++f)
        for (int t = 0; t < n_t; ++t) {
            if (!pattern.is_data(f, t)) continue;
            a.push_back(fast[f * n_t + t]);
            b.push_back(oracle.at(f, t).norm());
            sf += fast[f * n_t + t];
            ss += slow[f * n_t + t];
        }
    out.pearson = pearson(a, b);
    out.e_fast = sf / a.size();
    out.e_slow = ss / a.size();

    for (Scheme s : {Scheme::Baseline, Scheme::PerfectCsi, Scheme::MlReceiver}) {
        SimConfig c = cfg;
        c.scheme = s;
        auto rows = run_ber(c, s == Scheme::MlReceiver ? &p : nullptr, &sim);
        (s == Scheme::Baseline ? out.base : s == Scheme::PerfectCsi ? out.perfect : out.ml) = std::move(rows);
    }
    return out;
}

const std::vector<SeedResult>& seed_results() {
    static std::vector<SeedResult> results;
    if (results.empty())
        for (std::uint64_t seed : {1, 2, 3}) {
            results.push_back(train_and_evaluate(seed));
            std::cerr << "seed " << seed << " trained in " << fmt("%.0f s", results.back().train_s) << '\n';
        }
    return results;
}

Outcome error_statistics_learning() {
    int wins = 0;
    std::string detail;
    int seed = 1;
    for (const SeedResult& r : seed_results()) {
        const bool ok = r.pearson > kMinPearson && r.e_fast > r.e_slow;
        wins += ok;
        detail += "seed " + std::to_string(seed++) + ": r = " + fmt("%.3f", r.pearson) + ", mean |E_hat| 120/50 km/h " +
                  fmt("%.3g", r.e_fast) + "/" + fmt("%.3g", r.e_slow) + (ok ? " ok; " : " miss; ");
    }
    return {wins >= 2, detail + std::to_string(wins) + "/3 seeds"};
}

double se_of(const ResultRow& r) { return std::sqrt(std::max(r.ber * (1 - r.ber), 1e-12) / r.total_bits); }

Outcome scheme_ordering() {
    int wins = 0;
    std::string detail;
    int seed = 1;
    for (const SeedResult& r : seed_results()) {
        bool ok = true;
        for (std::size_t i = 0; i < r.base.size(); ++i) {
            const ResultRow &b = r.base[i], &pc = r.perfect[i], &ml = r.ml[i];
            ok = ok && pc.ber <= b.ber + kOrderingSe * std::hypot(se_of(pc), se_of(b));
            ok = ok && ml.ber <= b.ber + kOrderingSe * std::hypot(se_of(ml), se_of(b));
        }
        const double red = 1.0 - r.ml.back().ber / r.base.back().ber;
        ok = ok && red >= kMinRelReduction;
        wins += ok;
        detail += "seed " + std::to_string(seed++) + ":";
        for (std::size_t i = 0; i < r.base.size(); ++i)
            detail += fmt(" %g dB", r.base[i].snr_db) + " base/perfect/ml " + fmt("%.3e", r.base[i].ber) + "/" +
                      fmt("%.3e", r.perfect[i].ber) + "/" + fmt("%.3e", r.ml[i].ber);
        detail += ", reduction " + fmt("%.1f%%", 100 * red) + (ok ? " ok; " : " miss; ");
    }
    return {wins >= 2, detail + std::to_string(wins) + "/3 seeds"};
}

// ---------------------------------------------------------------- 9, 10

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

int run_cli(const std::string& args, const fs::path& out) {
    const std::string cmd = std::string(MUMIMO_SIM_BIN) + " " + args + " >" + out.string() + " 2>/dev/null";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path scratch(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("mumimo_acceptance_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

Outcome configuration_fidelity() {
    const fs::path dir = scratch("config");
    if (run_cli("show-config", dir / "show.json") != 0) return {false, "show-config failed"};
    const json j = json::parse(slurp(dir / "show.json"));
    std::vector<std::string> bad;
    auto expect = [&](const char* what, const json& got, const json& want) {
        if (got != want) bad.push_back(std::string(what) + "=" + got.dump());
    };
    expect("N_k", j["grid"]["n_users"], 4);
    expect("N_m", j["grid"]["n_bs_antennas"], 16);
    expect("N_f", j["grid"]["n_subcarriers"], 72);
    expect("N_t", j["grid"]["n_symbols"], 14);
    expect("M", j["grid"]["bits_per_symbol"], 4);
    expect("f_c", j["channel"]["carrier_freq_hz"], 3.5e9);
    expect("delta_f", j["channel"]["subcarrier_spacing_hz"], 15e3);
    expect("lr", j["training"]["learning_rate"], 1e-3);
    expect("B_s", j["training"]["batch_size"], 27);
    expect("rate", j["derived"]["code"]["rate"], 0.5);
    expect("code length", j["derived"]["code"]["length"], 1296);
    expect("1P ranges", j["derived"]["speed_ranges_kmh"]["1P"], json::parse("[[0,5],[10,20],[25,35]]"));
    expect("2P ranges", j["derived"]["speed_ranges_kmh"]["2P"], json::parse("[[40,60],[70,90],[110,130]]"));
    const double gamma_cli = j["derived"]["gamma_init"].get<double>();
    const double gamma_init = init_ml_params(Direction::Uplink, 4, 1).gamma();
    if (std::abs(gamma_init - kPi) > 1e-12) bad.push_back("gamma init " + fmt("%.15g", gamma_init));
    if (std::abs(gamma_cli - kPi) > 1e-12) bad.push_back("derived gamma " + fmt("%.15g", gamma_cli));
    std::string detail = bad.empty() ? "13 Table 1 fields match, gamma init = " + fmt("%.12f", gamma_init) : "mismatch:";
    for (const auto& s : bad) detail += " " + s;
    return {bad.empty(), detail};
}

Outcome determinism() {
    const fs::path root = scratch("determinism");
    json cfg = {{"grid", {{"n_subcarriers", 24}, {"n_bs_antennas", 4}, {"n_users", 2}, {"bits_per_symbol", 4}}},
                {"scheme", "ml_receiver"},
                {"speed_kmh", {110, 130}},
                {"snr_db", {5, 15}},
                {"n_rgs", 3},
                {"code", "uncoded"},
                {"seed", 5},
                {"estimation", {{"n_cov_samples", 500}, {"n_oracle_mc", 100}, {"n_omega_samples", 200}}},
                {"training", {{"n_rgs", 6}, {"batch_size", 3}, {"epochs", 1}}}};
    std::ofstream(root / "cfg.json") << cfg.dump(2);
    const std::string c = "--config " + (root / "cfg.json").string();
    const std::string toy = std::string(MUMIMO_DATA_DIR) + "/toy_12_6.alist";

    std::vector<std::string> failed;
    for (const char* run : {"a", "b"}) {
        const fs::path d = root / run;
        fs::create_directories(d);
        const std::string o = d.string() + "/";
        const std::vector<std::pair<std::string, std::string>> cmds = {
            {"show-config", "show-config " + c},
            {"gen-data", "gen-data " + c + " --out " + o + "data"},
            {"train", "train " + c + " --out " + o + "model.ckpt --log " + o + "train.csv"},
            {"train --data", "train " + c + " --data " + o + "data --out " + o + "model_data.ckpt"},
            {"eval baseline", "eval " + c + " --scheme baseline --out " + o + "baseline.csv"},
            {"eval ml", "eval " + c + " --checkpoint " + o + "model.ckpt --out " + o + "ml.csv"},
            {"eval coded", "eval " + c + " --scheme perfect_csi --code " + toy + " --out " + o + "coded.csv"},
            {"eval downlink", "eval " + c + " --direction downlink --scheme baseline --out " + o + "dl.csv"},
            {"e2e", "e2e " + c + " --out " + o + "e2e"},
        };
        for (const auto& [name, args] : cmds) {
            const std::string tag = name;
            std::string stdout_name = tag;
            for (char& ch : stdout_name)
                if (ch == ' ' || ch == '-') ch = '_';
            if (run_cli(args, d / (stdout_name + ".stdout")) != 0) failed.push_back(tag + " exit");
        }
    }
    // show-config stdout is compared; other stdouts carry wall times.
    int n_files = 0;
    for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
        if (!e.is_regular_file()) continue;
        const fs::path rel = fs::relative(e.path(), root / "a");
        if (rel.extension() == ".stdout" && rel.filename() != "show_config.stdout") continue;
        ++n_files;
        const fs::path other = root / "b" / rel;
        if (!fs::exists(other) || slurp(e.path()) != slurp(other)) failed.push_back(rel.string());
    }
    std::string detail = std::to_string(n_files) + " output files from 9 commands compared byte for byte";
    if (n_files < 10) failed.push_back("too few outputs");
    for (const auto& f : failed) detail += "; differs/failed: " + f;
    return {failed.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
    struct Criterion {
        int id;
        const char* name;
        Outcome (*fn)();
    };
    const std::vector<Criterion> all = {
        {1, "grouped-LMMSE oracle equivalence", grouped_lmmse_oracle},
        {2, "noise-variance fidelity", noise_variance_fidelity},
        {3, "demapper exactness", demapper_exactness},
        {4, "AWGN anchor", awgn_anchor},
        {5, "LDPC sanity", ldpc_sanity},
        {6, "gradient integrity", gradient_integrity},
        {7, "error-statistics learning", error_statistics_learning},
        {8, "scheme ordering", scheme_ordering},
        {9, "configuration fidelity", configuration_fidelity},
        {10, "determinism", determinism},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

    int failures = 0;
    for (const Criterion& c : all) {
        if (!selected.empty() && !selected.count(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failures += !o.pass;
        std::cout << "criterion " << c.id << " [" << c.name << "]: " << (o.pass ? "PASS" : "FAIL") << " (" << o.detail
                  << "; " << fmt("%.1f s", secs) << ")" << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
