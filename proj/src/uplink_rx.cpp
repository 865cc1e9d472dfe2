#include "mumimo/uplink_rx.hpp"

#include "mumimo/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mumimo {

std::vector<EqualizerGroup> make_groups(const PilotPattern& pattern, int slot, int freq_span) {
    const GridConfig& g = pattern.config();
    if (freq_span < 1 || g.n_subcarriers % freq_span != 0) {
        throw std::invalid_argument("make_groups: freq_span must divide n_subcarriers");
    }
    if (slot != 0 && slot != 1) throw std::invalid_argument("make_groups: slot must be 0 or 1");
    const auto& syms = pattern.pilot_symbols();
    // Time segments: symbols sharing the same nearest pilot symbol.
    std::vector<std::pair<int, int>> segments;
    int begin = 0;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        const int end = (syms[i] + syms[i + 1]) / 2;  // ties go to the earlier symbol
        segments.emplace_back(begin, end);
        begin = end + 1;
    }
    segments.emplace_back(begin, g.n_symbols - 1);

    std::vector<EqualizerGroup> out;
    const int t0 = slot * g.n_symbols;
    for (int f = 0; f < g.n_subcarriers; f += freq_span) {
        for (const auto& [tb, te] : segments) out.push_back({f, f + freq_span - 1, t0 + tb, t0 + te});
    }
    return out;
}

namespace {

CMat solve_weights(const CMat& a, const CMat& b) {
    // W = B A^{-1}  <=>  W^H = A^{-1} B^H
    HermitianSolver solver(a);
    return solver.solve(CMat(b.adjoint())).adjoint();
}

}  // namespace

CMat grouped_lmmse_weights(std::span<const CMat> h_hat, std::span<const CMat> e, double sigma2) {
    if (h_hat.empty()) throw std::invalid_argument("grouped_lmmse_weights: empty group");
    if (!e.empty() && e.size() != h_hat.size()) throw std::invalid_argument("grouped_lmmse_weights: E size mismatch");
    if (sigma2 < 0) throw std::invalid_argument("grouped_lmmse_weights: sigma2 must be >= 0");
    const Eigen::Index n_m = h_hat[0].rows();
    const Eigen::Index n_k = h_hat[0].cols();
    CMat a = CMat::Zero(n_m, n_m);
    CMat b = CMat::Zero(n_k, n_m);
    for (std::size_t i = 0; i < h_hat.size(); ++i) {
        a.noalias() += h_hat[i] * h_hat[i].adjoint();
        if (!e.empty()) a += e[i];
        b += h_hat[i].adjoint();
    }
    a.diagonal().array() += sigma2 * static_cast<double>(h_hat.size());
    return solve_weights(hermitian_part(a), b);
}

CMat grouped_lmmse_weights(const ChannelTensor& h_hat, const ErrorStats& e, double sigma2, const EqualizerGroup& g) {
    const int n_m = h_hat.n_m();
    const int n_k = h_hat.n_k();
    CMat a = CMat::Zero(n_m, n_m);
    CMat b = CMat::Zero(n_k, n_m);
    for (int f = g.f_begin; f <= g.f_end; ++f) {
        for (int t = g.t_begin; t <= g.t_end; ++t) {
            const auto h = h_hat.at(f, t);
            a.noalias() += h * h.adjoint();
            if (!e.empty()) a += e.at(f, t);
            b += h.adjoint();
        }
    }
    a.diagonal().array() += sigma2 * g.n_res();
    return solve_weights(hermitian_part(a), b);
}

CVec unbias(const CMat& w, const CMat& h_hat) {
    const CVec diag = (w * h_hat).diagonal();
    CVec d(diag.size());
    for (Eigen::Index k = 0; k < diag.size(); ++k) d(k) = diag(k) == cd(0) ? cd(0) : cd(1) / diag(k);
    return d;
}

CVec equalize(const CVec& d, const CMat& w, const CVec& y) { return d.cwiseProduct(w * y); }

double post_eq_noise_var(const CMat& w, int k, const CMat& h_hat, const CMat& e, double sigma2) {
    const auto r = w.row(k);
    const Eigen::RowVectorXcd rh = r * h_hat;
    const double signal = std::norm(rh(k));
    if (signal == 0.0) return std::numeric_limits<double>::infinity();
    double num = rh.squaredNorm() - signal + sigma2 * r.squaredNorm();
    if (e.size() != 0) num += (r * e * r.adjoint())(0, 0).real();
    return num / signal;
}

EqualizedGrid equalize_uplink(const ChannelTensor& h_hat, const ErrorStats& e, const CTensor3& y, double sigma2,
                              const std::vector<EqualizerGroup>& groups) {
    const int n_f = y.dim0();
    const int n_t = y.dim1();
    const int n_m = y.dim2();
    const int n_k = h_hat.n_k();
    if (h_hat.n_f() != n_f || h_hat.n_m() != n_m || h_hat.n_t() < n_t) {
        throw std::invalid_argument("equalize_uplink: shape mismatch");
    }
    EqualizedGrid out{CTensor3(n_f, n_t, n_k), RTensor3(n_f, n_t, n_k)};
    const CMat zero_e = CMat::Zero(n_m, n_m);
    for (const auto& g : groups) {
        if (g.t_end >= n_t) throw std::invalid_argument("equalize_uplink: group outside the uplink slot");
        const CMat w = grouped_lmmse_weights(h_hat, e, sigma2, g);
        for (int f = g.f_begin; f <= g.f_end; ++f) {
            for (int t = g.t_begin; t <= g.t_end; ++t) {
                const CMat h = h_hat.at(f, t);
                const CVec d = unbias(w, h);
                const CVec yv = Eigen::Map<const CVec>(y.slice(f, t), n_m);
                const CVec x = equalize(d, w, yv);
                const CMat ef = e.empty() ? zero_e : CMat(e.at(f, t));
                for (int k = 0; k < n_k; ++k) {
                    out.x_hat(f, t, k) = x(k);
                    out.nu2(f, t, k) = post_eq_noise_var(w, k, h, ef, sigma2);
                }
            }
        }
    }
    return out;
}

void demap_llr(cd x_hat, double nu2, const Constellation& c, std::span<double> out) {
    const int m = c.bits_per_symbol();
    if (static_cast<int>(out.size()) != m) throw std::invalid_argument("demap_llr: output size must equal M");
    if (!std::isfinite(x_hat.real()) || !std::isfinite(x_hat.imag())) {
        throw std::invalid_argument("demap_llr: non-finite equalized symbol");
    }
    if (!(nu2 > 0.0) || std::isinf(nu2)) {
        std::fill(out.begin(), out.end(), 0.0);
        return;
    }
    const int n = c.size();
    double metric[4096];
    for (int s = 0; s < n; ++s) metric[s] = -std::norm(x_hat - c.point(s)) / nu2;
    for (int i = 0; i < m; ++i) {
        double lse[2];
        for (int v = 0; v < 2; ++v) {
            const auto& set = c.subset(i, v);
            double mx = -std::numeric_limits<double>::infinity();
            for (int s : set) mx = std::max(mx, metric[s]);
            double acc = 0.0;
            for (int s : set) acc += std::exp(metric[s] - mx);
            lse[v] = mx + std::log(acc);
        }
        out[i] = lse[1] - lse[0];
    }
}

std::vector<double> demap_llr(cd x_hat, double nu2, const Constellation& c) {
    std::vector<double> out(c.bits_per_symbol());
    demap_llr(x_hat, nu2, c, out);
    return out;
}

LlrGrid demap_grid(const EqualizedGrid& eq, const Constellation& c, const PilotPattern& pattern) {
    const int n_f = eq.x_hat.dim0();
    const int n_t = eq.x_hat.dim1();
    const int n_k = eq.x_hat.dim2();
    LlrGrid out(n_f, n_t, n_k, c.bits_per_symbol());
    for (int f = 0; f < n_f; ++f) {
        for (int t = 0; t < n_t; ++t) {
            if (!pattern.is_data(f, t)) continue;
            for (int k = 0; k < n_k; ++k) demap_llr(eq.x_hat(f, t, k), eq.nu2(f, t, k), c, out.at(f, t, k));
        }
    }
    return out;
}

std::vector<Re> data_res(const PilotPattern& pattern) {
    const GridConfig& g = pattern.config();
    std::vector<Re> out;
    for (int f = 0; f < g.n_subcarriers; ++f)
        for (int t = 0; t < g.n_symbols; ++t)
            if (pattern.is_data(f, t)) out.push_back({f, t});
    return out;
}

CTensor3 build_uplink_symbols(const std::vector<std::vector<std::uint8_t>>& bits, const PilotPattern& pattern,
                              const Constellation& c) {
    const GridConfig& g = pattern.config();
    const auto res = data_res(pattern);
    const int m = c.bits_per_symbol();
    if (static_cast<int>(bits.size()) != g.n_users) throw std::invalid_argument("build_uplink_symbols: one bit vector per user");
    CTensor3 x(g.n_subcarriers, g.n_symbols, g.n_users);
    for (int k = 0; k < g.n_users; ++k) {
        if (bits[k].size() != res.size() * m) throw std::invalid_argument("build_uplink_symbols: wrong bit count");
        const auto syms = map_bits(bits[k], c);
        for (std::size_t i = 0; i < res.size(); ++i) x(res[i].f, res[i].t, k) = syms[i];
        for (const Re& p : pattern.pilots(k)) x(p.f, p.t, k) = 1.0;
    }
    return x;
}

std::vector<std::vector<double>> user_llrs(const LlrGrid& llr, const PilotPattern& pattern) {
    const auto res = data_res(pattern);
    const int m = llr.m();
    std::vector<std::vector<double>> out(llr.n_k(), std::vector<double>(res.size() * m));
    for (int k = 0; k < llr.n_k(); ++k)
        for (std::size_t i = 0; i < res.size(); ++i)
            for (int b = 0; b < m; ++b) out[k][i * m + b] = llr(res[i].f, res[i].t, k, b);
    return out;
}

}  // namespace mumimo
