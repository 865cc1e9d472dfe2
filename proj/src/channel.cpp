#include "mumimo/channel.hpp"

#include "mumimo/blob_io.hpp"
#include "mumimo/linalg.hpp"

#include <cmath>
#include <numeric>

namespace mumimo {

std::vector<double> ChannelModelConfig::resolved_tap_powers() const {
    if (!tap_powers.empty()) return tap_powers;
    std::vector<double> p(tap_delays_s.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(-static_cast<double>(i));
    const double total = std::accumulate(p.begin(), p.end(), 0.0);
    for (double& v : p) v /= total;
    return p;
}

void ChannelModelConfig::validate() const {
    auto need = [](bool ok, const std::string& what) {
        if (!ok) throw std::invalid_argument(what);
    };
    need(!tap_delays_s.empty(), "channel.tap_delays_s: must not be empty");
    for (std::size_t i = 0; i < tap_delays_s.size(); ++i) {
        need(tap_delays_s[i] >= 0.0, "channel.tap_delays_s: delays must be non-negative");
        if (i > 0) need(tap_delays_s[i] > tap_delays_s[i - 1], "channel.tap_delays_s: must be strictly increasing");
    }
    const auto powers = resolved_tap_powers();
    need(powers.size() == tap_delays_s.size(), "channel.tap_powers: length must match tap_delays_s");
    double total = 0.0;
    for (double p : powers) {
        need(p > 0.0, "channel.tap_powers: powers must be positive");
        total += p;
    }
    need(std::abs(total - 1.0) <= 1e-12, "channel.tap_powers: must sum to 1");
    need(carrier_freq_hz > 0.0, "channel.carrier_freq_hz: must be positive");
    need(subcarrier_spacing_hz > 0.0, "channel.subcarrier_spacing_hz: must be positive");
    need(symbol_duration_s > 0.0, "channel.symbol_duration_s: must be positive");
    need(speed_lo_mps >= 0.0 && speed_lo_mps <= speed_hi_mps, "channel.speed range: need 0 <= low <= high");
    for (double v : user_speeds_mps) need(v >= 0.0, "channel.user_speeds_mps: speeds must be non-negative");
    need(n_scatterers >= 1, "channel.n_scatterers: must be >= 1");
}

double kmh_to_mps(double kmh) { return kmh / 3.6; }
double doppler_hz(double speed_mps, double carrier_freq_hz) { return speed_mps * carrier_freq_hz / kSpeedOfLight; }

double ChannelTensor::user_energy(int k) const {
    double e = 0.0;
    for (int f = 0; f < n_f_; ++f)
        for (int t = 0; t < n_t_; ++t)
            for (int m = 0; m < n_m_; ++m) e += std::norm((*this)(f, t, m, k));
    return e;
}

std::vector<double> draw_speeds(const ChannelModelConfig& cfg, int n_users, Rng& rng) {
    if (!cfg.user_speeds_mps.empty()) {
        if (static_cast<int>(cfg.user_speeds_mps.size()) != n_users) {
            throw std::invalid_argument("channel.user_speeds_mps: expected one speed per user");
        }
        return cfg.user_speeds_mps;
    }
    std::uniform_real_distribution<double> u(cfg.speed_lo_mps, cfg.speed_hi_mps);
    std::vector<double> out(n_users);
    for (double& v : out) v = cfg.speed_lo_mps == cfg.speed_hi_mps ? cfg.speed_lo_mps : u(rng);
    return out;
}

ChannelTensor generate_raw_channel(const ChannelModelConfig& cfg, const GridConfig& grid,
                                   const std::vector<double>& speeds_mps, Rng& rng) {
    const int n_f = grid.n_subcarriers;
    const int n_t = grid.n_total_symbols();
    const int n_m = grid.n_bs_antennas;
    const int n_k = grid.n_users;
    const auto powers = cfg.resolved_tap_powers();
    const int n_p = static_cast<int>(powers.size());
    const int n_s = cfg.n_scatterers;

    // Delay-to-frequency phase table, exp(-j 2 pi f df tau_p).
    std::vector<cd> phase(static_cast<std::size_t>(n_f) * n_p);
    for (int f = 0; f < n_f; ++f)
        for (int p = 0; p < n_p; ++p)
            phase[f * n_p + p] = std::polar(1.0, -2.0 * kPi * f * cfg.subcarrier_spacing_hz * cfg.tap_delays_s[p]);

    std::uniform_real_distribution<double> uni(0.0, 2.0 * kPi);
    ChannelTensor h(n_f, n_t, n_m, n_k);
    std::vector<cd> taps(static_cast<std::size_t>(n_p) * n_t);
    for (int k = 0; k < n_k; ++k) {
        const double fd = doppler_hz(speeds_mps[k], cfg.carrier_freq_hz);
        for (int m = 0; m < n_m; ++m) {
            std::fill(taps.begin(), taps.end(), cd{});
            for (int p = 0; p < n_p; ++p) {
                const double amp = std::sqrt(powers[p] / n_s);
                for (int s = 0; s < n_s; ++s) {
                    const double alpha = uni(rng);
                    const double phi = uni(rng);
                    const cd step = std::polar(1.0, 2.0 * kPi * fd * std::cos(alpha) * cfg.symbol_duration_s);
                    cd z = std::polar(amp, phi);
                    for (int t = 0; t < n_t; ++t) {
                        taps[p * n_t + t] += z;
                        z *= step;
                    }
                }
            }
            for (int f = 0; f < n_f; ++f) {
                for (int t = 0; t < n_t; ++t) {
                    cd acc{};
                    for (int p = 0; p < n_p; ++p) acc += taps[p * n_t + t] * phase[f * n_p + p];
                    h(f, t, m, k) = acc;
                }
            }
        }
    }
    return h;
}

ChannelTensor generate_channel(const ChannelModelConfig& cfg, const GridConfig& grid, Rng& rng) {
    cfg.validate();
    grid.validate();
    const auto speeds = draw_speeds(cfg, grid.n_users, rng);
    ChannelTensor h = generate_raw_channel(cfg, grid, speeds, rng);
    normalize_rg(h);
    return h;
}

ChannelTensor generate_channel(const ChannelModelConfig& cfg, const GridConfig& grid) {
    Rng rng(cfg.seed);
    return generate_channel(cfg, grid, rng);
}

void normalize_rg(ChannelTensor& h) {
    const double target = static_cast<double>(h.n_f()) * h.n_t() * h.n_m();
    for (int k = 0; k < h.n_k(); ++k) {
        const double e = h.user_energy(k);
        if (!(e > 0.0)) throw std::invalid_argument("normalize_rg: user " + std::to_string(k) + " has an all-zero channel");
        const double scale = std::sqrt(target / e);
        for (int f = 0; f < h.n_f(); ++f)
            for (int t = 0; t < h.n_t(); ++t)
                for (int m = 0; m < h.n_m(); ++m) h(f, t, m, k) *= scale;
    }
}

ChannelTensor normalized(ChannelTensor h) {
    normalize_rg(h);
    return h;
}

std::vector<CMat> estimate_covariances(const ChannelModelConfig& cfg, const GridConfig& grid,
                                       const std::vector<std::vector<Re>>& positions, int n_samples,
                                       Rng& rng) {
    if (n_samples < 1) throw std::invalid_argument("estimate_covariance: n_samples must be >= 1");
    const int n_m = grid.n_bs_antennas;
    const int n_k = grid.n_users;
    const int n_sets = static_cast<int>(positions.size());
    constexpr int kChunk = 256;

    std::vector<CMat> cov(n_sets);
    std::vector<CMat> chunk(n_sets);
    for (int s = 0; s < n_sets; ++s) {
        const int dim = static_cast<int>(positions[s].size()) * n_m;
        cov[s] = CMat::Zero(dim, dim);
        chunk[s].resize(dim, kChunk);
    }
    int taken = 0;
    int filled = 0;
    auto flush = [&]() {
        for (int s = 0; s < n_sets; ++s) {
            const auto x = chunk[s].leftCols(filled);
            cov[s].selfadjointView<Eigen::Lower>().rankUpdate(x);
        }
        filled = 0;
    };
    while (taken < n_samples) {
        const ChannelTensor h = generate_channel(cfg, grid, rng);
        for (int k = 0; k < n_k && taken < n_samples; ++k, ++taken) {
            for (int s = 0; s < n_sets; ++s) {
                const auto& pos = positions[s];
                const int n_pos = static_cast<int>(pos.size());
                for (int m = 0; m < n_m; ++m)
                    for (int p = 0; p < n_pos; ++p) chunk[s](p + n_pos * m, filled) = h(pos[p].f, pos[p].t, m, k);
            }
            if (++filled == kChunk) flush();
        }
    }
    if (filled > 0) flush();
    for (auto& c : cov) {
        CMat full = c.selfadjointView<Eigen::Lower>();
        c = hermitian_part(full) / static_cast<double>(n_samples);
    }
    return cov;
}

CMat estimate_covariance(const ChannelModelConfig& cfg, const GridConfig& grid, const std::vector<Re>& positions,
                         int n_samples, Rng& rng) {
    return estimate_covariances(cfg, grid, {positions}, n_samples, rng).front();
}

CTensor3 apply_uplink(const ChannelTensor& h, const CTensor3& x, double sigma2, Rng& rng) {
    const int n_f = h.n_f();
    const int n_t = h.n_t() / 2;
    if (x.dim0() != n_f || x.dim1() != n_t || x.dim2() != h.n_k()) {
        throw std::invalid_argument("apply_uplink: X shape does not match the channel");
    }
    if (sigma2 < 0.0) throw std::invalid_argument("apply_uplink: sigma2 must be >= 0");
    CTensor3 y(n_f, n_t, h.n_m());
    for (int f = 0; f < n_f; ++f) {
        for (int t = 0; t < n_t; ++t) {
            Eigen::Map<const CVec> xv(x.slice(f, t), h.n_k());
            Eigen::Map<CVec> yv(y.slice(f, t), h.n_m());
            yv.noalias() = h.at(f, t) * xv;
            if (sigma2 > 0.0)
                for (int m = 0; m < h.n_m(); ++m) yv(m) += complex_normal(rng, sigma2);
        }
    }
    return y;
}

CTensor3 apply_downlink(const ChannelTensor& h, const CTensor3& s, double sigma2, Rng& rng) {
    const int n_f = h.n_f();
    const int n_t = h.n_t() / 2;
    if (s.dim0() != n_f || s.dim1() != n_t || s.dim2() != h.n_m()) {
        throw std::invalid_argument("apply_downlink: S shape does not match the channel");
    }
    if (sigma2 < 0.0) throw std::invalid_argument("apply_downlink: sigma2 must be >= 0");
    CTensor3 r(n_f, n_t, h.n_k());
    for (int f = 0; f < n_f; ++f) {
        for (int t = 0; t < n_t; ++t) {
            Eigen::Map<const CVec> sv(s.slice(f, t), h.n_m());
            Eigen::Map<CVec> rv(r.slice(f, t), h.n_k());
            rv.noalias() = h.at(f, t + n_t).adjoint() * sv;
            if (sigma2 > 0.0)
                for (int k = 0; k < h.n_k(); ++k) rv(k) += complex_normal(rng, sigma2);
        }
    }
    return r;
}

double snr_to_sigma2(double snr_db) {
    if (!std::isfinite(snr_db)) throw std::invalid_argument("snr_to_sigma2: SNR must be finite");
    return std::pow(10.0, -snr_db / 10.0);
}

nlohmann::json to_json(const ChannelModelConfig& cfg) {
    return {{"tap_delays_s", cfg.tap_delays_s},
            {"tap_powers", cfg.resolved_tap_powers()},
            {"carrier_freq_hz", cfg.carrier_freq_hz},
            {"subcarrier_spacing_hz", cfg.subcarrier_spacing_hz},
            {"symbol_duration_s", cfg.symbol_duration_s},
            {"user_speeds_mps", cfg.user_speeds_mps},
            {"speed_lo_mps", cfg.speed_lo_mps},
            {"speed_hi_mps", cfg.speed_hi_mps},
            {"n_scatterers", cfg.n_scatterers},
            {"seed", cfg.seed}};
}

ChannelModelConfig channel_config_from_json(const nlohmann::json& j) {
    ChannelModelConfig cfg;
    try {
        if (j.contains("tap_delays_s")) cfg.tap_delays_s = j["tap_delays_s"].get<std::vector<double>>();
        if (j.contains("tap_powers")) cfg.tap_powers = j["tap_powers"].get<std::vector<double>>();
        if (j.contains("carrier_freq_hz")) cfg.carrier_freq_hz = j["carrier_freq_hz"].get<double>();
        if (j.contains("subcarrier_spacing_hz")) cfg.subcarrier_spacing_hz = j["subcarrier_spacing_hz"].get<double>();
        if (j.contains("symbol_duration_s")) cfg.symbol_duration_s = j["symbol_duration_s"].get<double>();
        if (j.contains("user_speeds_mps")) cfg.user_speeds_mps = j["user_speeds_mps"].get<std::vector<double>>();
        if (j.contains("speed_lo_mps")) cfg.speed_lo_mps = j["speed_lo_mps"].get<double>();
        if (j.contains("speed_hi_mps")) cfg.speed_hi_mps = j["speed_hi_mps"].get<double>();
        if (j.contains("n_scatterers")) cfg.n_scatterers = j["n_scatterers"].get<int>();
        if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("channel: ") + e.what());
    }
    return cfg;
}

void save_channel(const std::string& path, const ChannelTensor& h, const nlohmann::json& meta) {
    std::vector<float> buf;
    buf.reserve(h.data().size() * 2);
    for (const cd& z : h.data()) {
        buf.push_back(static_cast<float>(z.real()));
        buf.push_back(static_cast<float>(z.imag()));
    }
    nlohmann::json side = meta;
    side["shape"] = {h.n_f(), h.n_t(), h.n_m(), h.n_k()};
    side["dims"] = {"subcarrier", "symbol", "bs_antenna", "user"};
    side["dtype"] = "complex64_interleaved_le";
    write_f32_blob(path, buf);
    write_json(sidecar_path(path), side);
}

ChannelTensor load_channel(const std::string& path) {
    const nlohmann::json side = read_json(sidecar_path(path));
    const auto shape = side.at("shape").get<std::vector<int>>();
    if (shape.size() != 4) throw std::runtime_error("'" + path + "': channel shape must be 4-D");
    ChannelTensor h(shape[0], shape[1], shape[2], shape[3]);
    const auto buf = read_f32_blob(path);
    if (buf.size() != 2 * h.data().size()) throw std::runtime_error("'" + path + "': blob size does not match sidecar shape");
    for (std::size_t i = 0; i < h.data().size(); ++i) h.data()[i] = cd(buf[2 * i], buf[2 * i + 1]);
    return h;
}

}  // namespace mumimo
