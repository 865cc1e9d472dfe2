#include "mumimo/grid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>

namespace mumimo {

const char* to_string(PilotKind kind) { return kind == PilotKind::OneP ? "1P" : "2P"; }

PilotKind pilot_kind_from_string(const std::string& s) {
    if (s == "1P" || s == "OneP" || s == "1p") return PilotKind::OneP;
    if (s == "2P" || s == "TwoP" || s == "2p") return PilotKind::TwoP;
    throw std::invalid_argument("pilot_kind: unknown pilot pattern '" + s + "'");
}

void GridConfig::validate() const {
    auto need = [](bool ok, const char* field, const char* what) {
        if (!ok) throw std::invalid_argument(std::string(field) + ": " + what);
    };
    need(n_subcarriers >= 1, "n_subcarriers", "must be >= 1");
    need(n_subcarriers % 12 == 0, "n_subcarriers", "must be a multiple of 12 (whole resource blocks)");
    need(n_symbols >= 1, "n_symbols", "must be >= 1");
    need(n_bs_antennas >= 1, "n_bs_antennas", "must be >= 1");
    need(n_users >= 1, "n_users", "must be >= 1");
    need(bits_per_symbol >= 2 && bits_per_symbol % 2 == 0, "bits_per_symbol", "must be even and >= 2");
    need(bits_per_symbol <= 12, "bits_per_symbol", "must be <= 12");
    const int last_pilot = pilot_kind == PilotKind::OneP ? 2 : 10;
    need(n_symbols > last_pilot, "n_symbols", "too few symbols for the pilot pattern");
}

PilotPattern::PilotPattern(const GridConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    if (cfg_.n_users > 4) {
        throw std::invalid_argument("n_users: pilot pattern supports at most 4 users");
    }
    n_pf_ = cfg_.n_subcarriers / cfg_.n_users;
    pilot_symbols_ = cfg_.pilot_kind == PilotKind::OneP ? std::vector<int>{2} : std::vector<int>{2, 10};
    pilots_.resize(cfg_.n_users);
    for (int u = 0; u < cfg_.n_users; ++u) {
        for (int sym : pilot_symbols_) {
            for (int pf = 0; pf < n_pf_; ++pf) pilots_[u].push_back({u + pf * cfg_.n_users, sym});
        }
    }
}

std::vector<Re> PilotPattern::downlink_pilots(int u) const {
    std::vector<Re> out = pilots_[u];
    for (auto& re : out) re.t += cfg_.n_symbols;
    return out;
}

int PilotPattern::nearest_symbol_index(int t_in_slot) const {
    int best = 0;
    int best_d = std::numeric_limits<int>::max();
    for (int i = 0; i < n_pt(); ++i) {
        const int d = std::abs(t_in_slot - pilot_symbols_[i]);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

int PilotPattern::nearest_subcarrier_index(int u, int f) const {
    const int k = cfg_.n_users;
    int lo = (f - u) >= 0 ? (f - u) / k : -1;
    if (lo < 0) return 0;
    if (lo >= n_pf_ - 1) return n_pf_ - 1;
    const int d_lo = f - (u + lo * k);
    const int d_hi = (u + (lo + 1) * k) - f;
    return d_hi < d_lo ? lo + 1 : lo;
}

int PilotPattern::governing_index(int u, int f, int t) const {
    const int t_in_slot = t % cfg_.n_symbols;
    return nearest_subcarrier_index(u, f) + n_pf_ * nearest_symbol_index(t_in_slot);
}

Re PilotPattern::group_of(int u, int f, int t) const {
    Re re = pilots_[u][governing_index(u, f, t)];
    if (t >= cfg_.n_symbols) re.t += cfg_.n_symbols;
    return re;
}

int PilotPattern::pilot_owner(int f, int t) const {
    const int t_in_slot = t % cfg_.n_symbols;
    if (std::find(pilot_symbols_.begin(), pilot_symbols_.end(), t_in_slot) == pilot_symbols_.end()) {
        return -1;
    }
    const int u = f % cfg_.n_users;
    return (f - u) / cfg_.n_users < n_pf_ ? u : -1;
}

int PilotPattern::n_data_res() const {
    int n = 0;
    for (int f = 0; f < cfg_.n_subcarriers; ++f)
        for (int t = 0; t < cfg_.n_symbols; ++t) n += is_data(f, t) ? 1 : 0;
    return n;
}

int PilotPattern::time_offset(int u, int f, int t) const { return t - group_of(u, f, t).t; }
int PilotPattern::freq_offset(int u, int f, int t) const { return f - group_of(u, f, t).f; }

Constellation::Constellation(int bits_per_symbol) : m_(bits_per_symbol) {
    if (m_ < 2 || m_ % 2 != 0) throw std::invalid_argument("bits_per_symbol: must be even and >= 2");
    const int half = m_ / 2;
    const int levels = 1 << half;
    // Reflected Gray code per axis; the axis MSB is the first label bit.
    std::vector<int> level_of_code(levels);
    for (int i = 0; i < levels; ++i) level_of_code[i ^ (i >> 1)] = 2 * i - (levels - 1);
    const double norm = std::sqrt(2.0 * (levels * levels - 1) / 3.0);

    points_.resize(std::size_t{1} << m_);
    for (int label = 0; label < size(); ++label) {
        int code_re = 0;
        int code_im = 0;
        for (int i = 0; i < half; ++i) {
            code_re = (code_re << 1) | bit(label, i);
            code_im = (code_im << 1) | bit(label, half + i);
        }
        points_[label] = cd(level_of_code[code_re], level_of_code[code_im]) / norm;
    }
    subsets_.resize(2 * m_);
    for (int i = 0; i < m_; ++i)
        for (int label = 0; label < size(); ++label) subsets_[2 * i + bit(label, i)].push_back(label);
}

int Constellation::nearest(cd x) const {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int c = 0; c < size(); ++c) {
        const double d = std::norm(x - points_[c]);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

Constellation gray_qam(int bits_per_symbol) { return Constellation(bits_per_symbol); }

std::vector<cd> map_bits(std::span<const std::uint8_t> bits, const Constellation& c) {
    const int m = c.bits_per_symbol();
    if (bits.size() % m != 0) {
        throw std::invalid_argument("map_bits: bit count " + std::to_string(bits.size()) +
                                    " is not a multiple of " + std::to_string(m));
    }
    std::vector<cd> out(bits.size() / m);
    for (std::size_t s = 0; s < out.size(); ++s) {
        int label = 0;
        for (int i = 0; i < m; ++i) label |= (bits[s * m + i] & 1) << i;
        out[s] = c.point(label);
    }
    return out;
}

std::vector<std::uint8_t> hard_demap(std::span<const cd> symbols, const Constellation& c) {
    const int m = c.bits_per_symbol();
    std::vector<std::uint8_t> out(symbols.size() * m);
    for (std::size_t s = 0; s < symbols.size(); ++s) {
        const int label = c.nearest(symbols[s]);
        for (int i = 0; i < m; ++i) out[s * m + i] = static_cast<std::uint8_t>(c.bit(label, i));
    }
    return out;
}

nlohmann::json to_json(const GridConfig& cfg) {
    return {{"n_subcarriers", cfg.n_subcarriers}, {"n_symbols", cfg.n_symbols},
            {"n_bs_antennas", cfg.n_bs_antennas}, {"n_users", cfg.n_users},
            {"bits_per_symbol", cfg.bits_per_symbol}, {"pilot_kind", to_string(cfg.pilot_kind)}};
}

GridConfig grid_config_from_json(const nlohmann::json& j) {
    GridConfig cfg;
    auto get_int = [&](const char* key, int& out) {
        if (!j.contains(key)) return;
        if (!j[key].is_number_integer()) throw std::invalid_argument(std::string("grid.") + key + ": expected integer");
        out = j[key].get<int>();
    };
    get_int("n_subcarriers", cfg.n_subcarriers);
    get_int("n_symbols", cfg.n_symbols);
    get_int("n_bs_antennas", cfg.n_bs_antennas);
    get_int("n_users", cfg.n_users);
    get_int("bits_per_symbol", cfg.bits_per_symbol);
    if (j.contains("pilot_kind")) cfg.pilot_kind = pilot_kind_from_string(j["pilot_kind"].get<std::string>());
    return cfg;
}

nlohmann::json to_json(const PilotPattern& p) {
    nlohmann::json users = nlohmann::json::array();
    for (int u = 0; u < p.config().n_users; ++u) {
        nlohmann::json res = nlohmann::json::array();
        // 1-based (subcarrier, symbol) pairs at the I/O boundary.
        for (const Re& re : p.pilots(u)) res.push_back({re.f + 1, re.t + 1});
        users.push_back(res);
    }
    return {{"kind", to_string(p.config().pilot_kind)}, {"n_pf", p.n_pf()}, {"n_pt", p.n_pt()},
            {"pilots", users}};
}

nlohmann::json to_json(const Constellation& c) {
    nlohmann::json pts = nlohmann::json::array();
    for (int label = 0; label < c.size(); ++label) {
        std::string bits;
        for (int i = 0; i < c.bits_per_symbol(); ++i) bits += c.bit(label, i) ? '1' : '0';
        pts.push_back({{"re", c.point(label).real()}, {"im", c.point(label).imag()}, {"bits", bits}});
    }
    return {{"bits_per_symbol", c.bits_per_symbol()}, {"points", pts}};
}

}  // namespace mumimo
