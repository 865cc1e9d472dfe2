#include "mumimo/harness.hpp"

#include "mumimo/blob_io.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

namespace mumimo {

namespace {

using nlohmann::json;

// RNG stream identifiers.
constexpr std::uint64_t kStreamSigma = 0x5349474dULL;
constexpr std::uint64_t kStreamOracle = 0x4f524143ULL;
constexpr std::uint64_t kStreamOmega = 0x4f4d4547ULL;
constexpr std::uint64_t kStreamDlOracle = 0x444c4f52ULL;
constexpr std::uint64_t kStreamFrame = 0x4652414dULL;
constexpr std::uint64_t kStreamEvalRg = 0x4556524cULL;
constexpr std::uint64_t kStreamTrainSnr = 0x54534e52ULL;
constexpr std::uint64_t kStreamTrainRg = 0x54524752ULL;
constexpr std::uint64_t kStreamShuffle = 0x53485546ULL;

std::uint64_t bits_of(double x) { return std::bit_cast<std::uint64_t>(x); }

// Typed access to one JSON object with field-path errors and unknown-key rejection.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    bool has(const std::string& key) const { return j_.contains(key); }
    const json& raw(const std::string& key) const { return j_.at(key); }

    void reject_unknown(std::initializer_list<const char*> known) const {
        std::set<std::string> k(known.begin(), known.end());
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!k.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
    }

    void get(const std::string& key, int& out) const {
        if (!has(key)) return;
        if (!j_[key].is_number_integer()) throw ConfigError(field(key), "expected an integer");
        out = j_[key].get<int>();
    }
    void get(const std::string& key, std::uint64_t& out) const {
        if (!has(key)) return;
        if (!j_[key].is_number_unsigned()) throw ConfigError(field(key), "expected a non-negative integer");
        out = j_[key].get<std::uint64_t>();
    }
    void get(const std::string& key, double& out) const {
        if (!has(key)) return;
        if (!j_[key].is_number()) throw ConfigError(field(key), "expected a number");
        out = j_[key].get<double>();
    }
    void get(const std::string& key, std::string& out) const {
        if (!has(key)) return;
        if (!j_[key].is_string()) throw ConfigError(field(key), "expected a string");
        out = j_[key].get<std::string>();
    }
    void get(const std::string& key, std::vector<double>& out) const {
        if (!has(key)) return;
        const json& a = j_[key];
        if (!a.is_array()) throw ConfigError(field(key), "expected an array of numbers");
        std::vector<double> v;
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (!a[i].is_number()) throw ConfigError(field(key) + "[" + std::to_string(i) + "]", "expected a number");
            v.push_back(a[i].get<double>());
        }
        out = std::move(v);
    }
    void get(const std::string& key, SpeedRange& out) const {
        if (!has(key)) return;
        std::vector<double> v;
        get(key, v);
        if (v.size() != 2) throw ConfigError(field(key), "expected [low, high]");
        out = {v[0], v[1]};
    }
    void get(const std::string& key, std::vector<SpeedRange>& out) const {
        if (!has(key)) return;
        const json& a = j_[key];
        if (!a.is_array()) throw ConfigError(field(key), "expected an array of [low, high] pairs");
        std::vector<SpeedRange> v;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const std::string f = field(key) + "[" + std::to_string(i) + "]";
            if (!a[i].is_array() || a[i].size() != 2 || !a[i][0].is_number() || !a[i][1].is_number())
                throw ConfigError(f, "expected [low, high]");
            v.push_back({a[i][0].get<double>(), a[i][1].get<double>()});
        }
        out = std::move(v);
    }

private:
    const json& j_;
    std::string path_;
};

void need(bool ok, const std::string& path, const std::string& msg) {
    if (!ok) throw ConfigError(path, msg);
}

json ranges_json(const std::vector<SpeedRange>& rs) {
    json a = json::array();
    for (const auto& r : rs) a.push_back({r.lo_kmh, r.hi_kmh});
    return a;
}

}  // namespace

std::vector<SpeedRange> default_speed_ranges(PilotKind kind) {
    if (kind == PilotKind::OneP) return {{0, 5}, {10, 20}, {25, 35}};
    return {{40, 60}, {70, 90}, {110, 130}};
}

std::vector<int> split_counts(int n, int parts) {
    if (parts < 1) throw std::invalid_argument("split_counts: parts must be >= 1");
    std::vector<int> out(parts, n / parts);
    for (int i = 0; i < n % parts; ++i) ++out[i];
    return out;
}

std::vector<SpeedRange> SimConfig::training_ranges() const {
    return training.speed_ranges.empty() ? default_speed_ranges(grid.pilot_kind) : training.speed_ranges;
}

void SimConfig::validate() const {
    try {
        grid.validate();
        PilotPattern check(grid);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError("grid", e.what());
    }
    try {
        channel.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("channel", e.what());
    }
    need(!snr_db.empty(), "snr_db", "must not be empty");
    for (double s : snr_db) need(std::isfinite(s), "snr_db", "values must be finite");
    need(snr_mode == "es" || snr_mode == "ebn0", "snr_mode", "must be \"es\" or \"ebn0\"");
    need(speed.lo_kmh >= 0 && speed.lo_kmh <= speed.hi_kmh, "speed_kmh", "need 0 <= low <= high");
    need(n_rgs >= 1, "n_rgs", "must be >= 1");
    need(bp_iterations >= 1, "bp_iterations", "must be >= 1");
    need(early_stop_errors >= 0, "early_stop_errors", "must be >= 0");
    need(estimation.n_cov_samples >= 1, "estimation.n_cov_samples", "must be >= 1");
    need(estimation.n_oracle_mc >= 1, "estimation.n_oracle_mc", "must be >= 1");
    need(estimation.n_omega_samples >= 1, "estimation.n_omega_samples", "must be >= 1");
    need(training.learning_rate > 0, "training.learning_rate", "must be positive");
    need(training.batch_size >= 1, "training.batch_size", "must be >= 1");
    need(training.epochs >= 1, "training.epochs", "must be >= 1");
    need(training.n_rgs >= 1, "training.n_rgs", "must be >= 1");
    need(!training.snr_db.empty(), "training.snr_db", "must not be empty");
    need(training.max_steps >= 0, "training.max_steps", "must be >= 0");
    need(training.time_budget_s >= 0, "training.time_budget_s", "must be >= 0");
    for (const auto& r : training.speed_ranges)
        need(r.lo_kmh >= 0 && r.lo_kmh <= r.hi_kmh, "training.speed_ranges_kmh", "need 0 <= low <= high");
    if (code != "uncoded") {
        try {
            load_code(code);
        } catch (const std::exception& e) {
            throw ConfigError("code", e.what());
        }
    }
}

json to_json(const SimConfig& c) {
    json ch = to_json(c.channel);
    ch.erase("speed_lo_mps");
    ch.erase("speed_hi_mps");
    ch.erase("user_speeds_mps");
    ch.erase("seed");
    return {{"grid", to_json(c.grid)},
            {"channel", ch},
            {"direction", to_string(c.direction)},
            {"scheme", to_string(c.scheme)},
            {"snr_db", c.snr_db},
            {"snr_mode", c.snr_mode},
            {"speed_kmh", {c.speed.lo_kmh, c.speed.hi_kmh}},
            {"n_rgs", c.n_rgs},
            {"seed", c.seed},
            {"code", c.code},
            {"bp_iterations", c.bp_iterations},
            {"early_stop_errors", c.early_stop_errors},
            {"downlink_ul_pilot_kind", to_string(c.downlink_ul_pilot_kind)},
            {"estimation",
             {{"n_cov_samples", c.estimation.n_cov_samples},
              {"n_oracle_mc", c.estimation.n_oracle_mc},
              {"n_omega_samples", c.estimation.n_omega_samples}}},
            {"training",
             {{"learning_rate", c.training.learning_rate},
              {"batch_size", c.training.batch_size},
              {"epochs", c.training.epochs},
              {"n_rgs", c.training.n_rgs},
              {"speed_ranges_kmh", ranges_json(c.training_ranges())},
              {"snr_db", c.training.snr_db},
              {"max_steps", c.training.max_steps},
              {"time_budget_s", c.training.time_budget_s}}},
            {"checkpoint", c.checkpoint}};
}

json derived_json(const SimConfig& c) {
    json code = {{"id", c.code}};
    if (auto l = load_code(c.code)) code.update({{"length", l->n()}, {"rate", l->rate()}, {"message_bits", l->k()}});
    const PilotPattern p(c.grid);
    json ranges = json::object();
    for (PilotKind k : {PilotKind::OneP, PilotKind::TwoP})
        ranges[to_string(k)] = ranges_json(default_speed_ranges(k));
    return {{"code", code},
            {"constellation_points", 1 << c.grid.bits_per_symbol},
            {"data_res_per_slot", p.n_data_res()},
            {"pilots_per_user_per_slot", p.n_pilots()},
            {"gamma_init", kGammaInit},
            {"speed_ranges_kmh", ranges}};
}

SimConfig sim_config_from_json(const json& j) {
    SimConfig c;
    Section root(j, "");
    root.reject_unknown({"grid", "channel", "direction", "scheme", "snr_db", "snr_mode", "speed_kmh", "n_rgs", "seed",
                         "code", "bp_iterations", "early_stop_errors", "downlink_ul_pilot_kind", "estimation",
                         "training", "checkpoint", "derived"});

    std::string s;
    if (root.has("direction")) {
        root.get("direction", s);
        try {
            c.direction = direction_from_string(s);
        } catch (const std::invalid_argument&) {
            throw ConfigError("direction", "expected \"uplink\" or \"downlink\"");
        }
    }
    if (root.has("scheme")) {
        root.get("scheme", s);
        try {
            c.scheme = scheme_from_string(s);
        } catch (const std::invalid_argument&) {
            throw ConfigError("scheme", "expected baseline, perfect_csi, ml_chest or ml_receiver");
        }
    }

    bool m_given = false;
    if (root.has("grid")) {
        Section g(root.raw("grid"), "grid");
        g.reject_unknown({"n_subcarriers", "n_symbols", "n_bs_antennas", "n_users", "bits_per_symbol", "pilot_kind"});
        g.get("n_subcarriers", c.grid.n_subcarriers);
        g.get("n_symbols", c.grid.n_symbols);
        g.get("n_bs_antennas", c.grid.n_bs_antennas);
        g.get("n_users", c.grid.n_users);
        g.get("bits_per_symbol", c.grid.bits_per_symbol);
        m_given = g.has("bits_per_symbol");
        if (g.has("pilot_kind")) {
            g.get("pilot_kind", s);
            try {
                c.grid.pilot_kind = pilot_kind_from_string(s);
            } catch (const std::invalid_argument&) {
                throw ConfigError("grid.pilot_kind", "expected \"1P\" or \"2P\"");
            }
        }
    }
    if (!m_given && c.direction == Direction::Downlink) c.grid.bits_per_symbol = 2;

    if (root.has("channel")) {
        Section ch(root.raw("channel"), "channel");
        ch.reject_unknown({"tap_delays_s", "tap_powers", "carrier_freq_hz", "subcarrier_spacing_hz",
                           "symbol_duration_s", "n_scatterers"});
        ch.get("tap_delays_s", c.channel.tap_delays_s);
        ch.get("tap_powers", c.channel.tap_powers);
        ch.get("carrier_freq_hz", c.channel.carrier_freq_hz);
        ch.get("subcarrier_spacing_hz", c.channel.subcarrier_spacing_hz);
        ch.get("symbol_duration_s", c.channel.symbol_duration_s);
        ch.get("n_scatterers", c.channel.n_scatterers);
    }

    root.get("snr_db", c.snr_db);
    root.get("snr_mode", c.snr_mode);
    root.get("speed_kmh", c.speed);
    root.get("n_rgs", c.n_rgs);
    root.get("seed", c.seed);
    root.get("code", c.code);
    root.get("bp_iterations", c.bp_iterations);
    root.get("early_stop_errors", c.early_stop_errors);
    root.get("checkpoint", c.checkpoint);
    if (root.has("downlink_ul_pilot_kind")) {
        root.get("downlink_ul_pilot_kind", s);
        try {
            c.downlink_ul_pilot_kind = pilot_kind_from_string(s);
        } catch (const std::invalid_argument&) {
            throw ConfigError("downlink_ul_pilot_kind", "expected \"1P\" or \"2P\"");
        }
    }
    if (root.has("estimation")) {
        Section e(root.raw("estimation"), "estimation");
        e.reject_unknown({"n_cov_samples", "n_oracle_mc", "n_omega_samples"});
        e.get("n_cov_samples", c.estimation.n_cov_samples);
        e.get("n_oracle_mc", c.estimation.n_oracle_mc);
        e.get("n_omega_samples", c.estimation.n_omega_samples);
    }
    if (root.has("training")) {
        Section t(root.raw("training"), "training");
        t.reject_unknown({"learning_rate", "batch_size", "epochs", "n_rgs", "speed_ranges_kmh", "snr_db", "max_steps",
                          "time_budget_s"});
        t.get("learning_rate", c.training.learning_rate);
        t.get("batch_size", c.training.batch_size);
        t.get("epochs", c.training.epochs);
        t.get("n_rgs", c.training.n_rgs);
        t.get("speed_ranges_kmh", c.training.speed_ranges);
        t.get("snr_db", c.training.snr_db);
        t.get("max_steps", c.training.max_steps);
        t.get("time_budget_s", c.training.time_budget_s);
    }
    c.validate();
    return c;
}

SimConfig load_sim_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
    }
    return sim_config_from_json(j);
}

std::vector<double> parse_snr_spec(const std::string& spec) {
    auto num = [&](const std::string& tok) {
        std::size_t used = 0;
        double v = 0;
        try {
            v = std::stod(tok, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != tok.size() || !std::isfinite(v))
            throw std::invalid_argument("invalid SNR value '" + tok + "' in '" + spec + "'");
        return v;
    };
    std::vector<double> out;
    if (spec.find(':') != std::string::npos) {
        std::vector<std::string> parts;
        std::stringstream ss(spec);
        for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
        if (parts.size() != 3) throw std::invalid_argument("SNR range must be start:stop:step, got '" + spec + "'");
        const double a = num(parts[0]), b = num(parts[1]), step = num(parts[2]);
        if (step <= 0 || b < a) throw std::invalid_argument("SNR range needs step > 0 and stop >= start");
        const int n = static_cast<int>(std::floor((b - a) / step + 1e-9)) + 1;
        for (int i = 0; i < n; ++i) out.push_back(a + i * step);
    } else {
        std::stringstream ss(spec);
        for (std::string p; std::getline(ss, p, ',');) out.push_back(num(p));
    }
    if (out.empty()) throw std::invalid_argument("empty SNR list");
    return out;
}

std::optional<LdpcCode> load_code(const std::string& id) {
    if (id == "uncoded") return std::nullopt;
    if (id == "ieee80211n_1296_r12") return ieee80211n_1296_r12();
    return load_alist_file(id);
}

double config_sigma2(const SimConfig& cfg, double snr_db) {
    if (cfg.snr_mode == "es") return snr_to_sigma2(snr_db);
    double rate = 1.0;
    if (auto code = load_code(cfg.code)) rate = code->rate();
    // Es = 1 carries M * rate information bits.
    return 1.0 / (cfg.grid.bits_per_symbol * rate * std::pow(10.0, snr_db / 10.0));
}

std::pair<double, double> wilson_interval(long long k, long long n, double z) {
    if (n <= 0) return {0.0, 1.0};
    const double p = static_cast<double>(k) / n;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / n;
    const double centre = (p + z2 / (2.0 * n)) / denom;
    const double half = z * std::sqrt(p * (1 - p) / n + z2 / (4.0 * n * n)) / denom;
    // The bounds are exactly 0 / 1 at the extremes; rounding would leave them off by ~1e-18.
    return {k == 0 ? 0.0 : std::max(0.0, centre - half), k == n ? 1.0 : std::min(1.0, centre + half)};
}

std::string csv_header() {
    return "scheme,direction,pilot,speed_lo_kmh,speed_hi_kmh,snr_db,bit_errors,total_bits,ber,ber_ci_lo,ber_ci_hi,"
           "block_errors,total_blocks,bler,tx_power";
}

std::string to_csv(const ResultRow& r) {
    std::ostringstream os;
    os << std::setprecision(10);
    os << r.scheme << ',' << r.direction << ',' << r.pilot << ',' << r.speed_lo_kmh << ',' << r.speed_hi_kmh << ','
       << r.snr_db << ',' << r.bit_errors << ',' << r.total_bits << ',' << r.ber << ',' << r.ber_ci_lo << ','
       << r.ber_ci_hi << ',' << r.block_errors << ',' << r.total_blocks << ',' << r.bler << ',' << r.tx_power;
    return os.str();
}

void write_csv(const std::string& path, const std::vector<ResultRow>& rows) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw std::runtime_error("cannot write '" + path + "'");
        out << csv_header() << '\n';
        for (const auto& r : rows) out << to_csv(r) << '\n';
        if (!out) throw std::runtime_error("write failed for '" + path + "'");
    }
    std::filesystem::rename(tmp, path);
}

void print_table(std::ostream& os, const std::vector<ResultRow>& rows) {
    os << std::left << std::setw(12) << "scheme" << std::setw(10) << "dir" << std::setw(5) << "pil" << std::right
       << std::setw(8) << "snr_dB" << std::setw(12) << "ber" << std::setw(25) << "95% CI" << std::setw(11) << "bler"
       << std::setw(10) << "bits" << std::setw(9) << "time_s" << '\n';
    for (const auto& r : rows) {
        std::ostringstream ci;
        ci << std::scientific << std::setprecision(2) << '[' << r.ber_ci_lo << ", " << r.ber_ci_hi << ']';
        os << std::left << std::setw(12) << r.scheme << std::setw(10) << r.direction << std::setw(5) << r.pilot
           << std::right << std::fixed << std::setprecision(1) << std::setw(8) << r.snr_db << std::scientific
           << std::setprecision(3) << std::setw(12) << r.ber << std::setw(25) << ci.str() << std::setw(11) << r.bler
           << std::defaultfloat << std::setw(10) << r.total_bits << std::fixed << std::setprecision(1) << std::setw(9)
           << r.wall_time_s << std::defaultfloat << '\n';
    }
}

// ---------------------------------------------------------------------------

ChannelTensor uplink_half(const ChannelTensor& h) {
    const int n_t = h.n_t() / 2;
    ChannelTensor out(h.n_f(), n_t, h.n_m(), h.n_k());
    for (int f = 0; f < h.n_f(); ++f)
        for (int t = 0; t < n_t; ++t) out.at(f, t) = h.at(f, t);
    return out;
}

namespace {

GridConfig ul_grid_of(const SimConfig& cfg) {
    GridConfig g = cfg.grid;
    if (cfg.direction == Direction::Downlink) g.pilot_kind = cfg.downlink_ul_pilot_kind;
    return g;
}

}  // namespace

Simulator::Simulator(const SimConfig& cfg)
    : cfg_(cfg),
      pattern_(cfg.grid),
      ul_pattern_(ul_grid_of(cfg)),
      constellation_(cfg.grid.bits_per_symbol),
      ml_ctx_(pattern_, ul_pattern_, cfg.grid.bits_per_symbol),
      ul_groups_(make_groups(pattern_, 0)) {
    cfg_.validate();
}

int Simulator::bits_per_user() const { return pattern_.n_data_res() * cfg_.grid.bits_per_symbol; }

ChannelModelConfig Simulator::channel_for(const SpeedRange& r) const {
    ChannelModelConfig c = cfg_.channel;
    c.user_speeds_mps.clear();
    c.speed_lo_mps = kmh_to_mps(r.lo_kmh);
    c.speed_hi_mps = kmh_to_mps(r.hi_kmh);
    return c;
}

std::uint64_t Simulator::stream_seed(std::uint64_t stream, const SpeedRange& r, double sigma2) const {
    return derive_seed(cfg_.seed, stream, mix64(bits_of(r.lo_kmh)) ^ bits_of(r.hi_kmh) ^ mix64(bits_of(sigma2) + 1));
}

const std::vector<CMat>& Simulator::sigma(const SpeedRange& r) {
    auto it = sigma_.find(r);
    if (it == sigma_.end()) {
        Rng rng(stream_seed(kStreamSigma, r, 0.0));
        it = sigma_.emplace(r, estimate_pilot_covariances(channel_for(r), ul_pattern_, cfg_.estimation.n_cov_samples,
                                                          rng))
                 .first;
    }
    return it->second;
}

const UplinkEstimator& Simulator::lmmse(const SpeedRange& r, double sigma2) {
    auto it = lmmse_.find(key(r, sigma2));
    if (it == lmmse_.end()) {
        auto est = std::make_unique<UplinkEstimator>(UplinkEstimator::lmmse(ul_pattern_, sigma(r), sigma2));
        it = lmmse_.emplace(key(r, sigma2), std::move(est)).first;
    }
    return *it->second;
}

const UplinkEstimator& Simulator::perfect() {
    if (!perfect_) perfect_ = std::make_unique<UplinkEstimator>(UplinkEstimator::perfect(ul_pattern_));
    return *perfect_;
}

const ErrorStats& Simulator::baseline_e(const SpeedRange& r, double sigma2) {
    auto it = baseline_e_.find(key(r, sigma2));
    if (it == baseline_e_.end()) it = baseline_e_.emplace(key(r, sigma2), lmmse(r, sigma2).pilot_error_stats()).first;
    return it->second;
}

const ErrorStats& Simulator::oracle_e(const SpeedRange& r, double sigma2, PilotCsi csi) {
    // Perfect pilot CSI does not depend on the noise level.
    const double s2 = csi == PilotCsi::Perfect ? 0.0 : sigma2;
    const auto k = std::make_tuple(r.lo_kmh, r.hi_kmh, s2, static_cast<int>(csi));
    auto it = oracle_e_.find(k);
    if (it == oracle_e_.end()) {
        const UplinkEstimator& est = csi == PilotCsi::Perfect ? perfect() : lmmse(r, sigma2);
        Rng rng(stream_seed(kStreamOracle + static_cast<int>(csi), r, s2));
        it = oracle_e_.emplace(k, true_error_stats_oracle(channel_for(r), est, sigma2, cfg_.estimation.n_oracle_mc, rng))
                 .first;
    }
    return it->second;
}

const std::vector<PilotLmmse>& Simulator::omega_filters(const SpeedRange& r, double sigma2) {
    auto it = omega_.find(key(r, sigma2));
    if (it == omega_.end()) {
        Rng rng(stream_seed(kStreamOmega, r, sigma2));
        const auto omega = estimate_omega(channel_for(r), lmmse(r, sigma2), pattern_, sigma2,
                                          cfg_.estimation.n_omega_samples, rng);
        std::vector<PilotLmmse> filters;
        for (const CMat& o : omega) filters.emplace_back(o, sigma2);
        it = omega_.emplace(key(r, sigma2), std::move(filters)).first;
    }
    return it->second;
}

const DownlinkStats& Simulator::dl_oracle(const SpeedRange& r, double sigma2, bool perfect_ue) {
    const auto k = std::make_tuple(r.lo_kmh, r.hi_kmh, sigma2, perfect_ue ? 1 : 0);
    auto it = dl_oracle_.find(k);
    if (it == dl_oracle_.end()) {
        const std::vector<PilotLmmse>* filters = perfect_ue ? nullptr : &omega_filters(r, sigma2);
        Rng rng(stream_seed(kStreamDlOracle + (perfect_ue ? 1 : 0), r, sigma2));
        it = dl_oracle_.emplace(k, downlink_oracle(channel_for(r), lmmse(r, sigma2), pattern_, filters, sigma2,
                                                   cfg_.estimation.n_oracle_mc, rng))
                 .first;
    }
    return it->second;
}

RgRecord Simulator::draw(std::uint64_t seed, double sigma2, const SpeedRange& range,
                         const std::vector<std::vector<std::uint8_t>>* bits) {
    const GridConfig& g = cfg_.grid;
    Rng rng(seed);
    RgRecord rec;
    rec.seed = seed;
    rec.sigma2 = sigma2;
    rec.range = range;
    const ChannelModelConfig ch = channel_for(range);
    rec.speeds_mps = draw_speeds(ch, g.n_users, rng);
    rec.h = normalized(generate_raw_channel(ch, g, rec.speeds_mps, rng));

    const int n_bits = bits_per_user();
    if (bits) {
        if (static_cast<int>(bits->size()) != g.n_users) throw std::invalid_argument("draw: one bit vector per user");
        for (const auto& b : *bits)
            if (static_cast<int>(b.size()) != n_bits) throw std::invalid_argument("draw: wrong number of bits");
        rec.bits = *bits;
    } else {
        std::bernoulli_distribution coin(0.5);
        rec.bits.assign(g.n_users, std::vector<std::uint8_t>(n_bits));
        for (auto& b : rec.bits)
            for (auto& x : b) x = coin(rng) ? 1 : 0;
    }

    if (cfg_.direction == Direction::Uplink) {
        const CTensor3 x = build_uplink_symbols(rec.bits, pattern_, constellation_);
        double e = 0;
        for (const cd& z : x.data()) e += std::norm(z);
        rec.tx_power = e / static_cast<double>(x.size());
        rec.y = apply_uplink(rec.h, x, sigma2, rng);
    } else {
        // The BS estimates from uplink pilots, then precodes the downlink slot.
        const UplinkEstimator& bs = lmmse(range, sigma2);
        const ChannelTensor h_hat = bs.estimate_from_channel(rec.h, sigma2, rng);
        const DownlinkPrecoder pre(h_hat, baseline_e(range, sigma2), sigma2, ul_pattern_);
        const CTensor3 u = build_downlink_symbols(rec.bits, pattern_, constellation_);
        const CTensor3 s = pre.precode_grid(u);
        double e = 0;
        for (const cd& z : s.data()) e += std::norm(z);
        rec.tx_power = e / (static_cast<double>(g.n_subcarriers) * g.n_symbols * g.n_users);
        rec.g = pre.equivalent_channel_grid(rec.h);
        rec.r = apply_downlink(rec.h, s, sigma2, rng);
    }
    return rec;
}

UplinkSample Simulator::uplink_sample(const RgRecord& rec) {
    UplinkSample s;
    s.h_hat = uplink_half(lmmse(rec.range, rec.sigma2).estimate(rec.y, rec.h));
    s.y = rec.y;
    s.sigma2 = rec.sigma2;
    s.bits = rec.bits;
    s.doppler_raw = doppler_feature(s.h_hat, pattern_);
    return s;
}

DownlinkSample Simulator::downlink_sample(const RgRecord& rec) {
    DownlinkSample s;
    s.r = rec.r;
    s.g_hat = ue_estimate(rec.r, pattern_, omega_filters(rec.range, rec.sigma2)).g_hat;
    s.sigma2 = rec.sigma2;
    s.bits = rec.bits;
    s.doppler_raw = doppler_feature(s.g_hat, pattern_);
    return s;
}

std::vector<std::vector<double>> Simulator::receive(const RgRecord& rec, Scheme scheme, const MlParams* params) {
    if (is_ml(scheme)) {
        if (!params) throw std::invalid_argument("receive: " + std::string(to_string(scheme)) + " needs trained parameters");
        if (params->direction != cfg_.direction || params->bits_per_symbol != cfg_.grid.bits_per_symbol)
            throw std::invalid_argument("receive: parameters were trained for a different direction or modulation");
        const ForwardResult fr = cfg_.direction == Direction::Uplink
                                     ? forward_uplink(*params, uplink_sample(rec), ml_ctx_, scheme)
                                     : forward_downlink(*params, downlink_sample(rec), ml_ctx_, scheme);
        return llr_tensor_to_users(fr.llr, ml_ctx_);
    }

    EqualizedGrid eq;
    if (cfg_.direction == Direction::Uplink) {
        if (scheme == Scheme::Baseline) {
            const UplinkEstimator& est = lmmse(rec.range, rec.sigma2);
            eq = equalize_uplink(est.estimate(rec.y, rec.h), baseline_e(rec.range, rec.sigma2), rec.y, rec.sigma2,
                                 ul_groups_);
        } else {
            eq = equalize_uplink(perfect().estimate(rec.y, rec.h), oracle_e(rec.range, rec.sigma2, PilotCsi::Perfect),
                                 rec.y, rec.sigma2, ul_groups_);
        }
    } else {
        if (scheme == Scheme::Baseline) {
            const UeEstimate est = ue_estimate(rec.r, pattern_, omega_filters(rec.range, rec.sigma2));
            eq = equalize_downlink(rec.r, est.g_hat, est.v, dl_oracle(rec.range, rec.sigma2, false).j, rec.sigma2);
        } else {
            const UeEstimate est = ue_estimate_perfect(rec.g, pattern_);
            const DownlinkStats& st = dl_oracle(rec.range, rec.sigma2, true);
            eq = equalize_downlink(rec.r, est.g_hat, st.v, st.j, rec.sigma2);
        }
    }
    return user_llrs(demap_grid(eq, constellation_, pattern_), pattern_);
}

int frame_rgs(int bits_per_user_per_rg, int code_length) {
    if (bits_per_user_per_rg < 1 || code_length < 1) throw std::invalid_argument("frame_rgs: sizes must be positive");
    return code_length / std::gcd(code_length, bits_per_user_per_rg);
}

std::vector<ResultRow> run_ber(const SimConfig& cfg, const MlParams* params, Simulator* sim_in,
                               std::ostream* progress) {
    std::unique_ptr<Simulator> owned;
    if (!sim_in) owned = std::make_unique<Simulator>(cfg);
    Simulator& sim = sim_in ? *sim_in : *owned;
    const auto code = load_code(cfg.code);
    const int n_k = cfg.grid.n_users;
    const int bpu = sim.bits_per_user();
    const int per_frame = code ? frame_rgs(bpu, code->n()) : 1;
    const int n_frames = (cfg.n_rgs + per_frame - 1) / per_frame;

    std::vector<ResultRow> rows;
    for (double snr : cfg.snr_db) {
        const auto t0 = std::chrono::steady_clock::now();
        const double sigma2 = config_sigma2(cfg, snr);
        ResultRow row;
        row.scheme = to_string(cfg.scheme);
        row.direction = to_string(cfg.direction);
        row.pilot = to_string(cfg.grid.pilot_kind);
        row.speed_lo_kmh = cfg.speed.lo_kmh;
        row.speed_hi_kmh = cfg.speed.hi_kmh;
        row.snr_db = snr;
        double tx = 0;
        int n_drawn = 0;

        for (int fi = 0; fi < n_frames; ++fi) {
            std::vector<std::vector<std::uint8_t>> messages;  // per user, concatenated codeword messages
            std::vector<std::vector<std::uint8_t>> stream;   // per user, frame bits
            if (code) {
                Rng rng(derive_seed(cfg.seed, kStreamFrame, static_cast<std::uint64_t>(fi)));
                std::bernoulli_distribution coin(0.5);
                const int n_cw = per_frame * bpu / code->n();
                messages.assign(n_k, {});
                stream.assign(n_k, {});
                for (int k = 0; k < n_k; ++k) {
                    for (int c = 0; c < n_cw; ++c) {
                        std::vector<std::uint8_t> msg(code->k());
                        for (auto& b : msg) b = coin(rng) ? 1 : 0;
                        const auto cw = code->encode(msg);
                        messages[k].insert(messages[k].end(), msg.begin(), msg.end());
                        stream[k].insert(stream[k].end(), cw.begin(), cw.end());
                    }
                }
            }
            std::vector<std::vector<double>> llr_stream(n_k);
            for (int r = 0; r < per_frame; ++r) {
                const std::uint64_t idx = static_cast<std::uint64_t>(fi) * per_frame + r;
                // Same grids at every SNR point; only the noise scale changes.
                const std::uint64_t seed = derive_seed(cfg.seed, kStreamEvalRg, idx);
                RgRecord rec;
                if (code) {
                    std::vector<std::vector<std::uint8_t>> bits(n_k);
                    for (int k = 0; k < n_k; ++k)
                        bits[k].assign(stream[k].begin() + static_cast<long>(r) * bpu,
                                       stream[k].begin() + static_cast<long>(r + 1) * bpu);
                    rec = sim.draw(seed, sigma2, cfg.speed, &bits);
                } else {
                    rec = sim.draw(seed, sigma2, cfg.speed);
                }
                tx += rec.tx_power;
                ++n_drawn;
                const auto llr = sim.receive(rec, cfg.scheme, params);
                for (int k = 0; k < n_k; ++k) {
                    if (code) {
                        llr_stream[k].insert(llr_stream[k].end(), llr[k].begin(), llr[k].end());
                        continue;
                    }
                    long long errs = 0;
                    for (int i = 0; i < bpu; ++i) errs += ((llr[k][i] > 0.0) ? 1 : 0) != rec.bits[k][i];
                    row.bit_errors += errs;
                    row.total_bits += bpu;
                    row.block_errors += errs > 0;
                    row.total_blocks += 1;
                }
            }
            if (code) {
                const int n = code->n(), kk = code->k();
                for (int k = 0; k < n_k; ++k) {
                    const int n_cw = static_cast<int>(llr_stream[k].size()) / n;
                    for (int c = 0; c < n_cw; ++c) {
                        const auto dec_llr =
                            to_decoder_llr(std::span<const double>(llr_stream[k].data() + static_cast<long>(c) * n, n));
                        const DecodeResult dec = bp_decode(*code, dec_llr, cfg.bp_iterations);
                        long long errs = 0;
                        for (int i = 0; i < kk; ++i) errs += dec.bits[i] != messages[k][static_cast<long>(c) * kk + i];
                        row.bit_errors += errs;
                        row.total_bits += kk;
                        row.block_errors += errs > 0;
                        row.total_blocks += 1;
                    }
                }
            }
            if (cfg.early_stop_errors > 0 && row.bit_errors >= cfg.early_stop_errors) {
                const auto [lo, hi] = wilson_interval(row.bit_errors, row.total_bits);
                const double p = static_cast<double>(row.bit_errors) / row.total_bits;
                if ((hi - lo) / 2.0 < 0.15 * p) break;
            }
        }
        row.ber = row.total_bits ? static_cast<double>(row.bit_errors) / row.total_bits : 0.0;
        std::tie(row.ber_ci_lo, row.ber_ci_hi) = wilson_interval(row.bit_errors, row.total_bits);
        row.bler = row.total_blocks ? static_cast<double>(row.block_errors) / row.total_blocks : 0.0;
        row.tx_power = n_drawn ? tx / n_drawn : 0.0;
        row.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (progress) {
            *progress << row.scheme << ' ' << row.direction << ' ' << row.pilot << " snr=" << snr << " dB ber=" << row.ber
                      << " bler=" << row.bler << " (" << row.wall_time_s << " s)\n";
        }
        rows.push_back(row);
    }
    return rows;
}

// ---------------------------------------------------------------------------

namespace {

// Calls fn(record) for every training grid without keeping them all alive.
template <typename Fn>
void for_each_training_record(Simulator& sim, int n_rgs, std::uint64_t seed, Fn&& fn) {
    const SimConfig& cfg = sim.config();
    const auto ranges = cfg.training_ranges();
    const auto counts = split_counts(n_rgs, static_cast<int>(ranges.size()));
    Rng snr_rng(derive_seed(seed, kStreamTrainSnr));
    std::uniform_int_distribution<std::size_t> pick(0, cfg.training.snr_db.size() - 1);
    std::uint64_t idx = 0;
    for (std::size_t ri = 0; ri < ranges.size(); ++ri) {
        for (int i = 0; i < counts[ri]; ++i, ++idx) {
            const double snr = cfg.training.snr_db[pick(snr_rng)];
            fn(sim.draw(derive_seed(seed, kStreamTrainRg, idx), config_sigma2(cfg, snr), ranges[ri]));
        }
    }
}

}  // namespace

std::vector<RgRecord> generate_records(Simulator& sim, int n_rgs, std::uint64_t seed) {
    std::vector<RgRecord> out;
    out.reserve(n_rgs);
    for_each_training_record(sim, n_rgs, seed, [&](RgRecord&& r) { out.push_back(std::move(r)); });
    return out;
}

void save_dataset(const std::string& dir, const SimConfig& cfg, const std::vector<RgRecord>& records) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const GridConfig& g = cfg.grid;
    std::vector<float> h, sig, gbuf;
    std::vector<std::uint8_t> bits;
    json recs = json::array();
    auto push_c = [](std::vector<float>& v, const std::vector<cd>& d) {
        for (const cd& z : d) {
            v.push_back(static_cast<float>(z.real()));
            v.push_back(static_cast<float>(z.imag()));
        }
    };
    for (const auto& r : records) {
        recs.push_back({{"seed", r.seed},
                        {"sigma2", r.sigma2},
                        {"speed_range_kmh", {r.range.lo_kmh, r.range.hi_kmh}},
                        {"speeds_mps", r.speeds_mps},
                        {"tx_power", r.tx_power}});
        push_c(h, r.h.data());
        push_c(sig, cfg.direction == Direction::Uplink ? r.y.data() : r.r.data());
        if (cfg.direction == Direction::Downlink) push_c(gbuf, r.g.data());
        for (const auto& b : r.bits) bits.insert(bits.end(), b.begin(), b.end());
    }
    const int n = static_cast<int>(records.size());
    const int rx_dim = cfg.direction == Direction::Uplink ? g.n_bs_antennas : g.n_users;
    const json base = {{"config", to_json(cfg)}, {"n_rgs", n}};
    auto side = [&](const char* name, json shape, json dims, const char* dtype) {
        json s = base;
        s["shape"] = std::move(shape);
        s["dims"] = std::move(dims);
        s["dtype"] = dtype;
        write_json(sidecar_path((fs::path(dir) / name).string()), s);
    };
    write_f32_blob((fs::path(dir) / "channels.bin").string(), h);
    side("channels.bin", {n, g.n_subcarriers, g.n_total_symbols(), g.n_bs_antennas, g.n_users},
         {"rg", "subcarrier", "symbol", "bs_antenna", "user"}, "complex64_interleaved_le");
    write_f32_blob((fs::path(dir) / "received.bin").string(), sig);
    side("received.bin", {n, g.n_subcarriers, g.n_symbols, rx_dim},
         {"rg", "subcarrier", "symbol", cfg.direction == Direction::Uplink ? "bs_antenna" : "user"},
         "complex64_interleaved_le");
    if (cfg.direction == Direction::Downlink) {
        write_f32_blob((fs::path(dir) / "equivalent_channels.bin").string(), gbuf);
        side("equivalent_channels.bin", {n, g.n_subcarriers, g.n_symbols, g.n_users, g.n_users},
             {"rg", "subcarrier", "symbol", "user", "stream"}, "complex64_interleaved_le");
    }
    write_u8_blob((fs::path(dir) / "bits.bin").string(), bits);
    const int bpu = records.empty() ? 0 : static_cast<int>(records.front().bits.front().size());
    side("bits.bin", {n, g.n_users, bpu}, {"rg", "user", "bit"}, "u8");
    json meta = base;
    meta["records"] = recs;
    write_json((fs::path(dir) / "records.json").string(), meta);
}

std::vector<RgRecord> load_dataset(const std::string& dir, const SimConfig& cfg) {
    namespace fs = std::filesystem;
    const json meta = read_json((fs::path(dir) / "records.json").string());
    const json& recs = meta.at("records");
    const GridConfig& g = cfg.grid;
    const int n = static_cast<int>(recs.size());
    const PilotPattern pattern(g);
    const int bpu = pattern.n_data_res() * g.bits_per_symbol;
    const int rx_dim = cfg.direction == Direction::Uplink ? g.n_bs_antennas : g.n_users;

    const auto h = read_f32_blob((fs::path(dir) / "channels.bin").string());
    const auto sig = read_f32_blob((fs::path(dir) / "received.bin").string());
    const auto bits = read_u8_blob((fs::path(dir) / "bits.bin").string());
    const std::size_t h_n = static_cast<std::size_t>(g.n_subcarriers) * g.n_total_symbols() * g.n_bs_antennas * g.n_users;
    const std::size_t s_n = static_cast<std::size_t>(g.n_subcarriers) * g.n_symbols * rx_dim;
    const std::size_t g_n = static_cast<std::size_t>(g.n_subcarriers) * g.n_symbols * g.n_users * g.n_users;
    if (h.size() != 2 * h_n * n || sig.size() != 2 * s_n * n ||
        bits.size() != static_cast<std::size_t>(n) * g.n_users * bpu)
        throw std::runtime_error("dataset '" + dir + "' does not match the configured grid");
    std::vector<float> gbuf;
    if (cfg.direction == Direction::Downlink) {
        gbuf = read_f32_blob((fs::path(dir) / "equivalent_channels.bin").string());
        if (gbuf.size() != 2 * g_n * n) throw std::runtime_error("dataset '" + dir + "': equivalent channel size mismatch");
    }

    auto fill = [](std::vector<cd>& out, const std::vector<float>& src, std::size_t off) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = cd(src[2 * (off + i)], src[2 * (off + i) + 1]);
    };
    std::vector<RgRecord> out(n);
    for (int i = 0; i < n; ++i) {
        RgRecord& r = out[i];
        const json& m = recs[i];
        r.seed = m.at("seed").get<std::uint64_t>();
        r.sigma2 = m.at("sigma2").get<double>();
        const auto sr = m.at("speed_range_kmh").get<std::vector<double>>();
        r.range = {sr.at(0), sr.at(1)};
        r.speeds_mps = m.at("speeds_mps").get<std::vector<double>>();
        r.tx_power = m.value("tx_power", 0.0);
        r.h = ChannelTensor(g.n_subcarriers, g.n_total_symbols(), g.n_bs_antennas, g.n_users);
        fill(r.h.data(), h, h_n * i);
        CTensor3 s(g.n_subcarriers, g.n_symbols, rx_dim);
        fill(s.data(), sig, s_n * i);
        if (cfg.direction == Direction::Uplink) {
            r.y = std::move(s);
        } else {
            r.r = std::move(s);
            r.g = ChannelTensor(g.n_subcarriers, g.n_symbols, g.n_users, g.n_users);
            fill(r.g.data(), gbuf, g_n * i);
        }
        r.bits.assign(g.n_users, std::vector<std::uint8_t>(bpu));
        for (int k = 0; k < g.n_users; ++k)
            std::copy_n(bits.begin() + (static_cast<std::size_t>(i) * g.n_users + k) * bpu, bpu, r.bits[k].begin());
    }
    return out;
}

TrainOutcome train_from_config(const SimConfig& cfg, Simulator& sim, std::vector<RgRecord> records, bool verbose) {
    if (!is_ml(cfg.scheme)) throw std::invalid_argument("train: scheme must be ml_chest or ml_receiver");
    TrainOutcome out{init_ml_params(cfg.direction, cfg.grid.bits_per_symbol, cfg.seed), {}};
    TrainOptions opt;
    opt.epochs = cfg.training.epochs;
    opt.batch_size = cfg.training.batch_size;
    opt.learning_rate = cfg.training.learning_rate;
    opt.max_steps = cfg.training.max_steps;
    opt.time_budget_s = cfg.training.time_budget_s;
    opt.verbose = verbose;
    Rng rng(derive_seed(cfg.seed, kStreamShuffle));
    const std::uint64_t data_seed = derive_seed(cfg.seed, kStreamTrainRg);

    if (cfg.direction == Direction::Uplink) {
        std::vector<UplinkSample> samples;
        auto add = [&](const RgRecord& r) { samples.push_back(sim.uplink_sample(r)); };
        if (records.empty()) {
            for_each_training_record(sim, cfg.training.n_rgs, data_seed, add);
        } else {
            for (auto& r : records) {
                add(r);
                r = RgRecord{};
            }
        }
        out.result = train(samples, sim.ml_context(), cfg.scheme, out.params, opt, rng);
    } else {
        std::vector<DownlinkSample> samples;
        auto add = [&](const RgRecord& r) { samples.push_back(sim.downlink_sample(r)); };
        if (records.empty()) {
            for_each_training_record(sim, cfg.training.n_rgs, data_seed, add);
        } else {
            for (auto& r : records) {
                add(r);
                r = RgRecord{};
            }
        }
        out.result = train(samples, sim.ml_context(), cfg.scheme, out.params, opt, rng);
    }
    return out;
}

void save_params(const std::string& path, const MlParams& p, const SimConfig& cfg) {
    const json extra = {{"direction", to_string(p.direction)},
                        {"bits_per_symbol", p.bits_per_symbol},
                        {"scheme", to_string(cfg.scheme)},
                        {"pilot_kind", to_string(cfg.grid.pilot_kind)},
                        {"gamma", p.gamma()},
                        {"theta", p.theta()}};
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    ad::save_checkpoint(path, p.named(), nullptr, extra);
}

MlParams load_params(const std::string& path, const SimConfig& cfg) {
    MlParams p = init_ml_params(cfg.direction, cfg.grid.bits_per_symbol, 0);
    const json extra = ad::load_checkpoint(path, p.named());
    if (extra.value("direction", std::string()) != to_string(cfg.direction))
        throw std::runtime_error("checkpoint '" + path + "' was trained for the " +
                                 extra.value("direction", std::string("?")) + " direction");
    return p;
}

}  // namespace mumimo
