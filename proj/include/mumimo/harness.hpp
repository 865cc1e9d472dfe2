#pragma once

#include "mumimo/channel.hpp"
#include "mumimo/coding.hpp"
#include "mumimo/common.hpp"
#include "mumimo/downlink.hpp"
#include "mumimo/estimator.hpp"
#include "mumimo/grid.hpp"
#include "mumimo/ml_rx.hpp"
#include "mumimo/uplink_rx.hpp"

#include "json.hpp"

#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace mumimo {

/// Raised for invalid configuration values; `path` names the field.
class ConfigError : public std::invalid_argument {
public:
    ConfigError(const std::string& path, const std::string& msg)
        : std::invalid_argument(path + ": " + msg), path_(path) {}
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

struct SpeedRange {
    double lo_kmh = 0.0;
    double hi_kmh = 0.0;
    friend bool operator==(const SpeedRange&, const SpeedRange&) = default;
    friend auto operator<=>(const SpeedRange&, const SpeedRange&) = default;
};

/// Training speed ranges: 0-5, 10-20, 25-35 km/h (OneP), 40-60, 70-90, 110-130 km/h (TwoP).
std::vector<SpeedRange> default_speed_ranges(PilotKind kind);
/// Splits n items as evenly as possible over `parts` (earlier parts get the remainder).
std::vector<int> split_counts(int n, int parts);

struct TrainingConfig {
    double learning_rate = 1e-3;
    int batch_size = 27;
    int epochs = 20;
    int n_rgs = 300;
    std::vector<SpeedRange> speed_ranges;  // empty -> defaults for the pilot kind
    std::vector<double> snr_db{0.0, 5.0, 10.0, 15.0, 20.0};
    int max_steps = 0;
    double time_budget_s = 0.0;
};

struct EstimationConfig {
    int n_cov_samples = 10000;   // Monte Carlo samples for Sigma
    int n_oracle_mc = 1000;      // realizations for E, v and j oracles
    int n_omega_samples = 2000;  // realizations for Omega
};

struct SimConfig {
    GridConfig grid;
    ChannelModelConfig channel;
    Direction direction = Direction::Uplink;
    Scheme scheme = Scheme::Baseline;
    std::vector<double> snr_db{0.0, 5.0, 10.0, 15.0, 20.0};
    /// "es": sigma^2 = 10^(-snr/10); "ebn0": snr is Eb/N0 in dB.
    std::string snr_mode = "es";
    SpeedRange speed{110.0, 130.0};
    int n_rgs = 100;
    std::uint64_t seed = 1;
    /// "uncoded", "ieee80211n_1296_r12" or a path to an alist file.
    std::string code = "ieee80211n_1296_r12";
    int bp_iterations = 40;
    /// Stop an SNR point once this many bit errors were seen and the BER
    /// interval half-width is below 15% of the estimate (0 = never).
    int early_stop_errors = 0;
    /// Pilot pattern the BS uses for uplink estimation in downlink runs.
    PilotKind downlink_ul_pilot_kind = PilotKind::TwoP;
    EstimationConfig estimation;
    TrainingConfig training;
    std::string checkpoint;

    void validate() const;
    std::vector<SpeedRange> training_ranges() const;
};

nlohmann::json to_json(const SimConfig& cfg);
/// Read-only values implied by a config (code length and rate, gamma
/// initialization, the speed ranges of both pilot patterns).
nlohmann::json derived_json(const SimConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected ("derived"
/// is accepted and ignored so show-config output loads back). When the
/// direction is downlink and grid.bits_per_symbol is absent, M defaults to 2.
SimConfig sim_config_from_json(const nlohmann::json& j);
SimConfig load_sim_config(const std::string& path);

/// "a:b:step" (inclusive) or a comma-separated list.
std::vector<double> parse_snr_spec(const std::string& spec);
/// sigma^2 for one SNR point under cfg.snr_mode and the code rate.
double config_sigma2(const SimConfig& cfg, double snr_db);

std::optional<LdpcCode> load_code(const std::string& id);

struct ResultRow {
    std::string scheme;
    std::string direction;
    std::string pilot;
    double speed_lo_kmh = 0, speed_hi_kmh = 0;
    double snr_db = 0;
    long long bit_errors = 0, total_bits = 0;
    double ber = 0, ber_ci_lo = 0, ber_ci_hi = 0;
    long long block_errors = 0, total_blocks = 0;
    double bler = 0;
    double tx_power = 0;  // mean transmit energy per RE and stream
    double wall_time_s = 0;
};

/// Wilson score interval (95% by default).
std::pair<double, double> wilson_interval(long long k, long long n, double z = 1.959963984540054);

/// CSV columns (fixed order): scheme, direction, pilot, speed_lo_kmh,
/// speed_hi_kmh, snr_db, bit_errors, total_bits, ber, ber_ci_lo, ber_ci_hi,
/// block_errors, total_blocks, bler, tx_power. Wall time is excluded so
/// that CSVs are reproducible.
std::string csv_header();
std::string to_csv(const ResultRow& r);
void write_csv(const std::string& path, const std::vector<ResultRow>& rows);
void print_table(std::ostream& os, const std::vector<ResultRow>& rows);

/// One simulated resource grid.
struct RgRecord {
    std::uint64_t seed = 0;
    double sigma2 = 0;
    SpeedRange range;
    std::vector<double> speeds_mps;
    ChannelTensor h;
    std::vector<std::vector<std::uint8_t>> bits;  // per user, over the data REs of the evaluated slot
    CTensor3 y;  // received uplink slot at the BS
    // Downlink only:
    CTensor3 r;      // received downlink slot at the UEs
    ChannelTensor g;  // true equivalent channel
    double tx_power = 0;
};

/// Shared state of a simulation run: patterns, Monte Carlo statistics and
/// per-SNR receiver caches.
class Simulator {
public:
    explicit Simulator(const SimConfig& cfg);

    const SimConfig& config() const { return cfg_; }
    /// Pattern of the evaluated slot (uplink receive or downlink UE pattern).
    const PilotPattern& pattern() const { return pattern_; }
    /// Pattern the BS estimates the uplink with.
    const PilotPattern& ul_pattern() const { return ul_pattern_; }
    const Constellation& constellation() const { return constellation_; }
    const MlContext& ml_context() const { return ml_ctx_; }
    int bits_per_user() const;

    ChannelModelConfig channel_for(const SpeedRange& r) const;

    const std::vector<CMat>& sigma(const SpeedRange& r);
    const UplinkEstimator& lmmse(const SpeedRange& r, double sigma2);
    const UplinkEstimator& perfect();
    const ErrorStats& baseline_e(const SpeedRange& r, double sigma2);
    const ErrorStats& oracle_e(const SpeedRange& r, double sigma2, PilotCsi csi);
    const std::vector<PilotLmmse>& omega_filters(const SpeedRange& r, double sigma2);
    const DownlinkStats& dl_oracle(const SpeedRange& r, double sigma2, bool perfect_ue);

    /// Draws a grid: speeds, channel, bits (random unless given) and the
    /// received signals. Consumes only the RNG seeded by `seed`.
    RgRecord draw(std::uint64_t seed, double sigma2, const SpeedRange& range,
                  const std::vector<std::vector<std::uint8_t>>* bits = nullptr);

    /// Demapper LLRs (ln P(1)/P(0)) per user in (f, t, bit) data order.
    std::vector<std::vector<double>> receive(const RgRecord& rec, Scheme scheme, const MlParams* params);

    UplinkSample uplink_sample(const RgRecord& rec);
    DownlinkSample downlink_sample(const RgRecord& rec);

private:
    using Key = std::tuple<double, double, double>;
    Key key(const SpeedRange& r, double sigma2) const { return {r.lo_kmh, r.hi_kmh, sigma2}; }
    std::uint64_t stream_seed(std::uint64_t stream, const SpeedRange& r, double sigma2) const;

    SimConfig cfg_;
    PilotPattern pattern_;
    PilotPattern ul_pattern_;
    Constellation constellation_;
    MlContext ml_ctx_;
    std::vector<EqualizerGroup> ul_groups_;
    std::map<SpeedRange, std::vector<CMat>> sigma_;
    std::map<Key, std::unique_ptr<UplinkEstimator>> lmmse_;
    std::unique_ptr<UplinkEstimator> perfect_;
    std::map<Key, ErrorStats> baseline_e_;
    std::map<std::tuple<double, double, double, int>, ErrorStats> oracle_e_;
    std::map<Key, std::vector<PilotLmmse>> omega_;
    std::map<std::tuple<double, double, double, int>, DownlinkStats> dl_oracle_;
};

/// Upper half removed: the uplink slot of a channel tensor.
ChannelTensor uplink_half(const ChannelTensor& h);

/// Smallest number of grids whose per-user data bits fill whole codewords.
int frame_rgs(int bits_per_user_per_rg, int code_length);

/// Monte Carlo BER/BLER over cfg.snr_db. ML schemes need `params`.
std::vector<ResultRow> run_ber(const SimConfig& cfg, const MlParams* params = nullptr, Simulator* sim = nullptr,
                               std::ostream* progress = nullptr);

/// Training grids: n_rgs split evenly over the training speed ranges, SNR
/// drawn uniformly from training.snr_db.
std::vector<RgRecord> generate_records(Simulator& sim, int n_rgs, std::uint64_t seed);

/// Dataset directory: records.json plus channel/bit/signal blobs with sidecars.
void save_dataset(const std::string& dir, const SimConfig& cfg, const std::vector<RgRecord>& records);
std::vector<RgRecord> load_dataset(const std::string& dir, const SimConfig& cfg);

struct TrainOutcome {
    MlParams params;
    TrainResult result;
};

/// Trains cfg.scheme (ml_chest / ml_receiver) from `records` (generated when empty).
TrainOutcome train_from_config(const SimConfig& cfg, Simulator& sim, std::vector<RgRecord> records = {},
                               bool verbose = false);
void save_params(const std::string& path, const MlParams& p, const SimConfig& cfg);
MlParams load_params(const std::string& path, const SimConfig& cfg);

}  // namespace mumimo
