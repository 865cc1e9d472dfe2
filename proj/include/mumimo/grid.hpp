#pragma once

#include "mumimo/common.hpp"

#include "json.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace mumimo {

enum class PilotKind { OneP, TwoP };

const char* to_string(PilotKind kind);
PilotKind pilot_kind_from_string(const std::string& s);

struct GridConfig {
    int n_subcarriers = 72;  // N_f
    int n_symbols = 14;      // N_t, per slot
    int n_bs_antennas = 16;  // N_m
    int n_users = 4;         // N_k
    int bits_per_symbol = 4; // M
    PilotKind pilot_kind = PilotKind::TwoP;

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;

    int n_total_symbols() const { return 2 * n_symbols; }
};

/// Staggered orthogonal pilots. User u transmits unit pilots on subcarriers
/// u, u + N_k, u + 2 N_k, ... of every pilot symbol of both slots; pilot
/// symbols are 2 (OneP) or {2, 10} (TwoP), 0-based within a slot.
class PilotPattern {
public:
    explicit PilotPattern(const GridConfig& cfg);

    const GridConfig& config() const { return cfg_; }
    int n_pf() const { return n_pf_; }
    int n_pt() const { return static_cast<int>(pilot_symbols_.size()); }
    /// Pilots per user per slot, N_Pf * N_Pt.
    int n_pilots() const { return n_pf_ * n_pt(); }
    const std::vector<int>& pilot_symbols() const { return pilot_symbols_; }

    /// Uplink pilot REs of user u ordered with frequency fastest:
    /// index p = pf + N_Pf * pt. Downlink pilots are the same REs shifted by N_t.
    const std::vector<Re>& pilots(int u) const { return pilots_[u]; }
    std::vector<Re> downlink_pilots(int u) const;

    /// Governing pilot RE of (f, t) for user u; t spans both slots and each
    /// slot is governed by its own pilots.
    Re group_of(int u, int f, int t) const;
    /// Pilot index (into pilots(u)) of the governing pilot of (f, t).
    int governing_index(int u, int f, int t) const;

    /// User owning a pilot at (f, t), or -1 for a data RE.
    int pilot_owner(int f, int t) const;
    bool is_data(int f, int t) const { return pilot_owner(f, t) < 0; }
    /// Data REs per slot.
    int n_data_res() const;

    /// Signed distance in symbols / subcarriers to the governing pilot.
    int time_offset(int u, int f, int t) const;
    int freq_offset(int u, int f, int t) const;

private:
    int nearest_symbol_index(int t_in_slot) const;
    int nearest_subcarrier_index(int u, int f) const;

    GridConfig cfg_;
    int n_pf_ = 0;
    std::vector<int> pilot_symbols_;
    std::vector<std::vector<Re>> pilots_;
};

/// Square Gray-labeled QAM with unit mean energy. Bit i < M/2 labels the
/// real axis, the rest the imaginary axis; the label of points[c] is c, with
/// bit i of the symbol stored in bit i of the label.
class Constellation {
public:
    explicit Constellation(int bits_per_symbol);

    int bits_per_symbol() const { return m_; }
    int size() const { return static_cast<int>(points_.size()); }
    const std::vector<cd>& points() const { return points_; }
    cd point(int label) const { return points_[label]; }
    int bit(int label, int i) const { return (label >> i) & 1; }
    /// Labels whose bit i equals `value`.
    const std::vector<int>& subset(int i, int value) const { return subsets_[2 * i + value]; }

    int nearest(cd x) const;

private:
    int m_;
    std::vector<cd> points_;
    std::vector<std::vector<int>> subsets_;
};

Constellation gray_qam(int bits_per_symbol);

/// Maps consecutive groups of M bits (bit i of each group is symbol bit i).
std::vector<cd> map_bits(std::span<const std::uint8_t> bits, const Constellation& c);
std::vector<std::uint8_t> hard_demap(std::span<const cd> symbols, const Constellation& c);

nlohmann::json to_json(const GridConfig& cfg);
GridConfig grid_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PilotPattern& p);
nlohmann::json to_json(const Constellation& c);

}  // namespace mumimo
