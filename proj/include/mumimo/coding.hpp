#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mumimo {

/// Binary LDPC code with a systematic encoder (message bits first, parity
/// bits last). The parity part of H must be invertible over GF(2).
class LdpcCode {
public:
    /// rows[c] lists the (0-based) variable indices of check c.
    LdpcCode(int n, std::vector<std::vector<int>> rows);

    int n() const { return n_; }
    int m() const { return static_cast<int>(rows_.size()); }
    int k() const { return n_ - m(); }
    double rate() const { return static_cast<double>(k()) / n_; }

    const std::vector<std::vector<int>>& rows() const { return rows_; }
    const std::vector<std::vector<int>>& cols() const { return cols_; }

    std::vector<std::uint8_t> encode(std::span<const std::uint8_t> message) const;
    std::vector<std::uint8_t> syndrome(std::span<const std::uint8_t> word) const;
    bool is_codeword(std::span<const std::uint8_t> word) const;

private:
    int n_;
    std::vector<std::vector<int>> rows_, cols_;
    int words_ = 0;                     // 64-bit words per message
    std::vector<std::uint64_t> parity_; // m x words_: parity = P * message
};

/// Parses MacKay's alist format. Errors carry the line number.
LdpcCode load_alist(const std::string& text);
LdpcCode load_alist_file(const std::string& path);
std::string write_alist(const LdpcCode& code);

/// Expands a QC base matrix (-1 = zero block, e >= 0 = identity cyclically
/// shifted by e) with lifting size z.
LdpcCode expand_base_matrix(const std::vector<std::vector<int>>& base, int z);

/// IEEE 802.11n, n = 1296, rate 1/2 (Z = 54).
LdpcCode ieee80211n_1296_r12();

struct DecodeResult {
    std::vector<std::uint8_t> bits;  // full codeword estimate
    bool converged = false;
    int iterations = 0;
};

/// Sum-product flooding decoder on LLRs ln P(0)/P(1). Messages are clamped
/// to |L| <= 30; stops early once the hard decision has zero syndrome.
DecodeResult bp_decode(const LdpcCode& code, std::span<const double> llr, int max_iters = 40);

/// Demapper LLRs are ln P(1)/P(0); the decoder expects ln P(0)/P(1).
std::vector<double> to_decoder_llr(std::span<const double> demapper_llr);

}  // namespace mumimo
