#include "mumimo/coding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mumimo {

namespace {

constexpr double kLlrClamp = 30.0;

}  // namespace

LdpcCode::LdpcCode(int n, std::vector<std::vector<int>> rows) : n_(n), rows_(std::move(rows)) {
    const int m = static_cast<int>(rows_.size());
    if (n_ < 1 || m < 1 || m >= n_) throw std::invalid_argument("LdpcCode: need 0 < m < n");
    cols_.assign(n_, {});
    for (int c = 0; c < m; ++c) {
        auto& r = rows_[c];
        std::sort(r.begin(), r.end());
        if (std::adjacent_find(r.begin(), r.end()) != r.end()) throw std::invalid_argument("LdpcCode: duplicate entry in check " + std::to_string(c));
        for (int v : r) {
            if (v < 0 || v >= n_) throw std::invalid_argument("LdpcCode: variable index out of range in check " + std::to_string(c));
            cols_[v].push_back(c);
        }
    }
    for (int v = 0; v < n_; ++v) {
        if (cols_[v].size() < 2) throw std::invalid_argument("LdpcCode: column " + std::to_string(v) + " has degree < 2");
    }

    // Gauss-Jordan on [H_p | H_s] with H_p the last m columns.
    const int k = n_ - m;
    const int pw = (m + 63) / 64;
    words_ = (k + 63) / 64;
    std::vector<std::vector<std::uint64_t>> hp(m, std::vector<std::uint64_t>(pw, 0));
    std::vector<std::vector<std::uint64_t>> hs(m, std::vector<std::uint64_t>(words_, 0));
    for (int c = 0; c < m; ++c) {
        for (int v : rows_[c]) {
            if (v >= k) hp[c][(v - k) / 64] |= 1ULL << ((v - k) % 64);
            else hs[c][v / 64] |= 1ULL << (v % 64);
        }
    }
    for (int col = 0; col < m; ++col) {
        const std::uint64_t bit = 1ULL << (col % 64);
        int piv = -1;
        for (int r = col; r < m; ++r)
            if (hp[r][col / 64] & bit) {
                piv = r;
                break;
            }
        if (piv < 0) throw std::invalid_argument("LdpcCode: parity part of H is singular; not encodable in systematic form");
        std::swap(hp[piv], hp[col]);
        std::swap(hs[piv], hs[col]);
        for (int r = 0; r < m; ++r) {
            if (r != col && (hp[r][col / 64] & bit)) {
                for (int w = 0; w < pw; ++w) hp[r][w] ^= hp[col][w];
                for (int w = 0; w < words_; ++w) hs[r][w] ^= hs[col][w];
            }
        }
    }
    // Now H_p -> I, so parity bit r = (H_s' m)_r.
    parity_.assign(static_cast<std::size_t>(m) * words_, 0);
    for (int r = 0; r < m; ++r) std::copy(hs[r].begin(), hs[r].end(), parity_.begin() + static_cast<std::size_t>(r) * words_);
}

std::vector<std::uint8_t> LdpcCode::encode(std::span<const std::uint8_t> message) const {
    if (static_cast<int>(message.size()) != k()) {
        throw std::invalid_argument("encode: message length " + std::to_string(message.size()) + ", expected " + std::to_string(k()));
    }
    std::vector<std::uint64_t> mw(words_, 0);
    for (int i = 0; i < k(); ++i)
        if (message[i] & 1) mw[i / 64] |= 1ULL << (i % 64);
    std::vector<std::uint8_t> cw(message.begin(), message.end());
    cw.resize(n_);
    for (int r = 0; r < m(); ++r) {
        std::uint64_t acc = 0;
        const std::uint64_t* row = parity_.data() + static_cast<std::size_t>(r) * words_;
        for (int w = 0; w < words_; ++w) acc ^= row[w] & mw[w];
        cw[k() + r] = static_cast<std::uint8_t>(__builtin_popcountll(acc) & 1);
    }
    return cw;
}

std::vector<std::uint8_t> LdpcCode::syndrome(std::span<const std::uint8_t> word) const {
    if (static_cast<int>(word.size()) != n_) throw std::invalid_argument("syndrome: word length mismatch");
    std::vector<std::uint8_t> s(m(), 0);
    for (int c = 0; c < m(); ++c)
        for (int v : rows_[c]) s[c] ^= word[v] & 1;
    return s;
}

bool LdpcCode::is_codeword(std::span<const std::uint8_t> word) const {
    const auto s = syndrome(word);
    return std::all_of(s.begin(), s.end(), [](std::uint8_t b) { return b == 0; });
}

namespace {

// Whitespace tokenizer that remembers line numbers.
class AlistReader {
public:
    explicit AlistReader(const std::string& text) : is_(text) {}

    int next_int(const char* what) {
        while (true) {
            if (ls_ >> tok_) {
                try {
                    std::size_t pos = 0;
                    const int v = std::stoi(tok_, &pos);
                    if (pos != tok_.size()) throw std::invalid_argument("");
                    return v;
                } catch (const std::exception&) {
                    fail(std::string("expected integer for ") + what + ", got '" + tok_ + "'");
                }
            }
            std::string line;
            if (!std::getline(is_, line)) fail(std::string("unexpected end of file while reading ") + what);
            ++line_no_;
            ls_.clear();
            ls_.str(line);
        }
    }

    /// Moves to the next line so that per-column/row lists start fresh.
    void end_line() {
        std::string rest;
        if (ls_ >> rest) fail("unexpected extra token '" + rest + "'");
        ls_.clear();
        ls_.str("");
    }

    [[noreturn]] void fail(const std::string& msg) const {
        throw std::runtime_error("alist line " + std::to_string(line_no_) + ": " + msg);
    }

private:
    std::istringstream is_;
    std::istringstream ls_;
    std::string tok_;
    int line_no_ = 0;
};

}  // namespace

LdpcCode load_alist(const std::string& text) {
    AlistReader rd(text);
    const int n = rd.next_int("n");
    const int m = rd.next_int("m");
    rd.end_line();
    if (n < 1 || m < 1 || m >= n) rd.fail("invalid dimensions");
    const int max_col = rd.next_int("max column degree");
    const int max_row = rd.next_int("max row degree");
    rd.end_line();
    if (max_col < 1 || max_row < 1) rd.fail("invalid maximum degrees");
    std::vector<int> col_deg(n), row_deg(m);
    for (int& d : col_deg) {
        d = rd.next_int("column degree");
        if (d < 0 || d > max_col) rd.fail("column degree out of range");
    }
    rd.end_line();
    for (int& d : row_deg) {
        d = rd.next_int("row degree");
        if (d < 0 || d > max_row) rd.fail("row degree out of range");
    }
    rd.end_line();
    std::vector<std::vector<int>> cols(n);
    for (int v = 0; v < n; ++v) {
        // Entries beyond the degree are zero padding (optional in some writers).
        for (int i = 0; i < col_deg[v]; ++i) {
            const int c = rd.next_int("column entry");
            if (c < 1 || c > m) rd.fail("row index out of range in column " + std::to_string(v + 1));
            cols[v].push_back(c - 1);
        }
        for (int i = col_deg[v]; i < max_col; ++i) {
            const int z = rd.next_int("column padding");
            if (z != 0) rd.fail("expected zero padding in column " + std::to_string(v + 1));
        }
        rd.end_line();
    }
    std::vector<std::vector<int>> rows(m);
    for (int c = 0; c < m; ++c) {
        for (int i = 0; i < row_deg[c]; ++i) {
            const int v = rd.next_int("row entry");
            if (v < 1 || v > n) rd.fail("column index out of range in row " + std::to_string(c + 1));
            rows[c].push_back(v - 1);
        }
        for (int i = row_deg[c]; i < max_row; ++i) {
            const int z = rd.next_int("row padding");
            if (z != 0) rd.fail("expected zero padding in row " + std::to_string(c + 1));
        }
        rd.end_line();
    }
    // Column and row lists must describe the same matrix.
    std::vector<std::vector<int>> from_cols(m);
    for (int v = 0; v < n; ++v)
        for (int c : cols[v]) from_cols[c].push_back(v);
    for (int c = 0; c < m; ++c) {
        auto a = rows[c];
        std::sort(a.begin(), a.end());
        if (a != from_cols[c]) throw std::runtime_error("alist: row " + std::to_string(c + 1) + " disagrees with the column lists");
    }
    return LdpcCode(n, std::move(rows));
}

LdpcCode load_alist_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open alist file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return load_alist(ss.str());
}

std::string write_alist(const LdpcCode& code) {
    std::ostringstream os;
    std::size_t max_col = 0, max_row = 0;
    for (const auto& c : code.cols()) max_col = std::max(max_col, c.size());
    for (const auto& r : code.rows()) max_row = std::max(max_row, r.size());
    os << code.n() << ' ' << code.m() << '\n' << max_col << ' ' << max_row << '\n';
    auto degrees = [&os](const std::vector<std::vector<int>>& lists) {
        for (std::size_t i = 0; i < lists.size(); ++i) os << (i ? " " : "") << lists[i].size();
        os << '\n';
    };
    degrees(code.cols());
    degrees(code.rows());
    auto entries = [&os](const std::vector<std::vector<int>>& lists, std::size_t width) {
        for (const auto& l : lists) {
            for (std::size_t i = 0; i < width; ++i) os << (i ? " " : "") << (i < l.size() ? l[i] + 1 : 0);
            os << '\n';
        }
    };
    entries(code.cols(), max_col);
    entries(code.rows(), max_row);
    return os.str();
}

LdpcCode expand_base_matrix(const std::vector<std::vector<int>>& base, int z) {
    if (base.empty() || z < 1) throw std::invalid_argument("expand_base_matrix: empty base or bad z");
    const int nb = static_cast<int>(base[0].size());
    std::vector<std::vector<int>> rows(base.size() * z);
    for (std::size_t i = 0; i < base.size(); ++i) {
        if (static_cast<int>(base[i].size()) != nb) throw std::invalid_argument("expand_base_matrix: ragged base matrix");
        for (int j = 0; j < nb; ++j) {
            const int e = base[i][j];
            if (e < 0) continue;
            for (int r = 0; r < z; ++r) rows[i * z + r].push_back(j * z + (r + e) % z);
        }
    }
    return LdpcCode(nb * z, std::move(rows));
}

LdpcCode ieee80211n_1296_r12() {
    constexpr int X = -1;
    const std::vector<std::vector<int>> base = {
        {40, X, X, X, 22, X, 49, 23, 43, X, X, X, 1, 0, X, X, X, X, X, X, X, X, X, X},
        {50, 1, X, X, 48, 35, X, X, 13, X, 30, X, X, 0, 0, X, X, X, X, X, X, X, X, X},
        {39, 50, X, X, 4, X, 2, X, X, X, X, 49, X, X, 0, 0, X, X, X, X, X, X, X, X},
        {33, X, X, 38, 37, X, X, 4, 1, X, X, X, X, X, X, 0, 0, X, X, X, X, X, X, X},
        {45, X, X, X, 0, 22, X, X, 20, 42, X, X, X, X, X, X, 0, 0, X, X, X, X, X, X},
        {51, X, X, 48, 35, X, X, X, 44, X, 18, X, X, X, X, X, X, 0, 0, X, X, X, X, X},
        {47, 11, X, X, X, 17, X, X, 51, X, X, X, 0, X, X, X, X, X, 0, 0, X, X, X, X},
        {5, X, 25, X, 6, X, 45, X, 13, 40, X, X, X, X, X, X, X, X, X, 0, 0, X, X, X},
        {33, X, X, 34, 24, X, X, X, 23, X, X, 46, X, X, X, X, X, X, X, X, 0, 0, X, X},
        {1, X, 27, X, 1, X, X, X, 38, X, 44, X, X, X, X, X, X, X, X, X, X, 0, 0, X},
        {X, 18, X, X, 23, X, X, 8, 0, 35, X, X, X, X, X, X, X, X, X, X, X, X, 0, 0},
        {49, X, 17, X, 30, X, X, X, 34, X, X, 19, 1, X, X, X, X, X, X, X, X, X, X, 0},
    };
    return expand_base_matrix(base, 54);
}

DecodeResult bp_decode(const LdpcCode& code, std::span<const double> llr, int max_iters) {
    const int n = code.n();
    if (static_cast<int>(llr.size()) != n) throw std::invalid_argument("bp_decode: LLR length mismatch");
    if (max_iters < 1) throw std::invalid_argument("bp_decode: max_iters must be >= 1");
    const auto& rows = code.rows();
    // Edge storage in check-major order.
    std::vector<int> row_start(rows.size() + 1, 0);
    for (std::size_t c = 0; c < rows.size(); ++c) row_start[c + 1] = row_start[c] + static_cast<int>(rows[c].size());
    const int n_edges = row_start.back();
    std::vector<int> edge_var(n_edges);
    for (std::size_t c = 0; c < rows.size(); ++c)
        for (std::size_t i = 0; i < rows[c].size(); ++i) edge_var[row_start[c] + i] = rows[c][i];

    std::vector<double> ch(n);
    for (int v = 0; v < n; ++v) {
        if (!std::isfinite(llr[v])) throw std::invalid_argument("bp_decode: non-finite LLR");
        ch[v] = std::clamp(llr[v], -kLlrClamp, kLlrClamp);
    }
    std::vector<double> v2c(n_edges), c2v(n_edges, 0.0), total(n);
    for (int e = 0; e < n_edges; ++e) v2c[e] = ch[edge_var[e]];

    DecodeResult res;
    res.bits.assign(n, 0);
    std::vector<double> t, fwd, bwd;
    for (int it = 1; it <= max_iters; ++it) {
        for (std::size_t c = 0; c < rows.size(); ++c) {
            const int b = row_start[c], d = row_start[c + 1] - b;
            t.resize(d);
            fwd.resize(d + 1);
            bwd.resize(d + 1);
            for (int i = 0; i < d; ++i) t[i] = std::tanh(0.5 * v2c[b + i]);
            fwd[0] = 1.0;
            for (int i = 0; i < d; ++i) fwd[i + 1] = fwd[i] * t[i];
            bwd[d] = 1.0;
            for (int i = d - 1; i >= 0; --i) bwd[i] = bwd[i + 1] * t[i];
            for (int i = 0; i < d; ++i) {
                const double p = std::clamp(fwd[i] * bwd[i + 1], -1.0 + 1e-15, 1.0 - 1e-15);
                c2v[b + i] = std::clamp(2.0 * std::atanh(p), -kLlrClamp, kLlrClamp);
            }
        }
        std::copy(ch.begin(), ch.end(), total.begin());
        for (int e = 0; e < n_edges; ++e) total[edge_var[e]] += c2v[e];
        for (int e = 0; e < n_edges; ++e) v2c[e] = std::clamp(total[edge_var[e]] - c2v[e], -kLlrClamp, kLlrClamp);
        // A tie (L = 0) decides 1 so that an all-zero input cannot look converged.
        for (int v = 0; v < n; ++v) res.bits[v] = total[v] <= 0.0 ? 1 : 0;
        res.iterations = it;
        if (code.is_codeword(res.bits)) {
            res.converged = true;
            break;
        }
    }
    return res;
}

std::vector<double> to_decoder_llr(std::span<const double> demapper_llr) {
    std::vector<double> out(demapper_llr.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = -demapper_llr[i];
    return out;
}

}  // namespace mumimo
