#include "mumimo/grid.hpp"

#include "doctest.h"

#include <bit>
#include <cmath>
#include <limits>
#include <set>

using namespace mumimo;

namespace {

GridConfig cfg(int n_f, int n_k, PilotKind kind, int m = 4) {
    GridConfig g;
    g.n_subcarriers = n_f;
    g.n_users = n_k;
    g.pilot_kind = kind;
    g.bits_per_symbol = m;
    return g;
}

// Brute-force nearest pilot: minimum time distance first (earlier symbol on
// ties), then minimum frequency distance (lower subcarrier on ties).
Re nearest_pilot_oracle(const PilotPattern& p, int u, int f, int t_slot) {
    Re best{-1, -1};
    int best_dt = std::numeric_limits<int>::max(), best_df = best_dt;
    for (const Re& re : p.pilots(u)) {
        const int dt = std::abs(re.t - t_slot), df = std::abs(re.f - f);
        const bool better = dt < best_dt || (dt == best_dt && (re.t < best.t ||
                            (re.t == best.t && (df < best_df || (df == best_df && re.f < best.f)))));
        if (better) {
            best = re;
            best_dt = dt;
            best_df = df;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("pilot pattern counts and ownership") {
    for (auto kind : {PilotKind::OneP, PilotKind::TwoP}) {
        for (int n_k : {1, 2, 3, 4}) {
            const PilotPattern p(cfg(72, n_k, kind));
            const int n_pt = kind == PilotKind::OneP ? 1 : 2;
            CHECK(p.n_pf() == 72 / n_k);
            CHECK(p.n_pilots() == p.n_pf() * n_pt);
            std::set<std::pair<int, int>> seen;
            for (int u = 0; u < n_k; ++u) {
                CHECK(static_cast<int>(p.pilots(u).size()) == p.n_pilots());
                for (int i = 0; i < p.n_pilots(); ++i) {
                    const Re re = p.pilots(u)[i];
                    // index p = pf + N_Pf * pt
                    CHECK(re.f == u + (i % p.n_pf()) * n_k);
                    CHECK(re.t == p.pilot_symbols()[i / p.n_pf()]);
                    CHECK(p.pilot_owner(re.f, re.t) == u);
                    CHECK(seen.insert({re.f, re.t}).second);
                }
                const auto dl = p.downlink_pilots(u);
                for (int i = 0; i < p.n_pilots(); ++i) CHECK(dl[i].t == p.pilots(u)[i].t + 14);
            }
            int data = 0;
            for (int f = 0; f < 72; ++f)
                for (int t = 0; t < 14; ++t) data += p.is_data(f, t);
            CHECK(data == p.n_data_res());
            CHECK(data + static_cast<int>(seen.size()) == 72 * 14);
        }
    }
}

TEST_CASE("pilot symbols") {
    CHECK(PilotPattern(cfg(72, 4, PilotKind::OneP)).pilot_symbols() == std::vector<int>{2});
    CHECK(PilotPattern(cfg(72, 4, PilotKind::TwoP)).pilot_symbols() == std::vector<int>{2, 10});
}

TEST_CASE("governing pilot matches brute-force nearest search") {
    for (auto kind : {PilotKind::OneP, PilotKind::TwoP}) {
        for (int n_k : {2, 3, 4}) {
            const PilotPattern p(cfg(36, n_k, kind));
            for (int u = 0; u < n_k; ++u) {
                for (int f = 0; f < 36; ++f) {
                    for (int t = 0; t < 28; ++t) {
                        const Re want = nearest_pilot_oracle(p, u, f, t % 14);
                        const Re got = p.group_of(u, f, t);
                        CHECK(got.f == want.f);
                        CHECK(got.t == want.t + (t >= 14 ? 14 : 0));
                        const Re via_index = p.pilots(u)[p.governing_index(u, f, t)];
                        CHECK(via_index.f == want.f);
                        CHECK(via_index.t == want.t);
                        CHECK(p.time_offset(u, f, t) == t % 14 - want.t);
                        CHECK(p.freq_offset(u, f, t) == f - want.f);
                    }
                }
            }
        }
    }
}

TEST_CASE("two-user staggered example: user 1 at (f=1,t=3) uses pilot (1,3), user 2 uses (2,3)") {
    // 1-based positions: with N_k = 2, subcarrier 1 belongs to user 1 and subcarrier 2 to user 2.
    const PilotPattern p(cfg(12, 2, PilotKind::OneP));
    const Re a = p.group_of(0, 0, 2), b = p.group_of(1, 0, 2);
    CHECK(a.f == 0);
    CHECK(a.t == 2);
    CHECK(b.f == 1);
    CHECK(b.t == 2);
}

TEST_CASE("Gray QAM properties") {
    for (int m : {2, 4, 6, 8}) {
        const Constellation c(m);
        CHECK(c.size() == (1 << m));
        double e = 0;
        for (const cd& x : c.points()) e += std::norm(x);
        CHECK(e / c.size() == doctest::Approx(1.0).epsilon(1e-12));
        // Distinct points; nearest neighbours differ in exactly one bit.
        double dmin = 1e9;
        for (int a = 0; a < c.size(); ++a)
            for (int b = a + 1; b < c.size(); ++b) dmin = std::min(dmin, std::abs(c.point(a) - c.point(b)));
        CHECK(dmin > 1e-6);
        for (int a = 0; a < c.size(); ++a)
            for (int b = 0; b < c.size(); ++b)
                if (a != b && std::abs(std::abs(c.point(a) - c.point(b)) - dmin) < 1e-9)
                    CHECK(std::popcount(static_cast<unsigned>(a ^ b)) == 1);
        for (int i = 0; i < m; ++i) {
            CHECK(static_cast<int>(c.subset(i, 0).size()) == c.size() / 2);
            for (int l : c.subset(i, 1)) CHECK(c.bit(l, i) == 1);
        }
        for (int l = 0; l < c.size(); ++l) CHECK(c.nearest(c.point(l) * 1.01) == l);
    }
}

TEST_CASE("QPSK labels: bit 0 on the real axis, bit 1 on the imaginary axis, 1 maps positive") {
    const Constellation c(2);
    for (int l = 0; l < 4; ++l) {
        CHECK((c.point(l).real() > 0) == (c.bit(l, 0) == 1));
        CHECK((c.point(l).imag() > 0) == (c.bit(l, 1) == 1));
        CHECK(std::abs(std::abs(c.point(l).real()) - 1 / std::sqrt(2.0)) < 1e-12);
    }
}

TEST_CASE("map and hard demap round trip") {
    Rng rng(3);
    for (int m : {2, 4, 6}) {
        const Constellation c(m);
        std::vector<std::uint8_t> bits(m * 200);
        for (auto& b : bits) b = rng() & 1;
        const auto x = map_bits(bits, c);
        CHECK(x.size() == 200);
        CHECK(hard_demap(x, c) == bits);
    }
    const Constellation c(4);
    std::vector<std::uint8_t> odd(5, 0);
    CHECK_THROWS_AS(map_bits(odd, c), std::invalid_argument);
}

TEST_CASE("grid config validation names the field") {
    auto msg = [](GridConfig g) {
        try {
            g.validate();
        } catch (const std::invalid_argument& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    GridConfig g;
    g.n_subcarriers = 70;
    CHECK(msg(g).find("n_subcarriers") != std::string::npos);
    g = GridConfig{};
    g.bits_per_symbol = 3;
    CHECK(msg(g).find("bits_per_symbol") != std::string::npos);
    g = GridConfig{};
    g.n_symbols = 8;
    CHECK(msg(g).find("n_symbols") != std::string::npos);
    CHECK(msg(GridConfig{}).empty());
    CHECK_THROWS_AS(PilotPattern(cfg(72, 5, PilotKind::TwoP)), std::invalid_argument);
}

TEST_CASE("grid JSON round trip and 1-based pilot export") {
    GridConfig g = cfg(24, 2, PilotKind::OneP, 2);
    const auto j = to_json(g);
    const GridConfig back = grid_config_from_json(j);
    CHECK(back.n_subcarriers == 24);
    CHECK(back.n_users == 2);
    CHECK(back.bits_per_symbol == 2);
    CHECK(back.pilot_kind == PilotKind::OneP);
    const auto pj = to_json(PilotPattern(g));
    CHECK(pj["pilots"][0][0][0] == 1);
    CHECK(pj["pilots"][0][0][1] == 3);
    CHECK(pilot_kind_from_string("2P") == PilotKind::TwoP);
    CHECK_THROWS(pilot_kind_from_string("3P"));
}
