#include "qkdsim/keyrate.hpp"

#include "doctest.h"

#include <cmath>
#include <limits>

using namespace qkdsim;

namespace {

// Independent transcription of the one-decoy bounds, used as the oracle.
struct Oracle {
    double s0_low, s0_up, s1_low;
};

Oracle one_decoy(const TallyBlock& b, Basis basis, double eps) {
    const auto& c = b.cfg;
    const double m1 = c.mu1, m2 = c.mu2, p1 = c.p_mu1, p2 = 1 - c.p_mu1;
    const double t0 = p1 * std::exp(-m1) + p2 * std::exp(-m2);
    const double t1 = p1 * m1 * std::exp(-m1) + p2 * m2 * std::exp(-m2);
    auto delta = [&](double n) { return std::sqrt(n / 2 * std::log(1 / eps)); };
    const double N = b.n(basis), M = b.m(basis);
    const double n1p = std::exp(m1) / p1 * (b.at(basis, Intensity::Signal).n + delta(N));
    const double n2m = std::exp(m2) / p2 * (b.at(basis, Intensity::Decoy).n - delta(N));
    const double e2p = std::exp(m2) / p2 * (b.at(basis, Intensity::Decoy).m + delta(M));
    Oracle o{};
    o.s0_up = 2 * t0 * e2p;
    o.s0_low = t0 / (m1 - m2) * (m1 * n2m - m2 * n1p);
    o.s1_low = t1 * m1 / (m2 * (m1 - m2)) *
               (n2m - m2 * m2 / (m1 * m1) * n1p - (m1 * m1 - m2 * m2) / (m1 * m1) * o.s0_up / t0);
    return o;
}

TallyBlock published_mode1() {
    return reconstruct_block(active_decoy_config(),
                             {{3.78e6, 0.32e6}, {0.0443, 0.0443}, std::array{0.0214, 0.0214}}, 1);
}

TallyBlock published_mode2() {
    return reconstruct_block(active_decoy_config(), {{1.97e6, 0.17e6}, {0.0556, 0.0556}, std::nullopt}, 2);
}

}  // namespace

TEST_CASE("hoeffding delta") {
    CHECK(hoeffding_delta(0, 1e-9) == 0.0);
    CHECK(hoeffding_delta(1e9, 1e-9) == doctest::Approx(std::sqrt(5e8 * std::log(1e9))));
    CHECK(hoeffding_delta(1e9, 1e-9) == doctest::Approx(1.0179e5).epsilon(1e-4));
    CHECK(hoeffding_delta(1e9, 1.0) == 0.0);
    CHECK(hoeffding_delta(1e9, 1 - 1e-12) < 1.0);
    CHECK_THROWS_AS(hoeffding_delta(10, 0.0), std::domain_error);
    CHECK_THROWS_AS(hoeffding_delta(10, 1.5), std::domain_error);
    CHECK_THROWS_AS(hoeffding_delta(-1, 0.5), std::domain_error);
}

TEST_CASE("qber") {
    TallyBlock b;
    b.at(Basis::Z, Intensity::Signal) = {100, 0};
    CHECK(qber(b, Basis::Z) == 0.0);
    b.at(Basis::Z, Intensity::Signal) = {100, 100};
    CHECK(qber(b, Basis::Z) == 1.0);
    CHECK_THROWS_AS(qber(b, Basis::X), std::domain_error);
    CHECK(qber(published_mode2(), Basis::Z) == doctest::Approx(0.0556));
    CHECK(qber(published_mode1(), Basis::X, Intensity::Decoy) == doctest::Approx(0.0214));
}

TEST_CASE("ec leakage") {
    CHECK(ec_leakage(1e9, 0.0, 1.16) == 0.0);
    CHECK(ec_leakage(1e9, 0.0443, 1.16) == doctest::Approx(1.16e9 * binary_entropy(0.0443)));
    CHECK(ec_leakage(1e9, 0.0443, 1.16) == doctest::Approx(3.04e8).epsilon(2e-3));
    CHECK(ec_leakage(12345, 0.5, 1.0) == doctest::Approx(12345));
}

TEST_CASE("key-length assembly is exact") {
    struct Case {
        double d0, d1, phi, lam, es, ec;
    };
    for (const Case c : {Case{1.2e7, 4.1e8, 0.037, 1.9e8, 1e-9, 1e-9}, Case{0, 1e6, 0.11, 2e5, 1e-12, 1e-6},
                         Case{5e3, 7e4, 0.5, 1e3, 1e-3, 1e-10}}) {
        const double expected = c.d0 + c.d1 * (1 - binary_entropy(c.phi)) - c.lam - 6 * std::log2(21 / c.es) -
                                2 * std::log2(2 / c.ec);
        const double got = finite_key_length(c.d0, c.d1, c.phi, c.lam, c.es, c.ec);
        CHECK(std::abs(got - expected) <= 1e-9 * std::abs(expected));
    }
}

TEST_CASE("decoy bounds against the oracle") {
    const auto b = published_mode1();
    const double eps = b.cfg.eps_sec / 21;
    const auto got = decoy_bounds(b);
    const auto z = one_decoy(b, Basis::Z, eps);
    CHECK(got.d0_raw == doctest::Approx(z.s0_low).epsilon(1e-12));
    CHECK(got.d1_raw == doctest::Approx(z.s1_low).epsilon(1e-12));
    CHECK(got.d0_upper == doctest::Approx(z.s0_up).epsilon(1e-12));
    CHECK(got.d1_low == doctest::Approx(6.86986e8).epsilon(1e-5));
    CHECK(got.phase_source == PhaseSource::Own);
    CHECK(!got.d1_infeasible);

    // X single-photon statistics and the phase-error ratio
    const auto x = one_decoy(b, Basis::X, eps);
    CHECK(got.x_single_photon == doctest::Approx(x.s1_low).epsilon(1e-12));
    const auto& c = b.cfg;
    const double t1 = tau_n(c, 1);
    const double dm = std::sqrt(b.m(Basis::X) / 2 * std::log(1 / eps));
    const double v1 = t1 / (c.mu1 - c.mu2) *
                      (std::exp(c.mu1) / c.p_mu1 * (b.at(Basis::X, Intensity::Signal).m + dm) -
                       std::exp(c.mu2) / c.p_mu2() * (b.at(Basis::X, Intensity::Decoy).m - dm));
    CHECK(got.x_single_photon_errors == doctest::Approx(v1).epsilon(1e-12));
    CHECK(got.phi_z_up > v1 / x.s1_low);
    CHECK(got.phi_z_up < 0.5);
}

TEST_CASE("decoy bounds edge cases") {
    TallyBlock empty;
    const auto e = decoy_bounds(empty);
    CHECK(e.d0_low == 0.0);
    CHECK(e.d1_low == 0.0);
    CHECK(e.phi_z_up == 0.5);
    CHECK(e.phase_source == PhaseSource::Fallback);

    // Mode 2 has no X data: borrows Mode 1's, or falls back to 1/2
    const auto m1 = published_mode1();
    const auto m2 = published_mode2();
    CHECK(decoy_bounds(m2, {}, &m1).phase_source == PhaseSource::Shared);
    KeyRateOptions no_share;
    no_share.shared_phase_error = false;
    const auto fb = decoy_bounds(m2, no_share, &m1);
    CHECK(fb.phase_source == PhaseSource::Fallback);
    CHECK(fb.phi_z_up == 0.5);
    CHECK(secret_key_length(m2, no_share, &m1).secret_key_length == 0.0);

    // invalid tallies are rejected
    TallyBlock bad = m1;
    bad.at(Basis::Z, Intensity::Decoy).m = bad.at(Basis::Z, Intensity::Decoy).n + 1;
    CHECK_THROWS_AS(decoy_bounds(bad), std::invalid_argument);
}

TEST_CASE("noiseless asymptotic limit recovers the single-photon yield") {
    // Perfect channel, eta = 1, no errors: every pulse with >= 1 photon clicks
    // (dead time ignored). The single-photon count is tau_1 N exactly.
    auto cfg = active_decoy_config();
    const double N = 1e12;
    TallyBlock b;
    b.cfg = cfg;
    for (auto k : {Intensity::Signal, Intensity::Decoy})
        b.at(Basis::Z, k).n = N * cfg.p_mu(k) * -std::expm1(-cfg.mu(k));
    KeyRateOptions asym;
    asym.finite_size = false;
    const auto got = decoy_bounds(b, asym);
    const double truth = tau_n(cfg, 1) * N;
    // one-decoy bound is below the truth, and close for a weak decoy
    CHECK(got.d1_low <= truth * (1 + 1e-12));
    CHECK(got.d1_low / truth > 0.9);
    CHECK(got.d0_low == 0.0);
}

TEST_CASE("inconsistent sequential block is infeasible") {
    // mu1 and mu2 acquired under different channel transmissions. Oracle:
    // a decoy whose transmission falls below mu2/mu1 of the signal's implies
    // more multi-photon yield than the signal can carry.
    const auto cfg = active_decoy_config();
    auto block_for = [&](double eta1, double eta2) {
        TallyBlock b;
        b.cfg = cfg;
        b.duration = 1.0;
        const double pulses = 1e10;
        const double q = 0.02;
        b.at(Basis::Z, Intensity::Signal).n = pulses * cfg.p_mu1 * -std::expm1(-cfg.mu1 * eta1);
        b.at(Basis::Z, Intensity::Decoy).n = pulses * cfg.p_mu2() * -std::expm1(-cfg.mu2 * eta2);
        for (auto k : {Intensity::Signal, Intensity::Decoy}) b.at(Basis::Z, k).m = q * b.at(Basis::Z, k).n;
        return b;
    };
    const double eta = 0.05;
    CHECK(!decoy_bounds(block_for(eta, eta)).d1_infeasible);
    const auto lower = decoy_bounds(block_for(eta, 0.25 * eta));
    CHECK(lower.d1_infeasible);
    CHECK(lower.d1_raw < 0.0);
    CHECK(lower.d1_low == 0.0);
    // a decoy with 30% more transmission inflates the single-photon bound instead
    const auto higher = decoy_bounds(block_for(eta, 1.3 * eta));
    CHECK(!higher.d1_infeasible);
    CHECK(higher.d1_low > decoy_bounds(block_for(eta, eta)).d1_low);
}

TEST_CASE("secret key length") {
    const auto m1 = published_mode1();
    const auto r = secret_key_length(m1);
    CHECK(r.qber_z == doctest::Approx(0.0443));
    CHECK(r.lambda_ec == doctest::Approx(ec_leakage(1e9, 0.0443, 1.16)));
    CHECK(r.secret_key_length_raw ==
          doctest::Approx(finite_key_length(r.d0, r.d1, r.phi_z, r.lambda_ec, 1e-9, 1e-9)));
    CHECK(r.skr == doctest::Approx(r.secret_key_length / m1.duration));
    CHECK(!r.short_block);
    // pure function
    const auto again = secret_key_length(m1);
    CHECK(again.secret_key_length_raw == r.secret_key_length_raw);

    // leakage alone above d0 + d1 -> negative, clamped
    TallyBlock noisy = m1;
    for (auto k : {Intensity::Signal, Intensity::Decoy}) noisy.at(Basis::Z, k).m = 0.3 * noisy.at(Basis::Z, k).n;
    const auto n = secret_key_length(noisy);
    CHECK(n.lambda_ec > n.d0 + n.d1);
    CHECK(n.secret_key_length_raw < 0.0);
    CHECK(n.secret_key_length == 0.0);
    CHECK(n.skr == 0.0);
    CHECK(n.skr_raw < 0.0);
}

TEST_CASE("monotone in the Z error rate") {
    auto block = published_mode1();
    double previous = std::numeric_limits<double>::infinity();
    for (double q = 0.0; q <= 0.2; q += 0.01) {
        for (auto k : {Intensity::Signal, Intensity::Decoy})
            block.at(Basis::Z, k).m = q * block.at(Basis::Z, k).n;
        const double l = secret_key_length(block).secret_key_length_raw;
        CHECK(l <= previous);
        previous = l;
    }
}

TEST_CASE("scaling: doubling tallies at least doubles the bounds up to the delta growth") {
    const auto b = published_mode1();
    const auto twice = b.scaled(2.0);
    const auto one = decoy_bounds(b);
    const auto two = decoy_bounds(twice);
    const double sum1 = one.d0_raw + one.d1_raw;
    const double sum2 = two.d0_raw + two.d1_raw;
    // The only non-linear terms are the deltas, which grow by sqrt(2) and
    // enter with a minus sign: doubling never loses, and gains little.
    CHECK(sum2 >= 2 * sum1);
    CHECK(sum2 - 2 * sum1 <= 1e-2 * sum1);
}

TEST_CASE("longer blocks at fixed rates") {
    // Growing the block at fixed rates only shrinks the relative finite-size
    // penalty: the rate never falls by more than the finite-size terms allow.
    auto cfg = active_decoy_config();
    double previous = -std::numeric_limits<double>::infinity();
    for (double block : {1e6, 1e7, 1e8, 1e9, 1e10}) {
        cfg.block_size = block;
        const auto b = reconstruct_block(cfg, {{3.78e6, 0.32e6}, {0.0443, 0.0443}, std::array{0.0214, 0.0214}});
        const double skr = secret_key_length(b).skr_raw;
        CHECK(skr >= previous);
        previous = skr;
    }
    KeyRateOptions asym;
    asym.finite_size = false;
    const auto b = reconstruct_block(cfg, {{3.78e6, 0.32e6}, {0.0443, 0.0443}, std::array{0.0214, 0.0214}});
    CHECK(secret_key_length(b, asym).skr_raw >= previous);
}

TEST_CASE("blocked key rate") {
    auto cfg = active_decoy_config();
    cfg.block_size = 1e8;
    const auto window = reconstruct_block(cfg, {{3.78e6, 0.32e6}, {0.0443, 0.0443}, std::array{0.0214, 0.0214}})
                            .scaled(4.0);  // four blocks
    const auto r = blocked_key_rate(window);
    const auto one = secret_key_length(window.scaled(0.25));
    CHECK(r.secret_key_length_raw == doctest::Approx(4 * one.secret_key_length_raw));
    CHECK(r.skr_raw == doctest::Approx(one.skr_raw));
    CHECK(!r.short_block);

    const auto small = window.scaled(0.1);
    const auto s = blocked_key_rate(small);
    CHECK(s.short_block);
    CHECK(s.skr_raw < one.skr_raw);
}

TEST_CASE("reconstruct_block") {
    const auto b = published_mode1();
    CHECK(b.n(Basis::Z) == doctest::Approx(1e9));
    CHECK(b.duration == doctest::Approx(1e9 / 4.1e6));
    CHECK(b.at(Basis::Z, Intensity::Signal).n / b.duration == doctest::Approx(3.78e6));
    CHECK(b.at(Basis::X, Intensity::Signal).n ==
          doctest::Approx(b.at(Basis::Z, Intensity::Signal).n * (0.1 * 0.25) / (0.9 * 0.75)));
    CHECK(!published_mode2().has_basis(Basis::X));
    CHECK_THROWS_AS(reconstruct_block(active_decoy_config(), {{-1, 1}, {0, 0}, std::nullopt}),
                    std::invalid_argument);
    CHECK_THROWS_AS(reconstruct_block(active_decoy_config(), {{1, 1}, {1.5, 0}, std::nullopt}),
                    std::invalid_argument);
}

TEST_CASE("sifting") {
    const auto cfg = active_decoy_config();
    std::vector<PulseRecord> pulses;
    std::vector<DetectionRecord> dets;
    for (std::uint64_t i = 0; i < 10000; ++i) {
        PulseRecord p;
        p.index = i;
        p.symbol = StateSymbol{Basis::Z, std::uint8_t(i % 2), Intensity::Signal};
        pulses.push_back(p);
        DetectionRecord d;
        d.pulse_index = i;
        d.basis = Basis::Z;
        d.outcome = std::uint8_t(i % 2);
        if (i < 443) d.outcome ^= 1;
        dets.push_back(d);
    }
    auto b = sift(pulses, dets, cfg, 1.0);
    CHECK(b.n(Basis::Z) == 10000);
    CHECK(qber(b, Basis::Z) == doctest::Approx(0.0443));

    // all bases match, no errors
    for (auto& d : dets) d.outcome = std::uint8_t(d.pulse_index % 2);
    b = sift(pulses, dets, cfg, 1.0);
    CHECK(b.n(Basis::Z) == double(dets.size()));
    CHECK(b.m(Basis::Z) == 0.0);

    // basis mismatch is discarded
    dets[0].basis = Basis::X;
    b = sift(pulses, dets, cfg, 1.0);
    CHECK(b.n(Basis::Z) == 9999);
    CHECK(b.n(Basis::X) == 0);

    // unknown pulse
    dets[1].pulse_index = 123456789;
    CHECK_THROWS_AS(sift(pulses, dets, cfg, 1.0), std::invalid_argument);
}

TEST_CASE("sifting keeps a product fraction of detections") {
    auto cfg = active_decoy_config();
    cfg.pz_alice = 0.5;
    cfg.pz_bob = 0.5;
    RandomStream rng(5, "sift-fraction");
    const std::size_t n = 1'000'000;
    const auto symbols = generate_symbols(cfg, n, rng);
    std::vector<PulseRecord> pulses(n);
    std::vector<DetectionRecord> dets(n);
    for (std::size_t i = 0; i < n; ++i) {
        pulses[i].index = i;
        pulses[i].symbol = symbols[i];
        dets[i].pulse_index = i;
        dets[i].basis = rng.bernoulli(cfg.pz_bob) ? Basis::Z : Basis::X;
        dets[i].outcome = 0;
    }
    const auto b = sift(pulses, dets, cfg, 1.0);
    const double frac = (b.n(Basis::Z) + b.n(Basis::X)) / double(n);
    CHECK(std::abs(frac - 0.5) < 5 * std::sqrt(0.25 / n));
    CHECK(std::abs(b.n(Basis::Z) / double(n) - 0.25) < 5 * std::sqrt(0.25 * 0.75 / n));
}

TEST_CASE("JSON round trips") {
    const auto r = secret_key_length(published_mode1());
    const nlohmann::json j = r;
    const auto back = j.get<KeyRateResult>();
    CHECK(back.secret_key_length_raw == r.secret_key_length_raw);
    CHECK(back.phase_source == r.phase_source);

    const auto t = published_mode1();
    CHECK(nlohmann::json(t).get<TallyBlock>() == t);

    SearchSpace s;
    s.mu2 = Range{0.05, 0.2};
    CHECK(nlohmann::json(s).get<SearchSpace>() == s);
    ChannelSummary c;
    c.loss_db = 12;
    CHECK(nlohmann::json(c).get<ChannelSummary>() == c);
}
