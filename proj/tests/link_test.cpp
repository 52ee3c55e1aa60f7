#include "qkdsim/link.hpp"

#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <limits>

using namespace qkdsim;

namespace {

constexpr double kNoCrosstalk = -std::numeric_limits<double>::infinity();

ChannelSpec ideal_spec(double loss_db) {
    ChannelSpec s;
    for (auto* l : {&s.mux, &s.demux}) {
        l->crosstalk_db = {kNoCrosstalk, kNoCrosstalk, kNoCrosstalk};
        l->pdl_db = {{{0, 0}, {0, 0}, {0, 0}}};
    }
    s.fiber_loss_db = loss_db;
    s.drift.amplitude = 0.0;
    return s;
}

ReceiverSpec ideal_receiver() {
    ReceiverSpec r;
    r.interferometer_visibility = 1.0;
    r.extinction_error = 0.0;
    for (auto* d : {&r.z_detector, &r.x_detector}) {
        d->efficiency = 1.0;
        d->dark_rate = 0.0;
    }
    return r;
}

double within_sigmas(double observed, double n, double p) {
    return std::abs(observed - n * p) / std::sqrt(n * p * (1 - p));
}

}  // namespace

TEST_CASE("symbol generation") {
    auto cfg = active_decoy_config();
    RandomStream rng(11, "symbols");
    const std::size_t n = 1'000'000;
    auto s = generate_symbols(cfg, n, rng);
    double z = 0, sig = 0;
    for (const auto& x : s) {
        CHECK_FALSE(!x.valid());
        z += x.basis == Basis::Z;
        sig += x.intensity == Intensity::Signal;
    }
    CHECK(within_sigmas(z, n, 0.9) < 5);
    CHECK(within_sigmas(sig, n, 0.8) < 5);

    cfg = no_decoy_config();
    s = generate_symbols(cfg, n, rng);
    std::array<double, 4> joint{};
    for (const auto& x : s) joint[2 * (x.basis == Basis::Z) + (x.intensity == Intensity::Signal)] += 1;
    CHECK(within_sigmas(joint[3], n, 0.8 * 0.8) < 5);
    CHECK(within_sigmas(joint[2], n, 0.8 * 0.2) < 5);
    CHECK(within_sigmas(joint[1], n, 0.2 * 0.8) < 5);
    CHECK(within_sigmas(joint[0], n, 0.2 * 0.2) < 5);

    cfg.pz_alice = 1.0;
    s = generate_symbols(cfg, 10000, rng);
    CHECK(std::all_of(s.begin(), s.end(), [](const StateSymbol& x) { return x.basis == Basis::Z; }));
}

TEST_CASE("repeating pattern") {
    auto cfg = active_decoy_config();
    cfg.repeating_pattern = true;
    cfg.sequence_length = 7;
    SymbolSource src(cfg, RandomStream(1, "pattern"));
    std::vector<StateSymbol> a;
    for (int i = 0; i < 21; ++i) a.push_back(src.next());
    for (int i = 7; i < 21; ++i) CHECK(a[i] == a[i % 7]);
}

TEST_CASE("simulate_pulse") {
    const auto cfg = active_decoy_config();
    const auto ch = channel_at(ideal_spec(0.0), {});
    std::array<ReceiverSpec, 2> rx{ideal_receiver(), ideal_receiver()};
    RandomStream rng(2, "pulse");

    PulseRecord vac;
    vac.mode = 1;
    vac.mean_photon_number = 0.0;
    for (int i = 0; i < 1000; ++i) CHECK(simulate_pulse(vac, ch, rx, cfg, rng).empty());

    // bright early Z state: an early Z click whenever a photon reaches the Z detector
    PulseRecord bright;
    bright.mode = 1;
    bright.symbol = StateSymbol{Basis::Z, 0, Intensity::Signal};
    bright.mean_photon_number = 20.0;
    const int trials = 20000;
    int hit = 0;
    for (int i = 0; i < trials; ++i) {
        const auto ev = simulate_pulse(bright, ch, rx, cfg, rng);
        bool early = false;
        for (const auto& e : ev) {
            CHECK(e.receive_port == kPortLP11a);
            if (e.basis == Basis::Z) {
                CHECK(e.outcome == 0);
                early = true;
            }
        }
        hit += early;
    }
    CHECK(hit / double(trials) > 1 - std::exp(-20 * cfg.pz_bob) - 1e-12);

    // X state at visibility 0.96: wrong port with probability (1 - V) / 2
    rx[0].interferometer_visibility = 0.96;
    PulseRecord x;
    x.mode = 1;
    x.symbol = StateSymbol{Basis::X, std::nullopt, Intensity::Signal};
    x.mean_photon_number = 1.0;
    double wrong = 0, total = 0;
    for (int i = 0; i < 1'000'000; ++i) {
        for (const auto& e : simulate_pulse(x, ch, rx, cfg, rng)) {
            if (e.basis != Basis::X) continue;
            total += 1;
            wrong += e.outcome == 1;
        }
    }
    CHECK(within_sigmas(wrong, total, 0.02) < 5);

    PulseRecord bad = vac;
    bad.mode = 0;
    CHECK_THROWS_AS(simulate_pulse(bad, ch, rx, cfg, rng), std::invalid_argument);
}

TEST_CASE("detector front end") {
    DetectorSpec d;
    RandomStream rng(3, "detector");
    const auto darks = detector_process({}, d, 100.0, rng);
    CHECK(std::abs(double(darks.size()) - 5000) < 5 * std::sqrt(5000.0));
    CHECK(std::all_of(darks.begin(), darks.end(), [](const DetectionRecord& r) { return r.is_dark; }));

    d.dark_rate = 0.0;
    std::vector<RawClick> two{{0.0, 0, 1, Basis::Z, 0, false}, {10e-9, 12, 1, Basis::Z, 0, false}};
    auto out = detector_process(two, d, 1e-6, rng);
    CHECK(out.size() == 1);
    two[1].time = 40e-9;
    two[1].pulse_index = 50;
    out = detector_process(two, d, 1e-6, rng);
    CHECK(out.size() == 2);
    CHECK(out[1].timestamp == doctest::Approx(40e-9));

    // one click per slot, earliest first
    std::vector<RawClick> same{{0.4e-9, 0, 1, Basis::Z, 1, false}, {0.0, 0, 1, Basis::Z, 0, false}};
    std::sort(same.begin(), same.end(), [](auto& a, auto& b) { return a.time < b.time; });
    out = detector_process(same, d, 1e-6, rng);
    REQUIRE(out.size() == 1);
    CHECK(out[0].outcome == 0);

    // saturating input: every 1.25 GHz slot carries a click
    std::vector<RawClick> flood;
    const double slot = 0.8e-9;
    for (std::uint64_t i = 0; i < 1'250'000; ++i) flood.push_back({i * slot, i, 1, Basis::Z, 0, false});
    out = detector_process(flood, d, 1e-3, rng, slot);
    const double rate = out.size() / 1e-3;
    CHECK(rate <= 1.0 / 33e-9);
    CHECK(rate > 0.95 / 33e-9);
}

TEST_CASE("detector liveness matches the front end") {
    // Random i.i.d. slot occupancy with early and late labels, fed through
    // the real front end, against the stationary analytic liveness.
    DetectorSpec d;
    d.dark_rate = 0.0;
    const double slot = 0.8e-9;
    for (const auto& [q0, q1] : {std::pair{0.02, 0.01}, std::pair{0.001, 0.05}, std::pair{0.2, 0.2}}) {
        RandomStream rng(4, "liveness");
        std::vector<RawClick> ev;
        const std::uint64_t slots = 2'000'000;
        double late_only = 0;
        for (std::uint64_t i = 0; i < slots; ++i) {
            const bool e = rng.bernoulli(q0), l = rng.bernoulli(q1);
            if (e) ev.push_back({i * slot, i, 1, Basis::Z, 0, false});
            if (l) ev.push_back({i * slot + slot / 2, i, 1, Basis::Z, 1, false});
            late_only += l && !e;
        }
        const auto out = detector_process(ev, d, slots * slot, rng, slot);
        const double p = q0 + (1 - q0) * q1;
        const double expected = slots * p * deadtime_thinning(p, {q0, q1}, slot, d.dead_time, d.timestamp_resolution);
        CHECK(std::abs(out.size() - expected) < 5 * std::sqrt(expected));
        const auto live = detector_liveness(p, {q0, q1}, slot, d.dead_time, d.timestamp_resolution);
        CHECK(live.mid_slot >= live.slot_start);
        double early = 0;
        for (const auto& r : out) early += r.outcome == 0;
        const double early_expected = slots * q0 * live.slot_start;
        CHECK(std::abs(early - early_expected) < 5 * std::sqrt(early_expected));
        (void)late_only;
    }
    CHECK(deadtime_thinning(0.0, {0.0, 0.0}, slot, d.dead_time, d.timestamp_resolution) == 1.0);
    CHECK(deadtime_thinning(1e6, 33e-9) == doctest::Approx(1 / 1.033));
}

TEST_CASE("run_mc") {
    auto cfg = active_decoy_config();
    LinkSetup setup;
    setup.cfg = cfg;
    setup.receivers = {ideal_receiver(), ideal_receiver()};
    const auto ch = channel_at(ideal_spec(0.0), {});

    // nothing emitted, nothing detected
    setup.cfg.mu1 = 1e-300;
    setup.cfg.mu2 = 1e-301;
    RandomStream rng(6, "mc");
    McOptions keep;
    keep.keep_records = true;
    auto r = run_mc(setup, ch, 100000, rng, keep);
    CHECK(r.modes[0].detections.empty());
    CHECK(r.modes[1].detections.empty());
    CHECK(r.modes[0].pulses.size() == 100000);

    // only Mode 1 launched, with lantern crosstalk: Mode 2's port still clicks
    ChannelSpec spec;
    spec.drift.amplitude = 0.0;
    setup.cfg = cfg;
    setup.receivers = {ReceiverSpec{}, ReceiverSpec{}};
    for (auto& rx : setup.receivers) rx.z_detector.dark_rate = rx.x_detector.dark_rate = 0.0;
    setup.launched = {true, false};
    const auto st = channel_at(spec, mean_angles(spec.drift));
    r = run_mc(setup, st, 2'000'000, rng, keep);
    CHECK(r.modes[1].tally.n(Basis::Z) + r.modes[1].tally.n(Basis::X) == 0);  // unlaunched: nothing sifted
    CHECK(r.modes[1].accepted_clicks[0] > 0);
    const double leak = transmission_probs(st, kPortLP11a).port[kPortLP11b];
    const double expected = 2e6 * (0.8 * 0.31 + 0.2 * 0.1) * leak * cfg.pz_bob * 0.83;
    CHECK(std::abs(r.modes[1].accepted_clicks[0] - expected) < 5 * std::sqrt(expected));

    McOptions small;
    small.max_pulses = 10;
    CHECK_THROWS_AS(run_mc(setup, st, 11, rng, small), ResourceLimitError);
}

TEST_CASE("per-pulse engine against the analytic tally model") {
    ChannelSpec spec;
    spec.drift.amplitude = 0.0;
    LinkSetup setup;
    setup.cfg = active_decoy_config();
    const auto st = channel_at(spec, mean_angles(spec.drift));
    const std::uint64_t n = 1'000'000;
    RandomStream rng(8, "equivalence");
    const auto r = run_mc(setup, st, n, rng);
    const auto mix = interleaved_mix(setup.cfg);
    for (std::size_t slot = 0; slot < 2; ++slot) {
        const auto p = cell_probabilities(setup, st, slot, mix, mix);
        const auto expected = expected_tally(p, double(n), 1.0, 1, setup.cfg);
        for (auto b : {Basis::Z, Basis::X})
            for (auto k : {Intensity::Signal, Intensity::Decoy}) {
                const auto& o = r.modes[slot].tally.at(b, k);
                const auto& e = expected.at(b, k);
                CHECK(within_sigmas(o.n, double(n), e.n / n) < 4);
                CHECK(within_sigmas(o.m, double(n), e.m / n) < 4);
            }
    }
}

TEST_CASE("photon-number ground truth") {
    ChannelSpec spec;
    spec.drift.amplitude = 0.0;
    LinkSetup setup;
    setup.cfg = active_decoy_config();
    const auto st = channel_at(spec, mean_angles(spec.drift));
    RandomStream rng(9, "truth");
    const auto r = run_mc(setup, st, 1'000'000, rng);
    for (const auto& m : r.modes) {
        for (auto b : {Basis::Z, Basis::X}) {
            double n = 0, e = 0;
            for (unsigned c = 0; c < 3; ++c) {
                n += m.truth.at(b, c).n;
                e += m.truth.at(b, c).m;
            }
            CHECK(n == m.tally.n(b));
            CHECK(e == m.tally.m(b));
        }
    }
}

TEST_CASE("tally engine") {
    ChannelSpec spec;
    spec.drift.amplitude = 0.0;
    LinkSetup setup;
    setup.cfg = active_decoy_config();
    RandomStream rng(10, "tally");
    const DriftTrajectory traj(spec, 100.0, 0.1, rng);
    const auto w = run_tally(setup, traj, 100.0, 1.0, rng);
    REQUIRE(w[0].size() == 100);

    // frozen channel: windows scatter binomially about the analytic mean
    const auto p = cell_probabilities(setup, traj.state_at(0), 0, interleaved_mix(setup.cfg),
                                      interleaved_mix(setup.cfg));
    const double pulses = setup.cfg.qubit_rate;
    const double prob = p.per_pulse[0][0].p_click();
    double mean = 0, var = 0;
    for (const auto& b : w[0]) mean += b.at(Basis::Z, Intensity::Signal).n;
    mean /= 100;
    for (const auto& b : w[0]) var += std::pow(b.at(Basis::Z, Intensity::Signal).n - mean, 2);
    var /= 99;
    const double binomial = pulses * prob * (1 - prob);
    // sample variance of 100 draws: relative standard error sqrt(2/99)
    CHECK(std::abs(var / binomial - 1) < 5 * std::sqrt(2.0 / 99));
    CHECK(std::abs(mean - pulses * prob) < 5 * std::sqrt(binomial / 100));

    CHECK_THROWS_AS(run_tally(setup, traj, 100.0, 30.0, rng), std::invalid_argument);
}

TEST_CASE("receiver validation and JSON") {
    ReceiverSpec r;
    CHECK_NOTHROW(validate_receiver(r));
    r.interferometer_visibility = 1.2;
    CHECK_THROWS_AS(validate_receiver(r), std::invalid_argument);
    r = ReceiverSpec{};
    r.z_detector.efficiency = -0.1;
    CHECK_THROWS_AS(validate_receiver(r), std::invalid_argument);
    r = ReceiverSpec{};
    r.x_detector.dark_rate = 12;
    CHECK(nlohmann::json(r).get<ReceiverSpec>() == r);
}
