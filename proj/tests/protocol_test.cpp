#include "qkdsim/protocol.hpp"
#include "qkdsim/random.hpp"

#include "doctest.h"

#include <cmath>
#include <set>
#include <vector>

using namespace qkdsim;

TEST_CASE("binary entropy") {
    CHECK(binary_entropy(0.0) == 0.0);
    CHECK(binary_entropy(1.0) == 0.0);
    CHECK(binary_entropy(0.5) == doctest::Approx(1.0).epsilon(1e-15));
    // -x log2 x - (1-x) log2(1-x) at the reported Mode 1 QBER
    const double x = 0.0443;
    const double oracle = -(x * std::log(x) + (1 - x) * std::log1p(-x)) / std::log(2.0);
    CHECK(binary_entropy(x) == doctest::Approx(oracle).epsilon(1e-14));
    CHECK(binary_entropy(x) == doctest::Approx(0.262).epsilon(1e-3));
    for (double y = 0.0; y <= 1.0; y += 0.0125) CHECK(binary_entropy(y) == doctest::Approx(binary_entropy(1 - y)));
    CHECK_THROWS_AS(binary_entropy(-0.1), std::domain_error);
    CHECK_THROWS_AS(binary_entropy(1.01), std::domain_error);
    CHECK_THROWS_AS(binary_entropy(NAN), std::domain_error);
}

TEST_CASE("poisson and tau") {
    CHECK(poisson_pn(0.0, 0) == 1.0);
    CHECK(poisson_pn(0.0, 3) == 0.0);
    CHECK(poisson_pn(0.31, 0) == doctest::Approx(std::exp(-0.31)));
    CHECK(poisson_pn(0.31, 0) == doctest::Approx(0.7334).epsilon(1e-4));
    CHECK(poisson_pn(0.1, 2) == doctest::Approx(0.01 * std::exp(-0.1) / 2));
    CHECK(poisson_pn(0.1, 2) == doctest::Approx(0.004524).epsilon(1e-3));
    // large n stays finite
    CHECK(std::isfinite(poisson_pn(30.0, 200)));

    ProtocolConfig vac;
    vac.mu1 = 0.0;
    vac.mu2 = 0.0;
    CHECK(tau_n(vac, 0) == 1.0);

    const auto cfg = active_decoy_config();
    CHECK(tau_n(cfg, 0) == doctest::Approx(0.8 * std::exp(-0.31) + 0.2 * std::exp(-0.1)));
    CHECK(tau_n(cfg, 0) == doctest::Approx(0.7677).epsilon(1e-4));
    CHECK(tau_n(cfg, 1) == doctest::Approx(0.8 * 0.31 * std::exp(-0.31) + 0.2 * 0.1 * std::exp(-0.1)));
    CHECK(tau_n(cfg, 1) == doctest::Approx(0.2000).epsilon(1e-3));

    for (const auto& c : {active_decoy_config(), no_decoy_config()}) {
        double sum = 0.0;
        for (unsigned n = 0; n < 60; ++n) sum += tau_n(c, n);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-13));
    }
}

TEST_CASE("validate_config") {
    CHECK_NOTHROW(validate_config(active_decoy_config()));
    CHECK_NOTHROW(validate_config(no_decoy_config()));
    const auto a = active_decoy_config();
    CHECK(a.mu1 == 0.31);
    CHECK(a.mu2 == 0.1);
    CHECK(a.p_mu1 == 0.8);
    CHECK(a.pz_alice == 0.9);
    CHECK(a.pz_bob == 0.75);

    auto bad = a;
    bad.mu2 = bad.mu1;
    REQUIRE_THROWS_AS(validate_config(bad), ConfigError);
    try {
        validate_config(bad);
    } catch (const ConfigError& e) {
        REQUIRE(e.violations().size() == 1);
        CHECK(e.violations()[0].field == "mu2");
        CHECK(e.violations()[0].message == "mu2 must be strictly less than mu1");
    }

    bad = a;
    bad.p_mu1 = 1.3;
    const auto v = config_violations(bad);
    REQUIRE(!v.empty());
    CHECK(v[0].field == "p_mu1");
    CHECK(v[0].message.rfind("probability out of range", 0) == 0);

    // every violation reported, not just the first
    bad = a;
    bad.pz_alice = -1;
    bad.eps_sec = 0;
    bad.qubit_rate = 0;
    CHECK(config_violations(bad).size() >= 3);
}

TEST_CASE("ProtocolConfig JSON") {
    const auto cfg = no_decoy_config();
    const nlohmann::json j = cfg;
    CHECK(j.get<ProtocolConfig>() == cfg);
    for (const char* key : {"qubit_rate", "mu1", "mu2", "p_mu1", "pz_alice", "pz_bob",
                            "sequence_length", "eps_sec", "eps_corr", "f_ec", "block_size"})
        CHECK(j.contains(key));

    auto extra = j;
    extra["mu3"] = 0.01;
    CHECK_THROWS(extra.get<ProtocolConfig>());

    // missing keys keep defaults
    const auto partial = nlohmann::json{{"mu1", 0.5}}.get<ProtocolConfig>();
    CHECK(partial.mu1 == 0.5);
    CHECK(partial.mu2 == ProtocolConfig{}.mu2);
}

TEST_CASE("random streams") {
    auto draws = [](std::uint64_t seed, const char* id) {
        RandomStream r(seed, id);
        std::vector<std::uint64_t> v(1000);
        for (auto& x : v) x = r.next_u64();
        return v;
    };
    CHECK(draws(42, "alice-basis") == draws(42, "alice-basis"));
    CHECK(draws(42, "alice-basis") != draws(42, "bob-basis"));
    CHECK(draws(42, "alice-basis") != draws(43, "alice-basis"));

    RandomStream r(7, "x");
    CHECK(r.derive("a").next_u64() == RandomStream(7, "x").derive("a").next_u64());
    CHECK(r.derive("a").next_u64() != r.derive("b").next_u64());

    // moments of the samplers
    RandomStream s(1, "moments");
    const int n = 200000;
    double sum_u = 0, sum_p = 0, sum_b = 0;
    for (int i = 0; i < n; ++i) {
        sum_u += s.uniform();
        sum_p += double(s.poisson(0.31));
    }
    for (int i = 0; i < 1000; ++i) sum_b += double(s.binomial(100000, 0.03));
    CHECK(sum_u / n == doctest::Approx(0.5).epsilon(5 * std::sqrt(1.0 / 12 / n) / 0.5));
    CHECK(std::abs(sum_p / n - 0.31) < 5 * std::sqrt(0.31 / n));
    CHECK(std::abs(sum_b / 1000 - 3000) < 5 * std::sqrt(100000 * 0.03 * 0.97 / 1000));
    CHECK(s.binomial(0, 0.5) == 0);
    CHECK(s.binomial(10, 1.0) == 10);

    CHECK(stable_hash("") == 0xcbf29ce484222325ULL);
    CHECK(stable_hash("a") == 0xaf63dc4c8601ec8cULL);
}
