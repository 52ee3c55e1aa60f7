#include "qkdsim/keyrate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_map>

#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

#include "json_fields.hpp"

namespace qkdsim {

namespace {

constexpr std::array<Basis, 2> kBases{Basis::Z, Basis::X};
constexpr std::array<Intensity, 2> kIntensities{Intensity::Signal, Intensity::Decoy};

/// Intensity-resolved counts rescaled to photon-number yields, with the
/// concentration correction applied in the requested direction.
struct DecoyCounts {
    double mu1, mu2, p1, p2;

    double scaled(Intensity k, double count, double shift) const {
        const double mu = k == Intensity::Signal ? mu1 : mu2;
        const double p = k == Intensity::Signal ? p1 : p2;
        return std::exp(mu) / p * (count + shift);
    }
};

struct SinglePhotonBounds {
    double s0_low;
    double s0_up;
    double s1_low;
};

SinglePhotonBounds photon_bounds(const TallyBlock& block, Basis basis, double eps,
                                 bool finite_size) {
    const auto& cfg = block.cfg;
    const DecoyCounts dc{cfg.mu1, cfg.mu2, cfg.p_mu1, cfg.p_mu2()};
    const double mu1 = cfg.mu1;
    const double mu2 = cfg.mu2;
    const double tau0 = tau_n(cfg, 0);
    const double tau1 = tau_n(cfg, 1);

    const double dn = finite_size ? hoeffding_delta(block.n(basis), eps) : 0.0;
    const double dm = finite_size ? hoeffding_delta(block.m(basis), eps) : 0.0;

    const double n1_up = dc.scaled(Intensity::Signal, block.at(basis, Intensity::Signal).n, dn);
    const double n2_low = dc.scaled(Intensity::Decoy, block.at(basis, Intensity::Decoy).n, -dn);
    const double m2_up = dc.scaled(Intensity::Decoy, block.at(basis, Intensity::Decoy).m, dm);

    SinglePhotonBounds b{};
    // Vacuum events err with probability 1/2, so errors at the weak
    // intensity cap the vacuum contribution.
    b.s0_up = 2.0 * tau0 * m2_up;
    b.s0_low = tau0 / (mu1 - mu2) * (mu1 * n2_low - mu2 * n1_up);
    b.s1_low = tau1 * mu1 / (mu2 * (mu1 - mu2)) *
               (n2_low - (mu2 * mu2) / (mu1 * mu1) * n1_up -
                (mu1 * mu1 - mu2 * mu2) / (mu1 * mu1) * b.s0_up / tau0);
    return b;
}

/// Upper bound on single-photon errors in the X basis.
double x_single_photon_errors_up(const TallyBlock& block, double eps, bool finite_size) {
    const auto& cfg = block.cfg;
    const DecoyCounts dc{cfg.mu1, cfg.mu2, cfg.p_mu1, cfg.p_mu2()};
    const double dm = finite_size ? hoeffding_delta(block.m(Basis::X), eps) : 0.0;
    const double m1_up = dc.scaled(Intensity::Signal, block.at(Basis::X, Intensity::Signal).m, dm);
    const double m2_low = dc.scaled(Intensity::Decoy, block.at(Basis::X, Intensity::Decoy).m, -dm);
    return tau_n(cfg, 1) / (cfg.mu1 - cfg.mu2) * (m1_up - m2_low);
}

/// Random-sampling penalty between the X and Z single-photon sets.
double sampling_penalty(double eps_sec, double divisor, double ratio, double s_z1, double s_x1) {
    if (ratio <= 0.0 || ratio >= 1.0) return 0.0;
    const double c = s_z1;
    const double d = s_x1;
    const double var = (c + d) * (1.0 - ratio) * ratio / (c * d * std::log(2.0));
    const double arg = (c + d) / (c * d * (1.0 - ratio) * ratio) * (divisor * divisor) /
                       (eps_sec * eps_sec);
    const double lg = std::log2(arg);
    return lg > 0.0 ? std::sqrt(var * lg) : 0.0;
}

}  // namespace

std::string to_string(PhaseSource p) {
    switch (p) {
        case PhaseSource::Own: return "own";
        case PhaseSource::Shared: return "shared";
        case PhaseSource::Fallback: return "fallback";
    }
    return "fallback";
}

double hoeffding_delta(double n, double eps) {
    if (!(eps > 0.0 && eps <= 1.0)) throw std::domain_error("hoeffding_delta: eps outside (0, 1]");
    if (!(n >= 0.0)) throw std::domain_error("hoeffding_delta: n must be >= 0");
    return std::sqrt(0.5 * n * std::log(1.0 / eps));
}

double qber(const TallyBlock& block, Basis basis) {
    const double n = block.n(basis);
    if (!(n > 0.0)) throw std::domain_error("qber: no detections in the requested basis");
    return block.m(basis) / n;
}

double qber(const TallyBlock& block, Basis basis, Intensity intensity) {
    const auto& c = block.at(basis, intensity);
    if (!(c.n > 0.0)) throw std::domain_error("qber: no detections in the requested cell");
    return c.m / c.n;
}

DecoyBounds decoy_bounds(const TallyBlock& block, const KeyRateOptions& options,
                         const TallyBlock* phase_reference) {
    validate_tally(block);
    const auto& cfg = block.cfg;
    const double eps = cfg.eps_sec / options.eps_divisor;
    const double n_z = block.n(Basis::Z);

    DecoyBounds out;
    const auto z = photon_bounds(block, Basis::Z, eps, options.finite_size);
    out.d0_raw = z.s0_low;
    out.d1_raw = z.s1_low;
    out.d0_upper = z.s0_up;
    out.d0_low = std::clamp(z.s0_low, 0.0, n_z);
    out.d1_low = std::clamp(z.s1_low, 0.0, n_z);
    out.d1_infeasible = z.s1_low < 0.0;

    const TallyBlock* x_source = nullptr;
    if (block.has_basis(Basis::X)) {
        x_source = &block;
        out.phase_source = PhaseSource::Own;
    } else if (options.shared_phase_error && phase_reference &&
               phase_reference->has_basis(Basis::X)) {
        validate_tally(*phase_reference);
        x_source = phase_reference;
        out.phase_source = PhaseSource::Shared;
    }

    out.phi_z_up = 0.5;
    if (x_source) {
        const auto x = photon_bounds(*x_source, Basis::X, eps, options.finite_size);
        const double s_x1 = std::max(0.0, x.s1_low);
        const double v_x1 = std::max(0.0, x_single_photon_errors_up(*x_source, eps,
                                                                    options.finite_size));
        out.x_single_photon = s_x1;
        out.x_single_photon_errors = v_x1;
        if (s_x1 > 0.0 && out.d1_low > 0.0) {
            const double ratio = std::min(v_x1 / s_x1, 0.5);
            const double penalty =
                options.finite_size
                    ? sampling_penalty(cfg.eps_sec, options.eps_divisor, ratio, out.d1_low, s_x1)
                    : 0.0;
            out.phi_z_up = std::clamp(ratio + penalty, 0.0, 0.5);
        }
    } else {
        out.phase_source = PhaseSource::Fallback;
    }
    return out;
}

double ec_leakage(double n_z, double q_z, double f_ec) {
    if (!(n_z >= 0.0)) throw std::domain_error("ec_leakage: n_z must be >= 0");
    if (!(q_z >= 0.0 && q_z <= 0.5)) throw std::domain_error("ec_leakage: q_z outside [0, 0.5]");
    return f_ec * n_z * binary_entropy(q_z);
}

double finite_key_length(double d0, double d1, double phi_z, double lambda_ec, double eps_sec,
                         double eps_corr) {
    return d0 + d1 * (1.0 - binary_entropy(phi_z)) - lambda_ec - 6.0 * std::log2(21.0 / eps_sec) -
           2.0 * std::log2(2.0 / eps_corr);
}

KeyRateResult secret_key_length(const TallyBlock& block, const KeyRateOptions& options,
                                const TallyBlock* phase_reference) {
    const auto bounds = decoy_bounds(block, options, phase_reference);
    const auto& cfg = block.cfg;
    const double n_z = block.n(Basis::Z);

    KeyRateResult r;
    r.d0 = bounds.d0_low;
    r.d1 = bounds.d1_low;
    r.phi_z = bounds.phi_z_up;
    r.qber_z = n_z > 0.0 ? block.m(Basis::Z) / n_z : 0.0;
    r.lambda_ec = ec_leakage(n_z, std::min(r.qber_z, 0.5), cfg.f_ec);
    r.secret_key_length_raw =
        finite_key_length(r.d0, r.d1, r.phi_z, r.lambda_ec, cfg.eps_sec, cfg.eps_corr);
    r.secret_key_length = std::max(0.0, r.secret_key_length_raw);
    r.duration = block.duration;
    r.skr = r.secret_key_length / block.duration;
    r.skr_raw = r.secret_key_length_raw / block.duration;
    r.d1_infeasible = bounds.d1_infeasible;
    r.short_block = n_z < cfg.block_size;
    r.phase_source = bounds.phase_source;
    return r;
}

KeyRateResult blocked_key_rate(const TallyBlock& window, const KeyRateOptions& options,
                               const TallyBlock* phase_reference) {
    const double n_z = window.n(Basis::Z);
    const double block = window.cfg.block_size;
    if (n_z <= block) return secret_key_length(window, options, phase_reference);

    const double f = block / n_z;
    const TallyBlock scaled = window.scaled(f);
    std::optional<TallyBlock> ref;
    if (phase_reference) ref = phase_reference->scaled(f);
    KeyRateResult r = secret_key_length(scaled, options, ref ? &*ref : nullptr);
    const double blocks = 1.0 / f;
    r.d0 *= blocks;
    r.d1 *= blocks;
    r.lambda_ec *= blocks;
    r.secret_key_length_raw *= blocks;
    r.secret_key_length *= blocks;
    r.duration = window.duration;
    r.skr = r.secret_key_length / window.duration;
    r.skr_raw = r.secret_key_length_raw / window.duration;
    r.short_block = false;
    return r;
}

TallyBlock sift(const std::vector<PulseRecord>& pulses,
                const std::vector<DetectionRecord>& detections, const ProtocolConfig& cfg,
                double duration, int mode) {
    std::unordered_map<std::uint64_t, const PulseRecord*> by_index;
    const bool dense = [&] {
        for (std::size_t i = 0; i < pulses.size(); ++i)
            if (pulses[i].index != i) return false;
        return true;
    }();
    if (!dense) {
        by_index.reserve(pulses.size());
        for (const auto& p : pulses) by_index.emplace(p.index, &p);
    }

    TallyBlock block;
    block.cfg = cfg;
    block.duration = duration;
    block.mode = mode;
    for (const auto& d : detections) {
        const PulseRecord* p = nullptr;
        if (dense) {
            if (d.pulse_index < pulses.size()) p = &pulses[d.pulse_index];
        } else if (auto it = by_index.find(d.pulse_index); it != by_index.end()) {
            p = it->second;
        }
        if (!p) {
            throw std::invalid_argument("sift: detection refers to unknown pulse index " +
                                        std::to_string(d.pulse_index));
        }
        if (p->symbol.basis != d.basis) continue;
        const bool err = d.basis == Basis::Z ? d.outcome != *p->symbol.z_value : d.outcome != 0;
        auto& cell = block.at(d.basis, p->symbol.intensity);
        cell.n += 1.0;
        if (err) cell.m += 1.0;
    }
    return block;
}

// --- optimisation ----------------------------------------------------------

LinkSetup summary_link(const ChannelSummary& summary, const ProtocolConfig& cfg) {
    LinkSetup setup;
    setup.cfg = cfg;
    setup.launched = {true, false};
    ReceiverSpec rx;
    rx.extinction_error = summary.q_z;
    rx.interferometer_visibility = 1.0 - 2.0 * summary.q_x;
    for (DetectorSpec* d : {&rx.z_detector, &rx.x_detector}) {
        d->efficiency = 1.0;
        d->dark_rate = summary.dark_rate;
        d->dead_time = summary.dead_time;
    }
    setup.receivers = {rx, rx};
    return setup;
}

ChannelState summary_channel(const ChannelSummary& summary) {
    ChannelState st;
    st.coupling = Matrix3{};
    st.coupling[kPortLP11a][kPortLP11a] = std::pow(10.0, -summary.loss_db / 10.0);
    st.per_mode_loss_db = {0.0, summary.loss_db, 0.0};
    return st;
}

TallyBlock expected_block(const ChannelSummary& summary, const ProtocolConfig& cfg) {
    const auto setup = summary_link(summary, cfg);
    const auto mix = interleaved_mix(cfg);
    const auto probs = cell_probabilities(setup, summary_channel(summary), 0, mix, mix);
    const double z_per_pulse = probs.per_pulse[0][0].p_click() + probs.per_pulse[0][1].p_click();
    if (!(z_per_pulse > 0.0)) throw std::domain_error("expected_block: no Z detections");
    const double pulses = cfg.block_size / z_per_pulse;
    return expected_tally(probs, pulses, pulses / cfg.qubit_rate, 1, cfg);
}

TallyBlock reconstruct_block(const ProtocolConfig& cfg, const PublishedRates& rates, int mode) {
    const double total = rates.rate_z[0] + rates.rate_z[1];
    if (!(rates.rate_z[0] >= 0.0 && rates.rate_z[1] >= 0.0 && total > 0.0))
        throw std::invalid_argument("reconstruct_block: detection rates must be non-negative, not both zero");
    auto probability = [](double q) { return q >= 0.0 && q <= 1.0; };
    for (std::size_t k = 0; k < 2; ++k)
        if (!probability(rates.qber_z[k]) || (rates.qber_x && !probability((*rates.qber_x)[k])))
            throw std::invalid_argument("reconstruct_block: QBER outside [0, 1]");

    TallyBlock b;
    b.cfg = cfg;
    b.mode = mode;
    b.duration = cfg.block_size / total;
    // X detections follow from the basis-choice odds at the same intensity.
    const double x_per_z = (cfg.px_alice() * cfg.px_bob()) / (cfg.pz_alice * cfg.pz_bob);
    for (auto k : {Intensity::Signal, Intensity::Decoy}) {
        const auto i = static_cast<std::size_t>(k);
        auto& z = b.at(Basis::Z, k);
        z.n = rates.rate_z[i] * b.duration;
        z.m = rates.qber_z[i] * z.n;
        if (rates.qber_x) {
            auto& x = b.at(Basis::X, k);
            x.n = z.n * x_per_z;
            x.m = (*rates.qber_x)[i] * x.n;
        }
    }
    return b;
}

double modeled_skr(const ChannelSummary& summary, const ProtocolConfig& cfg,
                   const KeyRateOptions& options) {
    return secret_key_length(expected_block(summary, cfg), options).skr_raw;
}

std::size_t search_dimensions(const SearchSpace& space) { return space.mu2 ? 4 : 3; }

ProtocolConfig apply_search_point(const ProtocolConfig& base, const SearchSpace& space,
                                  const std::vector<double>& unit_point) {
    auto lerp = [](const Range& r, double u) { return r.lo + (r.hi - r.lo) * std::clamp(u, 0.0, 1.0); };
    ProtocolConfig cfg = base;
    cfg.p_mu1 = lerp(space.p_mu1, unit_point.at(0));
    cfg.pz_alice = lerp(space.pz_alice, unit_point.at(1));
    cfg.mu1 = lerp(space.mu1, unit_point.at(2));
    cfg.mu2 = space.mu2 ? lerp(*space.mu2, unit_point.at(3)) : cfg.mu1 / space.mu_ratio;
    return cfg;
}

namespace {

struct Objective {
    const ChannelSummary* summary;
    const ProtocolConfig* base;
    const SearchSpace* space;
    const KeyRateOptions* keyrate;
    int evaluations = 0;

    double operator()(const std::vector<double>& u) {
        ++evaluations;
        const ProtocolConfig cfg = apply_search_point(*base, *space, u);
        if (!config_violations(cfg).empty()) return -std::numeric_limits<double>::infinity();
        try {
            return modeled_skr(*summary, cfg, *keyrate);
        } catch (const std::domain_error&) {
            return -std::numeric_limits<double>::infinity();
        }
    }
};

double gsl_objective(const gsl_vector* x, void* params) {
    auto* obj = static_cast<Objective*>(params);
    std::vector<double> u(x->size);
    double penalty = 0.0;
    for (std::size_t i = 0; i < x->size; ++i) {
        const double v = gsl_vector_get(x, i);
        u[i] = std::clamp(v, 0.0, 1.0);
        penalty += std::abs(v - u[i]);
    }
    const double skr = (*obj)(u);
    if (!std::isfinite(skr)) return 1e30;
    // Scaled to O(1) and pushed back inside the unit box.
    return -skr / 1e6 + penalty;
}

}  // namespace

OptimizeResult optimize_parameters(const ChannelSummary& summary, const ProtocolConfig& base,
                                   const SearchSpace& space, const OptimizeOptions& options) {
    const std::size_t dims = search_dimensions(space);
    Objective objective{&summary, &base, &space, &options.keyrate};

    // Coarse lattice scan, then Nelder-Mead refinement from the best lattice
    // points and a few seeded random starts.
    std::vector<std::pair<double, std::vector<double>>> candidates;
    const int lattice = 4;
    std::vector<int> idx(dims, 0);
    while (true) {
        std::vector<double> u(dims);
        for (std::size_t d = 0; d < dims; ++d) u[d] = (idx[d] + 0.5) / lattice;
        candidates.emplace_back(objective(u), u);
        std::size_t d = 0;
        while (d < dims && ++idx[d] == lattice) idx[d++] = 0;
        if (d == dims) break;
    }
    std::sort(candidates.begin(), candidates.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });
    candidates.resize(std::min<std::size_t>(candidates.size(), 3));
    RandomStream rng(options.seed, "optimize-starts");
    for (int s = 0; s < options.random_starts; ++s) {
        std::vector<double> u(dims);
        for (auto& v : u) v = rng.uniform();
        candidates.emplace_back(objective(u), u);
    }

    OptimizeResult best;
    best.skr = -std::numeric_limits<double>::infinity();
    std::vector<double> best_u;
    bool all_converged = true;

    gsl_set_error_handler_off();
    gsl_multimin_fminimizer* solver =
        gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, dims);
    gsl_vector* x = gsl_vector_alloc(dims);
    gsl_vector* step = gsl_vector_alloc(dims);
    gsl_multimin_function fn{&gsl_objective, dims, &objective};

    for (const auto& [value, start] : candidates) {
        for (std::size_t d = 0; d < dims; ++d) gsl_vector_set(x, d, start[d]);
        gsl_vector_set_all(step, 0.15);
        gsl_multimin_fminimizer_set(solver, &fn, x, step);
        int status = GSL_CONTINUE;
        int iter = 0;
        while (status == GSL_CONTINUE && iter < options.max_iterations) {
            ++iter;
            if (gsl_multimin_fminimizer_iterate(solver) != GSL_SUCCESS) break;
            status = gsl_multimin_test_size(gsl_multimin_fminimizer_size(solver), 1e-6);
        }
        best.iterations += iter;
        all_converged = all_converged && status == GSL_SUCCESS;

        std::vector<double> u(dims);
        for (std::size_t d = 0; d < dims; ++d)
            u[d] = std::clamp(gsl_vector_get(solver->x, d), 0.0, 1.0);
        const double refined = objective(u);
        for (const auto& [val, point] : {std::pair{refined, u}, std::pair{value, start}}) {
            if (val > best.skr) {
                best.skr = val;
                best_u = point;
            }
        }
    }
    gsl_vector_free(step);
    gsl_vector_free(x);
    gsl_multimin_fminimizer_free(solver);

    best.config = apply_search_point(base, space, best_u);
    best.evaluations = objective.evaluations;
    best.converged = all_converged;
    best.message = all_converged ? "converged"
                                 : "iteration limit reached; returning best point found";
    return best;
}

// --- JSON ------------------------------------------------------------------

void to_json(nlohmann::json& j, const KeyRateResult& r) {
    j = nlohmann::json{{"d0", r.d0},
                       {"d1", r.d1},
                       {"phi_z", r.phi_z},
                       {"lambda_ec", r.lambda_ec},
                       {"secret_key_length_raw", r.secret_key_length_raw},
                       {"secret_key_length", r.secret_key_length},
                       {"skr", r.skr},
                       {"skr_raw", r.skr_raw},
                       {"qber_z", r.qber_z},
                       {"duration_s", r.duration},
                       {"d1_infeasible", r.d1_infeasible},
                       {"short_block", r.short_block},
                       {"phase_source", to_string(r.phase_source)}};
}

void from_json(const nlohmann::json& j, KeyRateResult& r) {
    j.at("d0").get_to(r.d0);
    j.at("d1").get_to(r.d1);
    j.at("phi_z").get_to(r.phi_z);
    j.at("lambda_ec").get_to(r.lambda_ec);
    j.at("secret_key_length_raw").get_to(r.secret_key_length_raw);
    j.at("secret_key_length").get_to(r.secret_key_length);
    j.at("skr").get_to(r.skr);
    detail::read_optional(j, "skr_raw", r.skr_raw);
    detail::read_optional(j, "qber_z", r.qber_z);
    detail::read_optional(j, "duration_s", r.duration);
    detail::read_optional(j, "d1_infeasible", r.d1_infeasible);
    detail::read_optional(j, "short_block", r.short_block);
    const std::string src = j.value("phase_source", std::string("fallback"));
    r.phase_source = src == "own" ? PhaseSource::Own
                     : src == "shared" ? PhaseSource::Shared
                                       : PhaseSource::Fallback;
}

void to_json(nlohmann::json& j, const ChannelSummary& s) {
    j = nlohmann::json{{"loss_db", s.loss_db}, {"q_z", s.q_z},
                       {"q_x", s.q_x},         {"dark_rate", s.dark_rate},
                       {"dead_time", s.dead_time}};
}

void from_json(const nlohmann::json& j, ChannelSummary& s) {
    detail::reject_unknown(j, "ChannelSummary",
                           {"loss_db", "q_z", "q_x", "dark_rate", "dead_time"});
    detail::read_optional(j, "loss_db", s.loss_db);
    detail::read_optional(j, "q_z", s.q_z);
    detail::read_optional(j, "q_x", s.q_x);
    detail::read_optional(j, "dark_rate", s.dark_rate);
    detail::read_optional(j, "dead_time", s.dead_time);
}

namespace {
void range_to_json(nlohmann::json& j, const Range& r) { j = nlohmann::json::array({r.lo, r.hi}); }
Range range_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 2) throw std::invalid_argument("range must be [lo, hi]");
    Range r{j[0].get<double>(), j[1].get<double>()};
    if (!(r.lo <= r.hi)) throw std::invalid_argument("range must satisfy lo <= hi");
    return r;
}
}  // namespace

void to_json(nlohmann::json& j, const SearchSpace& s) {
    j = nlohmann::json::object();
    range_to_json(j["p_mu1"], s.p_mu1);
    range_to_json(j["pz_alice"], s.pz_alice);
    range_to_json(j["mu1"], s.mu1);
    if (s.mu2) range_to_json(j["mu2"], *s.mu2);
    j["mu_ratio"] = s.mu_ratio;
}

void from_json(const nlohmann::json& j, SearchSpace& s) {
    detail::reject_unknown(j, "SearchSpace", {"p_mu1", "pz_alice", "mu1", "mu2", "mu_ratio"});
    if (j.contains("p_mu1")) s.p_mu1 = range_from_json(j["p_mu1"]);
    if (j.contains("pz_alice")) s.pz_alice = range_from_json(j["pz_alice"]);
    if (j.contains("mu1")) s.mu1 = range_from_json(j["mu1"]);
    if (j.contains("mu2")) s.mu2 = range_from_json(j["mu2"]);
    detail::read_optional(j, "mu_ratio", s.mu_ratio);
}

}  // namespace qkdsim
