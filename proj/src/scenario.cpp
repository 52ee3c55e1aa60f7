#include "qkdsim/scenario.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <gsl/gsl_errno.h>
#include <gsl/gsl_integration.h>
#include <gsl/gsl_multifit_nlinear.h>

#include "json_fields.hpp"

namespace qkdsim {

namespace {

constexpr std::array<Basis, 2> kBases{Basis::Z, Basis::X};
constexpr std::array<Intensity, 2> kIntensities{Intensity::Signal, Intensity::Decoy};

std::size_t window_count(const Scenario& s) {
    return static_cast<std::size_t>(std::llround(s.duration / s.window));
}

TallyBlock drop_x(TallyBlock b) {
    for (Intensity k : kIntensities) b.at(Basis::X, k) = TallyCell{};
    return b;
}

void add_scaled(CellProbabilities& acc, const CellProbabilities& p, double w,
                std::optional<Intensity> only = std::nullopt) {
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t k = 0; k < 2; ++k) {
            if (only && static_cast<std::size_t>(*only) != k) continue;
            acc.per_pulse[b][k].p_correct += w * p.per_pulse[b][k].p_correct;
            acc.per_pulse[b][k].p_error += w * p.per_pulse[b][k].p_error;
        }
}

/// Probabilities averaged over `samples` equally spaced points of [t0, t1).
CellProbabilities averaged_probs(const LinkSetup& setup, const DriftTrajectory& traj,
                                 std::size_t slot, double t0, double t1, int samples,
                                 const IntensityMix& mix, const IntensityMix& load,
                                 std::optional<Intensity> only, double weight) {
    CellProbabilities acc;
    const int n = std::max(1, samples);
    for (int i = 0; i < n; ++i) {
        const double t = t0 + (i + 0.5) * (t1 - t0) / n;
        add_scaled(acc, cell_probabilities(setup, traj.state_at(t), slot, mix, load),
                   weight / n, only);
    }
    return acc;
}

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

double sample_std(const std::vector<double>& v, double mean) {
    if (v.size() < 2) return 0.0;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

}  // namespace

std::string to_string(Acquisition a) {
    return a == Acquisition::Interleaved ? "interleaved" : "sequential";
}
std::string to_string(Engine e) { return e == Engine::Tally ? "tally" : "per_pulse"; }
std::string to_string(DeadtimeLoad d) {
    return d == DeadtimeLoad::OperatingPoint ? "operating_point" : "per_pass";
}

ProtocolConfig windowed_protocol() {
    ProtocolConfig cfg = active_decoy_config();
    cfg.block_size = 1e8;
    return cfg;
}

Engine Scenario::resolved_engine() const {
    if (engine) return *engine;
    return duration > 1.0 ? Engine::Tally : Engine::PerPulse;
}

LinkSetup Scenario::link_setup() const {
    LinkSetup setup;
    setup.cfg = protocol;
    setup.receivers = receivers;
    setup.launched = launched;
    return setup;
}

void validate_scenario(const Scenario& s) {
    std::vector<ConfigViolation> v = config_violations(s.protocol);
    auto check = [&](bool ok, const char* field, const char* msg) {
        if (!ok) v.push_back({field, msg});
    };
    try {
        validate_channel_spec(s.channel);
    } catch (const std::invalid_argument& e) {
        v.push_back({"channel", e.what()});
    }
    for (const auto& r : s.receivers) {
        try {
            validate_receiver(r);
        } catch (const std::invalid_argument& e) {
            v.push_back({"receivers", e.what()});
        }
    }
    check(s.duration > 0.0, "duration_s", "must be > 0");
    check(s.window > 0.0, "window_s", "must be > 0");
    if (s.duration > 0.0 && s.window > 0.0) {
        const double ratio = s.duration / s.window;
        check(ratio >= 1.0 - 1e-9 && std::abs(ratio - std::round(ratio)) <= 1e-9 * ratio,
              "window_s", "must divide duration_s");
    }
    check(s.sequential_split > 0.0 && s.sequential_split < 1.0, "sequential_split",
          "must lie in (0, 1) so both intensities get a sub-duration");
    check(s.drift_substep > 0.0, "drift_substep_s", "must be > 0");
    check(s.window_samples >= 1, "window_samples", "must be >= 1");
    check(s.keyrate.eps_divisor >= 1.0, "keyrate.eps_divisor", "must be >= 1");
    if (!v.empty()) throw ConfigError(std::move(v));
}

// --- run -------------------------------------------------------------------

std::array<std::vector<TallyBlock>, 2> scenario_tallies(const Scenario& s) {
    validate_scenario(s);
    const LinkSetup setup = s.link_setup();
    const auto& cfg = s.protocol;
    const std::size_t windows = window_count(s);
    const double W = s.window;
    const bool sequential = s.acquisition == Acquisition::Sequential;
    const double split = s.sequential_split;

    RandomStream root(s.seed, "scenario");
    RandomStream drift_rng(s.seed, s.channel.drift.seed_stream);
    const DriftTrajectory traj(s.channel, s.duration, s.drift_substep, drift_rng);

    // Pass k of a sequential run covers [pass_start[k], pass_start[k] + share[k] * duration).
    const std::array<double, 2> share{split, 1.0 - split};
    const std::array<double, 2> pass_start{0.0, split * s.duration};
    auto pass_interval = [&](std::size_t k, std::size_t w) {
        const double t0 = pass_start[k] + static_cast<double>(w) * share[k] * W;
        return std::pair{t0, t0 + share[k] * W};
    };

    std::array<std::vector<TallyBlock>, 2> out;
    for (auto& v : out) v.reserve(windows);

    if (s.resolved_engine() == Engine::Tally) {
        const auto pulses = static_cast<std::uint64_t>(std::llround(cfg.qubit_rate * W));
        const IntensityMix mix = interleaved_mix(cfg);
        for (std::size_t w = 0; w < windows; ++w) {
            RandomStream wrng = root.derive(fmt::format("tally-window-{}", w));
            for (std::size_t slot = 0; slot < 2; ++slot) {
                CellProbabilities probs;
                if (!sequential) {
                    const double t0 = static_cast<double>(w) * W;
                    probs = averaged_probs(setup, traj, slot, t0, t0 + W, s.window_samples, mix,
                                           mix, std::nullopt, 1.0);
                } else {
                    // Each intensity comes from its own pass; counts are
                    // weighted as if interleaved at P_mu.
                    for (Intensity k : kIntensities) {
                        const auto [t0, t1] = pass_interval(static_cast<std::size_t>(k), w);
                        const IntensityMix pass = fixed_mix(k);
                        const IntensityMix load =
                            s.deadtime_load == DeadtimeLoad::OperatingPoint ? mix : pass;
                        add_scaled(probs,
                                   averaged_probs(setup, traj, slot, t0, t1, s.window_samples,
                                                  pass, load, k, cfg.p_mu(k)),
                                   1.0);
                    }
                }
                TallyBlock b = sample_tally(probs, pulses, W, mode_number(slot), cfg, wrng);
                out[slot].push_back(s.measure_x[slot] ? b : drop_x(b));
            }
        }
        return out;
    }

    // Per-pulse engine: one run_mc call per window (and per pass).
    for (std::size_t w = 0; w < windows; ++w) {
        std::array<TallyBlock, 2> blocks;
        for (std::size_t slot = 0; slot < 2; ++slot) {
            blocks[slot].cfg = cfg;
            blocks[slot].mode = mode_number(slot);
            blocks[slot].duration = W;
        }
        McOptions opts;
        opts.max_pulses = s.max_pulses;
        opts.drift_substep = s.drift_substep;
        opts.trajectory = &traj;
        if (!sequential) {
            opts.start_time = static_cast<double>(w) * W;
            RandomStream wrng = root.derive(fmt::format("mc-window-{}", w));
            const auto pulses = static_cast<std::uint64_t>(std::llround(cfg.qubit_rate * W));
            const McResult r = run_mc(setup, traj.state_at(opts.start_time), pulses, wrng, opts);
            for (std::size_t slot = 0; slot < 2; ++slot) {
                blocks[slot].cells = r.modes[slot].tally.cells;
            }
        } else {
            for (Intensity k : kIntensities) {
                const auto ki = static_cast<std::size_t>(k);
                opts.start_time = pass_interval(ki, w).first;
                opts.fixed_intensity = k;
                RandomStream wrng = root.derive(fmt::format("mc-window-{}-pass-{}", w, ki));
                const auto pulses =
                    static_cast<std::uint64_t>(std::llround(cfg.p_mu(k) * cfg.qubit_rate * W));
                const McResult r =
                    run_mc(setup, traj.state_at(opts.start_time), pulses, wrng, opts);
                for (std::size_t slot = 0; slot < 2; ++slot)
                    for (Basis b : kBases) blocks[slot].at(b, k) = r.modes[slot].tally.at(b, k);
            }
        }
        for (std::size_t slot = 0; slot < 2; ++slot)
            out[slot].push_back(s.measure_x[slot] ? blocks[slot] : drop_x(blocks[slot]));
    }
    return out;
}

WindowedResult evaluate_windows(const Scenario& s,
                                const std::array<std::vector<TallyBlock>, 2>& tallies) {
    if (tallies[0].size() != tallies[1].size())
        throw std::invalid_argument("evaluate_windows: modes have different window counts");
    const std::size_t windows = tallies[0].size();

    WindowedResult res;
    res.windows.reserve(2 * windows);
    std::array<std::vector<double>, 2> skr, raw;
    for (std::size_t w = 0; w < windows; ++w) {
        for (std::size_t slot = 0; slot < 2; ++slot) {
            const TallyBlock& b = tallies[slot][w];
            const TallyBlock& other = tallies[1 - slot][w];
            const TallyBlock* ref = other.has_basis(Basis::X) ? &other : nullptr;
            WindowRecord rec;
            rec.start = static_cast<double>(w) * s.window;
            rec.mode = mode_number(slot);
            rec.tally = b;
            rec.key = blocked_key_rate(b, s.keyrate, ref);
            skr[slot].push_back(rec.key.skr);
            raw[slot].push_back(rec.key.skr_raw);
            res.windows.push_back(std::move(rec));
        }
    }

    auto& sum = res.summary;
    sum.window_count = windows;
    sum.duration = s.duration;
    sum.window = s.window;
    sum.seed = s.seed;
    sum.acquisition = to_string(s.acquisition);
    sum.engine = to_string(s.resolved_engine());
    sum.scenario_hash = hex64(stable_hash(nlohmann::json(s).dump()));
    for (std::size_t slot = 0; slot < 2; ++slot) {
        auto& m = sum.modes[slot];
        m.mode = mode_number(slot);
        m.totals = TallyBlock{};
        m.totals.cfg = s.protocol;
        m.totals.mode = m.mode;
        m.totals.duration = 0.0;
        for (const auto& b : tallies[slot]) m.totals += b;
        m.mean_skr = mean_of(skr[slot]);
        m.std_skr = sample_std(skr[slot], m.mean_skr);
        m.mean_skr_raw = mean_of(raw[slot]);
        m.std_skr_raw = sample_std(raw[slot], m.mean_skr_raw);
        const double nz = m.totals.n(Basis::Z);
        m.qber_z = nz > 0.0 ? m.totals.m(Basis::Z) / nz : 0.0;
        if (m.totals.has_basis(Basis::X)) m.qber_x = m.totals.m(Basis::X) / m.totals.n(Basis::X);
        for (const auto& rec : res.windows) {
            if (rec.mode != m.mode) continue;
            m.negative_windows += rec.key.secret_key_length_raw < 0.0;
            m.infeasible_windows += rec.key.d1_infeasible;
            m.short_windows += rec.key.short_block;
        }
    }
    sum.mean_total_skr = sum.modes[0].mean_skr + sum.modes[1].mean_skr;
    sum.mean_total_skr_raw = sum.modes[0].mean_skr_raw + sum.modes[1].mean_skr_raw;
    return res;
}

WindowedResult run_scenario(const Scenario& s) { return evaluate_windows(s, scenario_tallies(s)); }

// --- stationary expectations -------------------------------------------------

std::vector<ChannelNode> stationary_nodes(const ChannelSpec& spec, int order) {
    const auto& d = spec.drift;
    const DriftAngles mean = mean_angles(d);
    if (d.amplitude == 0.0 || order <= 1) return {ChannelNode{channel_at(spec, mean), 1.0}};

    // Probabilists' rule from the physicists' one: x = sqrt(2) * node.
    auto rule = [](int n) {
        std::vector<std::pair<double, double>> out;
        if (n <= 1) {
            out.emplace_back(0.0, 1.0);
            return out;
        }
        gsl_integration_fixed_workspace* ws =
            gsl_integration_fixed_alloc(gsl_integration_fixed_hermite, n, 0.0, 1.0, 0.0, 0.0);
        const double* x = gsl_integration_fixed_nodes(ws);
        const double* w = gsl_integration_fixed_weights(ws);
        double total = 0.0;
        for (int i = 0; i < n; ++i) total += w[i];
        for (int i = 0; i < n; ++i) out.emplace_back(std::sqrt(2.0) * x[i], w[i] / total);
        gsl_integration_fixed_free(ws);
        return out;
    };
    const DriftAngles sd = stationary_std(d);
    auto rule_for = [&](double sigma) { return rule(sigma > 0.0 ? order : 1); };
    const auto r11 = rule_for(sd.lp11_mixing);
    const auto r01 = rule_for(sd.lp01_mixing);
    const auto rp = rule_for(sd.polarization);

    std::vector<ChannelNode> nodes;
    nodes.reserve(r11.size() * r01.size() * rp.size());
    for (const auto& [x11, w11] : r11)
        for (const auto& [x01, w01] : r01)
            for (const auto& [xp, wp] : rp) {
                DriftAngles a = mean;
                a.lp11_mixing += sd.lp11_mixing * x11;
                a.lp01_mixing += sd.lp01_mixing * x01;
                a.polarization += sd.polarization * xp;
                nodes.push_back(ChannelNode{channel_at(spec, a), w11 * w01 * wp});
            }
    return nodes;
}

std::array<CellProbabilities, 2> stationary_probabilities(const Scenario& s, int order) {
    const LinkSetup setup = s.link_setup();
    const IntensityMix mix = interleaved_mix(s.protocol);
    std::array<CellProbabilities, 2> out{};
    for (const auto& node : stationary_nodes(s.channel, order))
        for (std::size_t slot = 0; slot < 2; ++slot)
            add_scaled(out[slot], cell_probabilities(setup, node.state, slot, mix, mix),
                       node.weight);
    return out;
}

SweepRow stationary_skr(const Scenario& s) {
    const LinkSetup setup = s.link_setup();
    const auto& cfg = s.protocol;
    const IntensityMix mix = interleaved_mix(cfg);
    const double pulses = cfg.qubit_rate * s.window;

    SweepRow row;
    row.loss_db = s.channel.fiber_loss_db;
    for (const auto& node : stationary_nodes(s.channel)) {
        std::array<TallyBlock, 2> b;
        for (std::size_t slot = 0; slot < 2; ++slot) {
            const auto p = cell_probabilities(setup, node.state, slot, mix, mix);
            b[slot] = expected_tally(p, pulses, s.window, mode_number(slot), cfg);
            if (!s.measure_x[slot]) b[slot] = drop_x(b[slot]);
        }
        for (std::size_t slot = 0; slot < 2; ++slot) {
            const TallyBlock* ref = b[1 - slot].has_basis(Basis::X) ? &b[1 - slot] : nullptr;
            const auto key = blocked_key_rate(b[slot], s.keyrate, ref);
            row.skr[slot] += node.weight * key.skr;
            row.skr_raw[slot] += node.weight * key.skr_raw;
        }
    }
    row.total = row.skr[0] + row.skr[1];
    return row;
}

unsigned sweep_threads() {
    if (const char* env = std::getenv("QKDSIM_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& fn) {
    const unsigned workers =
        static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), count));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned t = 0; t < workers; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

std::vector<SweepRow> loss_sweep(const Scenario& s, const std::vector<double>& losses) {
    if (losses.empty()) throw std::invalid_argument("loss_sweep: no losses given");
    validate_scenario(s);
    std::vector<SweepRow> rows(losses.size());
    parallel_for(losses.size(), sweep_threads(), [&](std::size_t i) {
        Scenario point = s;
        point.channel.fiber_loss_db = losses[i];
        rows[i] = stationary_skr(point);
    });
    return rows;
}

// --- calibration -------------------------------------------------------------

namespace {

struct FitParam {
    std::string name;
    enum Kind { InsertionLoss, Extinction, Visibility } kind;
    std::size_t slot;
};

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double logit(double p) { return std::log(p / (1.0 - p)); }

double to_internal(const FitParam& p, const Scenario& s) {
    switch (p.kind) {
        case FitParam::InsertionLoss: return s.channel.mux.insertion_loss_db[kSignalPorts[p.slot]];
        case FitParam::Extinction:
            return logit(std::clamp(2.0 * s.receivers[p.slot].extinction_error, 1e-9, 1 - 1e-9));
        case FitParam::Visibility:
            return logit(std::clamp(s.receivers[0].interferometer_visibility, 1e-9, 1 - 1e-9));
    }
    return 0.0;
}

double apply_param(const FitParam& p, double x, Scenario& s) {
    switch (p.kind) {
        case FitParam::InsertionLoss:
            s.channel.mux.insertion_loss_db[kSignalPorts[p.slot]] = x;
            return x;
        case FitParam::Extinction:
            s.receivers[p.slot].extinction_error = 0.5 * logistic(x);
            return s.receivers[p.slot].extinction_error;
        case FitParam::Visibility:
            for (auto& r : s.receivers) r.interferometer_visibility = logistic(x);
            return s.receivers[0].interferometer_visibility;
    }
    return x;
}

struct ModelQuantities {
    std::array<std::array<double, 2>, 2> rate{};  // [slot][intensity], sifted Z per s
    std::array<double, 2> qber_z{};
    std::array<double, 2> qber_x{};
};

ModelQuantities model_quantities(const Scenario& s, int order) {
    const auto probs = stationary_probabilities(s, order);
    ModelQuantities q;
    for (std::size_t slot = 0; slot < 2; ++slot) {
        std::array<double, 2> n{}, m{};
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t k = 0; k < 2; ++k) {
                n[b] += probs[slot].per_pulse[b][k].p_click();
                m[b] += probs[slot].per_pulse[b][k].p_error;
            }
        for (std::size_t k = 0; k < 2; ++k)
            q.rate[slot][k] = probs[slot].per_pulse[0][k].p_click() * s.protocol.qubit_rate;
        q.qber_z[slot] = n[0] > 0.0 ? m[0] / n[0] : 0.0;
        q.qber_x[slot] = n[1] > 0.0 ? m[1] / n[1] : 0.0;
    }
    return q;
}

struct TargetTerm {
    std::string name;
    double target;
    std::function<double(const ModelQuantities&)> model;
};

std::vector<TargetTerm> target_terms(const CalibrationTargets& t) {
    std::vector<TargetTerm> terms;
    for (std::size_t slot = 0; slot < 2; ++slot) {
        const auto& mt = t.modes[slot];
        const std::string tag = fmt::format("mode{}.", mode_number(slot));
        if (mt.rate_z_mu1)
            terms.push_back({tag + "rate_z_mu1", *mt.rate_z_mu1,
                             [slot](const ModelQuantities& q) { return q.rate[slot][0]; }});
        if (mt.rate_z_mu2)
            terms.push_back({tag + "rate_z_mu2", *mt.rate_z_mu2,
                             [slot](const ModelQuantities& q) { return q.rate[slot][1]; }});
        if (mt.rate_z)
            terms.push_back({tag + "rate_z", *mt.rate_z, [slot](const ModelQuantities& q) {
                                 return q.rate[slot][0] + q.rate[slot][1];
                             }});
        if (mt.qber_z)
            terms.push_back({tag + "qber_z", *mt.qber_z,
                             [slot](const ModelQuantities& q) { return q.qber_z[slot]; }});
        if (mt.qber_x)
            terms.push_back({tag + "qber_x", *mt.qber_x,
                             [slot](const ModelQuantities& q) { return q.qber_x[slot]; }});
    }
    return terms;
}

struct FitContext {
    Scenario base;
    std::vector<FitParam> params;
    std::vector<TargetTerm> terms;
    int order;
};

Scenario fitted_scenario(const FitContext& ctx, const gsl_vector* x) {
    Scenario s = ctx.base;
    for (std::size_t i = 0; i < ctx.params.size(); ++i)
        apply_param(ctx.params[i], gsl_vector_get(x, i), s);
    return s;
}

int fit_residuals(const gsl_vector* x, void* data, gsl_vector* f) {
    const auto* ctx = static_cast<const FitContext*>(data);
    const ModelQuantities q = model_quantities(fitted_scenario(*ctx, x), ctx->order);
    for (std::size_t i = 0; i < ctx->terms.size(); ++i) {
        const auto& t = ctx->terms[i];
        gsl_vector_set(f, i, (t.model(q) - t.target) / t.target);
    }
    return GSL_SUCCESS;
}

}  // namespace

CalibrationReport calibrate(const CalibrationTargets& targets, const Scenario& tmpl) {
    Scenario base = tmpl;
    if (targets.protocol) base.protocol = *targets.protocol;
    if (targets.loss_db) base.channel.fiber_loss_db = *targets.loss_db;
    validate_scenario(base);

    CalibrationReport report;
    report.scenario = base;
    const auto& cfg = base.protocol;

    // Feasibility: a sifted rate cannot exceed one detection per matching pulse.
    for (std::size_t slot = 0; slot < 2; ++slot) {
        const auto& mt = targets.modes[slot];
        const double sifted = cfg.qubit_rate * cfg.pz_alice * cfg.pz_bob;
        const std::array<std::pair<std::optional<double>, double>, 3> rates{
            std::pair{mt.rate_z_mu1, sifted * cfg.p_mu1},
            std::pair{mt.rate_z_mu2, sifted * cfg.p_mu2()}, std::pair{mt.rate_z, sifted}};
        for (const auto& [rate, limit] : rates) {
            if (!rate) continue;
            if (!(*rate > 0.0 && *rate < limit)) {
                throw CalibrationError(
                    fmt::format("calibrate: mode {} target rate {} outside (0, {}) allowed by "
                                "the source rate and basis probabilities",
                                mode_number(slot), *rate, limit),
                    report);
            }
        }
        for (const auto& qb : {mt.qber_z, mt.qber_x}) {
            if (qb && !(*qb > 0.0 && *qb < 0.5))
                throw CalibrationError(
                    fmt::format("calibrate: mode {} QBER target {} outside (0, 0.5)",
                                mode_number(slot), *qb),
                    report);
        }
    }

    FitContext ctx{base, {}, target_terms(targets), 5};
    bool any_qx = false;
    for (std::size_t slot = 0; slot < 2; ++slot) {
        const auto& mt = targets.modes[slot];
        const std::string tag = fmt::format("mode{}", mode_number(slot));
        if (mt.rate_z_mu1 || mt.rate_z_mu2 || mt.rate_z)
            ctx.params.push_back({tag + ".mux_insertion_loss_db", FitParam::InsertionLoss, slot});
        if (mt.qber_z) ctx.params.push_back({tag + ".extinction_error", FitParam::Extinction, slot});
        any_qx = any_qx || mt.qber_x.has_value();
    }
    if (any_qx) ctx.params.push_back({"interferometer_visibility", FitParam::Visibility, 0});
    if (ctx.terms.size() < ctx.params.size()) {
        throw CalibrationError("calibrate: fewer targets than free parameters", report);
    }

    Scenario fitted = base;
    if (!ctx.params.empty()) {
        gsl_set_error_handler_off();
        const std::size_t n = ctx.terms.size();
        const std::size_t p = ctx.params.size();
        gsl_vector* x = gsl_vector_alloc(p);
        for (std::size_t i = 0; i < p; ++i) gsl_vector_set(x, i, to_internal(ctx.params[i], base));

        gsl_multifit_nlinear_fdf fdf{};
        fdf.f = &fit_residuals;
        fdf.df = nullptr;
        fdf.fvv = nullptr;
        fdf.n = n;
        fdf.p = p;
        fdf.params = &ctx;
        gsl_multifit_nlinear_parameters fit_params = gsl_multifit_nlinear_default_parameters();
        gsl_multifit_nlinear_workspace* ws =
            gsl_multifit_nlinear_alloc(gsl_multifit_nlinear_trust, &fit_params, n, p);
        gsl_multifit_nlinear_init(x, &fdf, ws);
        int info = 0;
        const int status =
            gsl_multifit_nlinear_driver(200, 1e-12, 1e-12, 0.0, nullptr, nullptr, &info, ws);
        report.iterations = static_cast<int>(gsl_multifit_nlinear_niter(ws));
        report.converged = status == GSL_SUCCESS;
        const gsl_vector* best = gsl_multifit_nlinear_position(ws);
        fitted = fitted_scenario(ctx, best);
        for (std::size_t i = 0; i < p; ++i) {
            Scenario scratch = base;
            report.parameters.emplace_back(
                ctx.params[i].name, apply_param(ctx.params[i], gsl_vector_get(best, i), scratch));
        }
        gsl_multifit_nlinear_free(ws);
        gsl_vector_free(x);
    } else {
        report.converged = true;
    }

    report.scenario = fitted;
    const ModelQuantities q = model_quantities(fitted, ctx.order);
    for (const auto& t : ctx.terms) {
        const double model = t.model(q);
        report.residuals.push_back({t.name, t.target, model, (model - t.target) / t.target});
    }
    if (targets.loss_db) {
        report.residuals.push_back(
            {"loss_db", *targets.loss_db, fitted.channel.fiber_loss_db,
             (fitted.channel.fiber_loss_db - *targets.loss_db) / *targets.loss_db});
    }
    for (const auto& r : report.residuals) {
        if (!(std::abs(r.relative) <= targets.tolerance)) {
            throw CalibrationError(
                fmt::format("calibrate: residual for {} is {:.1f}% (target {}, model {}), "
                            "above the {:.0f}% tolerance",
                            r.name, 100.0 * r.relative, r.target, r.model,
                            100.0 * targets.tolerance),
                report);
        }
    }
    return report;
}

CalibrationTargets expected_targets(const Scenario& s) {
    const ModelQuantities q = model_quantities(s, 5);
    CalibrationTargets t;
    t.protocol = s.protocol;
    t.loss_db = s.channel.fiber_loss_db;
    for (std::size_t slot = 0; slot < 2; ++slot) {
        t.modes[slot].rate_z_mu1 = q.rate[slot][0];
        t.modes[slot].rate_z_mu2 = q.rate[slot][1];
        t.modes[slot].qber_z = q.qber_z[slot];
        if (slot == 0) t.modes[slot].qber_x = q.qber_x[slot];
    }
    return t;
}

// --- outputs -------------------------------------------------------------------

namespace {

std::string num(double v) { return fmt::format("{}", v); }

std::ofstream open_for_write(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    return out;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
    out.flush();
    if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

void write_windows_csv(const WindowedResult& r, const std::filesystem::path& path) {
    auto out = open_for_write(path);
    const auto& cols = windows_csv_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
    out << '\n';
    for (const auto& w : r.windows) {
        const auto& t = w.tally;
        out << num(w.start) << ',' << w.mode;
        for (Intensity k : kIntensities) out << ',' << num(t.at(Basis::Z, k).n);
        for (Intensity k : kIntensities) out << ',' << num(t.at(Basis::Z, k).m);
        for (Intensity k : kIntensities) out << ',' << num(t.at(Basis::X, k).n);
        for (Intensity k : kIntensities) out << ',' << num(t.at(Basis::X, k).m);
        out << ',' << (t.has_basis(Basis::Z) ? num(t.m(Basis::Z) / t.n(Basis::Z)) : "");
        out << ',' << (t.has_basis(Basis::X) ? num(t.m(Basis::X) / t.n(Basis::X)) : "");
        out << ',' << num(w.key.d0) << ',' << num(w.key.d1) << ',' << num(w.key.phi_z) << ','
            << num(w.key.secret_key_length_raw) << ',' << num(w.key.skr) << '\n';
    }
    finish(out, path);
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
    auto out = open_for_write(path);
    out << "loss_db,skr_mode1_bps,skr_mode2_bps,skr_total_bps,skr_raw_mode1_bps,skr_raw_mode2_bps\n";
    for (const auto& r : rows) {
        out << num(r.loss_db) << ',' << num(r.skr[0]) << ',' << num(r.skr[1]) << ','
            << num(r.total) << ',' << num(r.skr_raw[0]) << ',' << num(r.skr_raw[1]) << '\n';
    }
    finish(out, path);
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string() + " for reading");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument(path.string() + ": " + e.what());
    }
}

void write_json_file(const nlohmann::json& j, const std::filesystem::path& path) {
    auto out = open_for_write(path);
    out << j.dump(2) << '\n';
    finish(out, path);
}

void write_summary_json(const RunSummary& s, const std::filesystem::path& path) {
    write_json_file(nlohmann::json(s), path);
}

RunSummary read_summary_json(const std::filesystem::path& path) {
    return read_json_file(path).get<RunSummary>();
}

void emit_outputs(const WindowedResult& r, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
    write_windows_csv(r, dir / "windows.csv");
    write_summary_json(r.summary, dir / "summary.json");
}

// --- JSON ------------------------------------------------------------------------

namespace {

template <class E>
E parse_enum(const nlohmann::json& j, const char* what,
             std::initializer_list<std::pair<const char*, E>> names) {
    const auto text = j.get<std::string>();
    for (const auto& [name, value] : names)
        if (text == name) return value;
    throw std::invalid_argument(std::string("unknown ") + what + " \"" + text + "\"");
}

void keyrate_to_json(nlohmann::json& j, const KeyRateOptions& k) {
    j = nlohmann::json{{"shared_phase_error", k.shared_phase_error},
                       {"eps_divisor", k.eps_divisor},
                       {"finite_size", k.finite_size}};
}

void keyrate_from_json(const nlohmann::json& j, KeyRateOptions& k) {
    detail::reject_unknown(j, "keyrate", {"shared_phase_error", "eps_divisor", "finite_size"});
    detail::read_optional(j, "shared_phase_error", k.shared_phase_error);
    detail::read_optional(j, "eps_divisor", k.eps_divisor);
    detail::read_optional(j, "finite_size", k.finite_size);
}

}  // namespace

void to_json(nlohmann::json& j, const Scenario& s) {
    j = nlohmann::json{{"protocol", s.protocol},
                       {"channel", s.channel},
                       {"receivers", s.receivers},
                       {"acquisition", to_string(s.acquisition)},
                       {"sequential_split", s.sequential_split},
                       {"duration_s", s.duration},
                       {"window_s", s.window},
                       {"seed", s.seed},
                       {"launched", s.launched},
                       {"measure_x", s.measure_x},
                       {"deadtime_load", to_string(s.deadtime_load)},
                       {"drift_substep_s", s.drift_substep},
                       {"window_samples", s.window_samples},
                       {"max_pulses", s.max_pulses}};
    keyrate_to_json(j["keyrate"], s.keyrate);
    if (s.engine) j["engine"] = to_string(*s.engine);
}

void from_json(const nlohmann::json& j, Scenario& s) {
    detail::reject_unknown(j, "Scenario",
                           {"protocol", "channel", "receivers", "acquisition", "sequential_split",
                            "duration_s", "window_s", "engine", "seed", "launched", "measure_x",
                            "deadtime_load", "keyrate", "drift_substep_s", "window_samples",
                            "max_pulses"});
    detail::read_optional(j, "protocol", s.protocol);
    detail::read_optional(j, "channel", s.channel);
    if (auto it = j.find("receivers"); it != j.end()) {
        if (it->is_object()) {
            it->get_to(s.receivers[0]);
            s.receivers[1] = s.receivers[0];
        } else if (it->is_array() && it->size() == 2) {
            (*it)[0].get_to(s.receivers[0]);
            (*it)[1].get_to(s.receivers[1]);
        } else {
            throw std::invalid_argument("Scenario: receivers must be an object or a 2-element array");
        }
    }
    if (auto it = j.find("acquisition"); it != j.end())
        s.acquisition = parse_enum<Acquisition>(
            *it, "acquisition",
            {{"interleaved", Acquisition::Interleaved}, {"sequential", Acquisition::Sequential}});
    if (auto it = j.find("engine"); it != j.end())
        s.engine = parse_enum<Engine>(*it, "engine",
                                      {{"tally", Engine::Tally}, {"per_pulse", Engine::PerPulse}});
    if (auto it = j.find("deadtime_load"); it != j.end())
        s.deadtime_load = parse_enum<DeadtimeLoad>(
            *it, "deadtime_load",
            {{"operating_point", DeadtimeLoad::OperatingPoint}, {"per_pass", DeadtimeLoad::PerPass}});
    if (auto it = j.find("keyrate"); it != j.end()) keyrate_from_json(*it, s.keyrate);
    detail::read_optional(j, "sequential_split", s.sequential_split);
    detail::read_optional(j, "duration_s", s.duration);
    detail::read_optional(j, "window_s", s.window);
    detail::read_optional(j, "seed", s.seed);
    detail::read_optional(j, "launched", s.launched);
    detail::read_optional(j, "measure_x", s.measure_x);
    detail::read_optional(j, "drift_substep_s", s.drift_substep);
    detail::read_optional(j, "window_samples", s.window_samples);
    detail::read_optional(j, "max_pulses", s.max_pulses);
}

void to_json(nlohmann::json& j, const ModeAggregate& m) {
    j = nlohmann::json{{"mode", m.mode},
                       {"mean_skr_bps", m.mean_skr},
                       {"std_skr_bps", m.std_skr},
                       {"mean_skr_raw_bps", m.mean_skr_raw},
                       {"std_skr_raw_bps", m.std_skr_raw},
                       {"qber_z", m.qber_z},
                       {"qber_x", m.qber_x ? nlohmann::json(*m.qber_x) : nlohmann::json(nullptr)},
                       {"negative_windows", m.negative_windows},
                       {"infeasible_windows", m.infeasible_windows},
                       {"short_windows", m.short_windows},
                       {"totals", m.totals}};
}

void from_json(const nlohmann::json& j, ModeAggregate& m) {
    j.at("mode").get_to(m.mode);
    j.at("mean_skr_bps").get_to(m.mean_skr);
    j.at("std_skr_bps").get_to(m.std_skr);
    j.at("mean_skr_raw_bps").get_to(m.mean_skr_raw);
    j.at("std_skr_raw_bps").get_to(m.std_skr_raw);
    j.at("qber_z").get_to(m.qber_z);
    if (const auto& q = j.at("qber_x"); q.is_null()) {
        m.qber_x.reset();
    } else {
        m.qber_x = q.get<double>();
    }
    j.at("negative_windows").get_to(m.negative_windows);
    j.at("infeasible_windows").get_to(m.infeasible_windows);
    j.at("short_windows").get_to(m.short_windows);
    // Totals may legitimately be empty (no windows), which validation rejects.
    const auto& t = j.at("totals");
    detail::read_optional(t, "mode", m.totals.mode);
    detail::read_optional(t, "duration_s", m.totals.duration);
    detail::read_optional(t, "config", m.totals.cfg);
    for (Basis b : kBases)
        for (Intensity k : kIntensities) {
            const std::string suffix = std::string(b == Basis::Z ? "z" : "x") + "_" +
                                       (k == Intensity::Signal ? "mu1" : "mu2");
            m.totals.at(b, k).n = t.value("n_" + suffix, 0.0);
            m.totals.at(b, k).m = t.value("m_" + suffix, 0.0);
        }
}

void to_json(nlohmann::json& j, const RunSummary& s) {
    j = nlohmann::json{{"window_count", s.window_count},
                       {"duration_s", s.duration},
                       {"window_s", s.window},
                       {"seed", s.seed},
                       {"acquisition", s.acquisition},
                       {"engine", s.engine},
                       {"scenario_hash", s.scenario_hash},
                       {"modes", s.modes},
                       {"mean_total_skr_bps", s.mean_total_skr},
                       {"mean_total_skr_raw_bps", s.mean_total_skr_raw}};
}

void from_json(const nlohmann::json& j, RunSummary& s) {
    j.at("window_count").get_to(s.window_count);
    j.at("duration_s").get_to(s.duration);
    j.at("window_s").get_to(s.window);
    j.at("seed").get_to(s.seed);
    j.at("acquisition").get_to(s.acquisition);
    j.at("engine").get_to(s.engine);
    j.at("scenario_hash").get_to(s.scenario_hash);
    j.at("modes").get_to(s.modes);
    j.at("mean_total_skr_bps").get_to(s.mean_total_skr);
    j.at("mean_total_skr_raw_bps").get_to(s.mean_total_skr_raw);
}

namespace {

void mode_targets_to_json(nlohmann::json& j, const ModeTargets& t) {
    j = nlohmann::json::object();
    if (t.rate_z_mu1) j["rate_z_mu1"] = *t.rate_z_mu1;
    if (t.rate_z_mu2) j["rate_z_mu2"] = *t.rate_z_mu2;
    if (t.rate_z) j["rate_z"] = *t.rate_z;
    if (t.qber_z) j["qber_z"] = *t.qber_z;
    if (t.qber_x) j["qber_x"] = *t.qber_x;
}

void mode_targets_from_json(const nlohmann::json& j, ModeTargets& t) {
    detail::reject_unknown(j, "ModeTargets",
                           {"rate_z_mu1", "rate_z_mu2", "rate_z", "qber_z", "qber_x"});
    auto opt = [&](const char* key, std::optional<double>& out) {
        if (auto it = j.find(key); it != j.end()) out = it->get<double>();
    };
    opt("rate_z_mu1", t.rate_z_mu1);
    opt("rate_z_mu2", t.rate_z_mu2);
    opt("rate_z", t.rate_z);
    opt("qber_z", t.qber_z);
    opt("qber_x", t.qber_x);
}

}  // namespace

void to_json(nlohmann::json& j, const CalibrationTargets& t) {
    j = nlohmann::json::object();
    if (t.protocol) j["protocol"] = *t.protocol;
    j["modes"] = nlohmann::json::array();
    for (const auto& m : t.modes) {
        nlohmann::json mj;
        mode_targets_to_json(mj, m);
        j["modes"].push_back(mj);
    }
    if (t.loss_db) j["loss_db"] = *t.loss_db;
    j["tolerance"] = t.tolerance;
}

void from_json(const nlohmann::json& j, CalibrationTargets& t) {
    detail::reject_unknown(j, "CalibrationTargets", {"protocol", "modes", "loss_db", "tolerance"});
    if (auto it = j.find("protocol"); it != j.end()) {
        ProtocolConfig cfg = windowed_protocol();
        it->get_to(cfg);
        t.protocol = cfg;
    }
    const auto& modes = j.at("modes");
    if (!modes.is_array() || modes.size() != 2)
        throw std::invalid_argument("CalibrationTargets: modes must be a 2-element array");
    mode_targets_from_json(modes[0], t.modes[0]);
    mode_targets_from_json(modes[1], t.modes[1]);
    if (auto it = j.find("loss_db"); it != j.end()) t.loss_db = it->get<double>();
    detail::read_optional(j, "tolerance", t.tolerance);
}

void to_json(nlohmann::json& j, const CalibrationReport& r) {
    j = nlohmann::json::object();
    j["converged"] = r.converged;
    j["iterations"] = r.iterations;
    j["parameters"] = nlohmann::json::object();
    for (const auto& [name, value] : r.parameters) j["parameters"][name] = value;
    j["residuals"] = nlohmann::json::array();
    for (const auto& res : r.residuals) {
        j["residuals"].push_back({{"name", res.name},
                                  {"target", res.target},
                                  {"model", res.model},
                                  {"relative", res.relative}});
    }
}

void to_json(nlohmann::json& j, const SweepRow& r) {
    j = nlohmann::json{{"loss_db", r.loss_db},
                       {"skr_bps", r.skr},
                       {"skr_raw_bps", r.skr_raw},
                       {"total_bps", r.total}};
}

}  // namespace qkdsim
