#include "qkdsim/link.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "json_fields.hpp"

namespace qkdsim {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double basis_prob(double pz, Basis b) { return b == Basis::Z ? pz : 1.0 - pz; }

constexpr std::array<Basis, 2> kBases{Basis::Z, Basis::X};
constexpr std::array<Intensity, 2> kIntensities{Intensity::Signal, Intensity::Decoy};

std::size_t bi(Basis b) { return static_cast<std::size_t>(b); }
std::size_t ki(Intensity k) { return static_cast<std::size_t>(k); }

/// Photon-number sampler by CDF inversion; one uniform per pulse.
class PoissonTable {
public:
    explicit PoissonTable(double mu) {
        double cdf = 0.0;
        for (unsigned n = 0; n < 64; ++n) {
            cdf += poisson_pn(mu, n);
            cdf_.push_back(cdf);
            if (cdf >= 1.0 - 1e-17) break;
        }
        cdf_.back() = 1.0;
    }
    std::uint32_t sample(double u) const {
        std::uint32_t n = 0;
        while (u >= cdf_[n]) ++n;
        return n;
    }

private:
    std::vector<double> cdf_;
};

/// Where a photon launched into one mode ends up: [slot][basis] or lost.
struct PhotonRouter {
    // Cumulative over (slot 0 Z, slot 0 X, slot 1 Z, slot 1 X); beyond the
    // last entry the photon is lost.
    std::array<std::array<double, 4>, 2> cumulative{};

    PhotonRouter(const ChannelState& channel, const std::array<ReceiverSpec, 2>& rx,
                 const ProtocolConfig& cfg) {
        for (std::size_t launch = 0; launch < 2; ++launch) {
            const auto tp = transmission_probs(channel, kSignalPorts[launch]);
            double acc = 0.0;
            for (std::size_t recv = 0; recv < 2; ++recv)
                for (Basis d : kBases) {
                    acc += tp.port[kSignalPorts[recv]] * basis_prob(cfg.pz_bob, d) *
                           rx[recv].detector(d).efficiency;
                    cumulative[launch][recv * 2 + bi(d)] = acc;
                }
        }
    }

    /// Returns 4 for a lost photon, else recv_slot * 2 + basis.
    std::size_t route(std::size_t launch_slot, double u) const {
        const auto& c = cumulative[launch_slot];
        for (std::size_t i = 0; i < 4; ++i)
            if (u < c[i]) return i;
        return 4;
    }
};

/// Outcome label of a photon of `symbol` reaching the detector of basis
/// `det` on its own port.
std::uint8_t own_label(const StateSymbol& symbol, Basis det, const ReceiverSpec& rx,
                       RandomStream& rng) {
    const double u = rng.uniform();
    if (det == Basis::Z) {
        if (symbol.basis != Basis::Z) return u < 0.5 ? 0 : 1;
        const std::uint8_t bit = *symbol.z_value;
        return u < rx.extinction_error ? static_cast<std::uint8_t>(1 - bit) : bit;
    }
    if (symbol.basis != Basis::X) return u < 0.5 ? 0 : 1;
    return u < 0.5 * (1.0 + rx.interferometer_visibility) ? 0 : 1;
}

template <class Sink>
void emit_photons(std::size_t launch_slot, const StateSymbol& symbol, std::uint32_t photons,
                  std::uint64_t index, double slot_start, double period, const PhotonRouter& router,
                  const std::array<ReceiverSpec, 2>& rx, RandomStream& rng, Sink&& sink) {
    for (std::uint32_t p = 0; p < photons; ++p) {
        const std::size_t dest = router.route(launch_slot, rng.uniform());
        if (dest >= 4) continue;
        const std::size_t recv = dest / 2;
        const Basis det = kBases[dest % 2];
        const std::uint8_t label =
            recv == launch_slot ? own_label(symbol, det, rx[recv], rng)
                                : static_cast<std::uint8_t>(rng.uniform() < 0.5 ? 0 : 1);
        sink(recv, det,
             RawClick{slot_start + 0.5 * period * label, index,
                      static_cast<std::uint8_t>(kSignalPorts[recv]), det, label, false});
    }
}

bool is_error(const StateSymbol& symbol, Basis det, std::uint8_t outcome) {
    return det == Basis::Z ? outcome != *symbol.z_value : outcome != 0;
}

}  // namespace

void validate_receiver(const ReceiverSpec& r) {
    if (!(r.interferometer_visibility >= 0.0 && r.interferometer_visibility <= 1.0))
        throw std::invalid_argument("receiver.interferometer_visibility must lie in [0, 1]");
    if (!(r.extinction_error >= 0.0 && r.extinction_error <= 0.5))
        throw std::invalid_argument("receiver.extinction_error must lie in [0, 0.5]");
    for (Basis b : kBases) {
        const auto& d = r.detector(b);
        if (!(d.efficiency >= 0.0 && d.efficiency <= 1.0))
            throw std::invalid_argument("detector.efficiency must lie in [0, 1]");
        if (!(d.dark_rate >= 0.0)) throw std::invalid_argument("detector.dark_rate must be >= 0");
        if (!(d.dead_time >= 0.0)) throw std::invalid_argument("detector.dead_time must be >= 0");
        if (!(d.timestamp_resolution > 0.0))
            throw std::invalid_argument("detector.timestamp_resolution must be > 0");
    }
}

// --- symbols ---------------------------------------------------------------

SymbolSource::SymbolSource(const ProtocolConfig& cfg, RandomStream rng,
                           std::optional<Intensity> fixed_intensity, std::size_t pattern_offset)
    : cfg_(cfg), rng_(std::move(rng)), fixed_(fixed_intensity) {
    if (cfg_.repeating_pattern) {
        pattern_.reserve(cfg_.sequence_length);
        for (std::uint64_t i = 0; i < cfg_.sequence_length; ++i) pattern_.push_back(draw());
        cursor_ = pattern_offset % pattern_.size();
    }
}

StateSymbol SymbolSource::draw() {
    StateSymbol s;
    if (rng_.uniform() < cfg_.pz_alice) {
        s.basis = Basis::Z;
        s.z_value = rng_.uniform() < 0.5 ? 0 : 1;
    } else {
        s.basis = Basis::X;
        s.z_value.reset();
    }
    s.intensity = rng_.uniform() < cfg_.p_mu1 ? Intensity::Signal : Intensity::Decoy;
    if (fixed_) s.intensity = *fixed_;
    return s;
}

StateSymbol SymbolSource::next() {
    if (pattern_.empty()) return draw();
    const StateSymbol s = pattern_[cursor_];
    cursor_ = (cursor_ + 1) % pattern_.size();
    return s;
}

std::vector<StateSymbol> generate_symbols(const ProtocolConfig& cfg, std::size_t count,
                                          RandomStream& rng) {
    SymbolSource source(cfg, rng.derive("symbols"));
    std::vector<StateSymbol> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(source.next());
    return out;
}

// --- single pulse ----------------------------------------------------------

std::vector<RawClick> simulate_pulse(const PulseRecord& pulse, const ChannelState& channel,
                                     const std::array<ReceiverSpec, 2>& receivers,
                                     const ProtocolConfig& cfg, RandomStream& rng) {
    const auto slot_it = std::find(kSignalPorts.begin(), kSignalPorts.end(), pulse.mode);
    if (slot_it == kSignalPorts.end())
        throw std::invalid_argument("simulate_pulse: pulse.mode must be a signal port (1 or 2)");
    const std::size_t slot = static_cast<std::size_t>(slot_it - kSignalPorts.begin());

    const PhotonRouter router(channel, receivers, cfg);
    const double period = 1.0 / cfg.qubit_rate;
    const double start = static_cast<double>(pulse.index) * period;
    const std::uint32_t photons =
        static_cast<std::uint32_t>(rng.poisson(pulse.mean_photon_number));

    std::vector<RawClick> out;
    emit_photons(slot, pulse.symbol, photons, pulse.index, start, period, router, receivers, rng,
                 [&](std::size_t, Basis, const RawClick& c) { out.push_back(c); });
    std::sort(out.begin(), out.end(),
              [](const RawClick& a, const RawClick& b) { return a.time < b.time; });
    return out;
}

// --- detectors -------------------------------------------------------------

DetectorFrontEnd::DetectorFrontEnd(const DetectorSpec& spec, std::uint8_t port, Basis basis,
                                   double slot_period, RandomStream rng, double start_time)
    : spec_(spec), port_(port), basis_(basis), slot_period_(slot_period), rng_(std::move(rng)) {
    next_dark_ = spec_.dark_rate > 0.0 ? start_time + rng_.exponential(spec_.dark_rate) : kInf;
}

void DetectorFrontEnd::add_darks_before(double end, std::uint64_t slot_index, double slot_start,
                                        std::vector<RawClick>& slot_events) {
    while (next_dark_ < end) {
        const std::uint8_t label = next_dark_ - slot_start < 0.5 * slot_period_ ? 0 : 1;
        slot_events.push_back(RawClick{next_dark_, slot_index, port_, basis_, label, true});
        next_dark_ += rng_.exponential(spec_.dark_rate);
    }
}

std::optional<DetectionRecord> DetectorFrontEnd::accept(std::vector<RawClick>& slot_events) {
    if (slot_events.empty()) return std::nullopt;
    if (slot_events.size() > 1) {
        std::sort(slot_events.begin(), slot_events.end(),
                  [](const RawClick& a, const RawClick& b) { return a.time < b.time; });
    }
    const double res = spec_.timestamp_resolution;
    for (const auto& e : slot_events) {
        const double tq = std::round(e.time / res) * res;
        if (has_accept_ && tq - last_accept_ < spec_.dead_time - 0.5 * res) continue;
        has_accept_ = true;
        last_accept_ = tq;
        return DetectionRecord{e.pulse_index, e.receive_port, e.basis, e.outcome, tq, e.is_dark};
    }
    return std::nullopt;
}

std::vector<DetectionRecord> detector_process(const std::vector<RawClick>& events,
                                              const DetectorSpec& spec, double duration,
                                              RandomStream& rng, double slot_period) {
    const std::uint8_t port = events.empty() ? 0 : events.front().receive_port;
    const Basis basis = events.empty() ? Basis::Z : events.front().basis;
    DetectorFrontEnd fe(spec, port, basis, slot_period, rng.derive("dark"));

    std::vector<DetectionRecord> out;
    std::vector<RawClick> slot;
    std::size_t i = 0;
    while (true) {
        const double next_event = i < events.size() ? events[i].time : kInf;
        const double next_dark = fe.next_dark_time() < duration ? fe.next_dark_time() : kInf;
        const double t = std::min(next_event, next_dark);
        if (t == kInf) break;
        auto index = static_cast<std::uint64_t>(std::floor(t / slot_period));
        // floor can land one slot early when t sits on a boundary
        if (t >= static_cast<double>(index + 1) * slot_period) ++index;
        const double slot_start = static_cast<double>(index) * slot_period;
        const double slot_end = slot_start + slot_period;
        slot.clear();
        while (i < events.size() && events[i].time < slot_end) slot.push_back(events[i++]);
        fe.add_darks_before(std::min(slot_end, duration), index, slot_start, slot);
        if (auto rec = fe.accept(slot)) out.push_back(*rec);
    }
    return out;
}

// --- analytic model --------------------------------------------------------

IntensityMix interleaved_mix(const ProtocolConfig& cfg) { return IntensityMix{cfg.p_mu1}; }

IntensityMix fixed_mix(Intensity k) {
    return IntensityMix{k == Intensity::Signal ? 1.0 : 0.0};
}

ModeClickModel click_model(const LinkSetup& setup, const ChannelState& channel,
                           std::size_t mode_slot, const IntensityMix& mix) {
    const auto& cfg = setup.cfg;
    const auto& rx = setup.receivers[mode_slot];
    const std::size_t own = kSignalPorts[mode_slot];
    const std::size_t other_slot = 1 - mode_slot;
    const std::size_t other = kSignalPorts[other_slot];
    const double period = 1.0 / cfg.qubit_rate;
    const double v = rx.interferometer_visibility;
    const double ext = rx.extinction_error;

    ModeClickModel model;
    for (Basis det : kBases) {
        const double split = basis_prob(cfg.pz_bob, det) * rx.detector(det).efficiency;
        const double gain_own =
            setup.launched[mode_slot] ? channel.coupling[own][own] * split : 0.0;
        const double gain_leak =
            setup.launched[other_slot] ? channel.coupling[other][own] * split : 0.0;
        const double dark = rx.detector(det).dark_rate * period;

        double total_click = 0.0;
        std::array<double, 2> present{};
        for (Intensity k : kIntensities) {
            const double wk = mix.weight(k);
            const double own_mean = cfg.mu(k) * gain_own;
            for (Basis alice : kBases) {
                // Label means of own photons for each Z bit (or the single X state).
                std::array<std::array<double, 2>, 2> own_split{};
                int variants = 1;
                if (det == Basis::Z && alice == Basis::Z) {
                    own_split[0] = {own_mean * (1.0 - ext), own_mean * ext};
                    own_split[1] = {own_mean * ext, own_mean * (1.0 - ext)};
                    variants = 2;
                } else if (det == Basis::X && alice == Basis::X) {
                    own_split[0] = {own_mean * 0.5 * (1.0 + v), own_mean * 0.5 * (1.0 - v)};
                } else {
                    own_split[0] = {0.5 * own_mean, 0.5 * own_mean};
                }

                ClickOdds odds;
                ClickOdds late;
                double click = 0.0;
                std::array<double, 2> label{};
                for (Intensity kk : kIntensities) {
                    const double wo = mix.weight(kk);
                    if (wo == 0.0) continue;
                    const double noise = 0.5 * (cfg.mu(kk) * gain_leak + dark);
                    for (int var = 0; var < variants; ++var) {
                        const double l0 = own_split[var][0] + noise;
                        const double l1 = own_split[var][1] + noise;
                        const double p0 = -std::expm1(-l0);
                        const double p1 = std::exp(-l0) * -std::expm1(-l1);
                        const double w = wo / variants;
                        click += w * (p0 + p1);
                        label[0] += w * p0;
                        label[1] += w * -std::expm1(-l1);
                        // Correct label is 0 except for the late Z bit.
                        const bool late_bit = det == Basis::Z && var == 1;
                        odds.p_correct += w * (late_bit ? p1 : p0);
                        odds.p_error += w * (late_bit ? p0 : p1);
                        const double any_late = -std::expm1(-l1);
                        (late_bit ? late.p_correct : late.p_error) += w * any_late;
                    }
                }
                if (alice == det) {
                    model.sifted[bi(det)][ki(k)] = odds;
                    model.late_present[bi(det)][ki(k)] = late;
                }
                const double wa = basis_prob(cfg.pz_alice, alice) * wk;
                total_click += wa * click;
                present[0] += wa * label[0];
                present[1] += wa * label[1];
            }
        }
        model.detector_click[bi(det)] = total_click;
        model.label_present[bi(det)] = present;
    }
    return model;
}

double deadtime_thinning(double click_rate, double dead_time) {
    return 1.0 / (1.0 + click_rate * dead_time);
}

DetectorLiveness detector_liveness(double p_click, const std::array<double, 2>& label_present,
                                   double slot_period, double dead_time, double resolution) {
    if (!(p_click > 0.0)) return {};
    // A label-m instant of slot j is dead iff an accepted click lies less
    // than `limit` before it. Clicks are at least `limit` apart, so at most
    // one does, and P(dead) = sum over labels l of r_l * D(l, m), with r_l
    // the accepted label-l clicks per slot and D(l, m) the number of later
    // slots whose label-m instant falls inside a label-l dead window.
    const std::array<double, 2> offset{0.0, 0.5 * slot_period};
    const double limit = dead_time - 0.5 * resolution;
    auto dead_slots = [&](int l, int m) {
        const double x = (limit - offset[m] + offset[l]) / slot_period;
        return std::max(0.0, std::ceil(x - 1e-12) - 1.0);
    };
    const double q0 = std::clamp(label_present[0], 0.0, 1.0);
    const double q1 = std::clamp(label_present[1], 0.0, 1.0);
    // Label 1 present without label 0, minus label 1 present at all.
    const double c = p_click - q0 - q1;
    // r0 = q0 L0, r1 = (p - q0) L0 + q1 (L1 - L0): a label-1 event is taken
    // when the slot opens live, or when only its half of the slot is live.
    const double a00 = 1.0 + q0 * dead_slots(0, 0) + c * dead_slots(1, 0);
    const double a01 = q1 * dead_slots(1, 0);
    const double a10 = q0 * dead_slots(0, 1) + c * dead_slots(1, 1);
    const double a11 = 1.0 + q1 * dead_slots(1, 1);
    const double det = a00 * a11 - a01 * a10;
    DetectorLiveness live;
    live.slot_start = std::clamp((a11 - a01) / det, 0.0, 1.0);
    live.mid_slot = std::clamp((a00 - a10) / det, live.slot_start, 1.0);
    return live;
}

double deadtime_thinning(double p_click, const std::array<double, 2>& label_present,
                         double slot_period, double dead_time, double resolution) {
    if (!(p_click > 0.0)) return 1.0;
    const auto live = detector_liveness(p_click, label_present, slot_period, dead_time, resolution);
    const double accepted =
        live.slot_start * p_click + (live.mid_slot - live.slot_start) * std::clamp(label_present[1], 0.0, 1.0);
    return accepted / p_click;
}

CellProbabilities cell_probabilities(const LinkSetup& setup, const ChannelState& channel,
                                     std::size_t mode_slot, const IntensityMix& mix,
                                     const IntensityMix& deadtime_mix) {
    const auto model = click_model(setup, channel, mode_slot, mix);
    const auto load = deadtime_mix.p_signal == mix.p_signal
                          ? model
                          : click_model(setup, channel, mode_slot, deadtime_mix);
    const auto& rx = setup.receivers[mode_slot];

    CellProbabilities out;
    // No transmitter on this mode, so nothing to sift against.
    if (!setup.launched[mode_slot]) return out;
    for (Basis b : kBases) {
        const auto& det = rx.detector(b);
        const auto live =
            detector_liveness(load.detector_click[bi(b)], load.label_present[bi(b)],
                              1.0 / setup.cfg.qubit_rate, det.dead_time, det.timestamp_resolution);
        // Live at the slot start: the first event is taken. Live only from
        // mid-slot: a late event is taken whether or not an early one came.
        const double half_live = live.mid_slot - live.slot_start;
        for (Intensity k : kIntensities) {
            const double w = basis_prob(setup.cfg.pz_alice, b) * mix.weight(k);
            const auto& s = model.sifted[bi(b)][ki(k)];
            const auto& l = model.late_present[bi(b)][ki(k)];
            out.per_pulse[bi(b)][ki(k)] =
                ClickOdds{w * (live.slot_start * s.p_correct + half_live * l.p_correct),
                          w * (live.slot_start * s.p_error + half_live * l.p_error)};
        }
    }
    return out;
}

TallyBlock expected_tally(const CellProbabilities& probs, double pulses, double duration,
                          int mode, const ProtocolConfig& cfg) {
    TallyBlock block;
    block.duration = duration;
    block.mode = mode;
    block.cfg = cfg;
    for (Basis b : kBases)
        for (Intensity k : kIntensities) {
            const auto& p = probs.per_pulse[bi(b)][ki(k)];
            block.at(b, k) = TallyCell{pulses * p.p_click(), pulses * p.p_error};
        }
    return block;
}

TallyBlock sample_tally(const CellProbabilities& probs, std::uint64_t pulses, double duration,
                        int mode, const ProtocolConfig& cfg, RandomStream& rng) {
    TallyBlock block;
    block.duration = duration;
    block.mode = mode;
    block.cfg = cfg;
    for (Basis b : kBases)
        for (Intensity k : kIntensities) {
            const auto& p = probs.per_pulse[bi(b)][ki(k)];
            const auto n = rng.binomial(pulses, p.p_click());
            const double err = p.p_click() > 0.0 ? p.p_error / p.p_click() : 0.0;
            const auto m = rng.binomial(n, err);
            block.at(b, k) = TallyCell{static_cast<double>(n), static_cast<double>(m)};
        }
    return block;
}

// --- per-pulse engine ------------------------------------------------------

McResult run_mc(const LinkSetup& setup, const ChannelState& channel, std::uint64_t pulse_count,
                RandomStream& rng, const McOptions& options) {
    if (pulse_count > options.max_pulses) {
        throw ResourceLimitError("run_mc: " + std::to_string(pulse_count) +
                                 " pulses exceeds the engine maximum of " +
                                 std::to_string(options.max_pulses));
    }
    const auto& cfg = setup.cfg;
    validate_config(cfg);
    for (const auto& r : setup.receivers) validate_receiver(r);

    const double period = 1.0 / cfg.qubit_rate;
    const double t0 = options.start_time;

    std::array<SymbolSource, 2> sources{
        SymbolSource(cfg, rng.derive("alice-mode1"), options.fixed_intensity, 0),
        SymbolSource(cfg, rng.derive("alice-mode2"), options.fixed_intensity,
                     cfg.sequence_length / 2)};
    RandomStream photon_rng = rng.derive("photons");
    RandomStream drift_rng = rng.derive("drift");
    const std::array<PoissonTable, 2> poisson{PoissonTable(cfg.mu1), PoissonTable(cfg.mu2)};

    std::array<std::array<DetectorFrontEnd, 2>, 2> frontends{{
        {DetectorFrontEnd(setup.receivers[0].z_detector, kSignalPorts[0], Basis::Z, period,
                          rng.derive("dark-mode1-z"), t0),
         DetectorFrontEnd(setup.receivers[0].x_detector, kSignalPorts[0], Basis::X, period,
                          rng.derive("dark-mode1-x"), t0)},
        {DetectorFrontEnd(setup.receivers[1].z_detector, kSignalPorts[1], Basis::Z, period,
                          rng.derive("dark-mode2-z"), t0),
         DetectorFrontEnd(setup.receivers[1].x_detector, kSignalPorts[1], Basis::X, period,
                          rng.derive("dark-mode2-x"), t0)},
    }};

    ChannelState state = options.trajectory ? options.trajectory->state_at(t0) : channel;
    PhotonRouter router(state, setup.receivers, cfg);
    double next_drift = t0 + options.drift_substep;

    McResult result;
    result.pulse_count = pulse_count;
    result.duration = static_cast<double>(pulse_count) * period;
    for (std::size_t s = 0; s < 2; ++s) {
        auto& tally = result.modes[s].tally;
        tally.mode = mode_number(s);
        tally.cfg = cfg;
        tally.duration = result.duration;
        if (options.keep_records) result.modes[s].pulses.reserve(pulse_count);
    }

    std::array<std::array<std::vector<RawClick>, 2>, 2> buffers;
    std::array<StateSymbol, 2> symbols;
    std::array<std::uint32_t, 2> photons{};

    for (std::uint64_t i = 0; i < pulse_count; ++i) {
        const double slot_start = t0 + static_cast<double>(i) * period;
        if (slot_start >= next_drift) {
            while (slot_start >= next_drift) {
                if (!options.trajectory) state = step_drift(state, options.drift_substep, drift_rng);
                next_drift += options.drift_substep;
            }
            if (options.trajectory) state = options.trajectory->state_at(slot_start);
            router = PhotonRouter(state, setup.receivers, cfg);
        }

        for (std::size_t s = 0; s < 2; ++s) {
            symbols[s] = sources[s].next();
            photons[s] = setup.launched[s]
                             ? poisson[ki(symbols[s].intensity)].sample(photon_rng.uniform())
                             : 0;
            if (options.keep_records) {
                result.modes[s].pulses.push_back(
                    PulseRecord{i, static_cast<std::uint8_t>(mode_number(s)), symbols[s],
                                setup.launched[s] ? cfg.mu(symbols[s].intensity) : 0.0,
                                photons[s]});
            }
        }
        for (std::size_t s = 0; s < 2; ++s) {
            if (photons[s] == 0) continue;
            emit_photons(s, symbols[s], photons[s], i, slot_start, period, router,
                         setup.receivers, photon_rng,
                         [&](std::size_t recv, Basis det, const RawClick& c) {
                             buffers[recv][bi(det)].push_back(c);
                         });
        }

        for (std::size_t r = 0; r < 2; ++r) {
            for (Basis det : kBases) {
                auto& buf = buffers[r][bi(det)];
                auto& fe = frontends[r][bi(det)];
                if (fe.next_dark_time() < slot_start + period)
                    fe.add_darks_before(slot_start + period, i, slot_start, buf);
                if (buf.empty()) continue;
                const auto rec = fe.accept(buf);
                buf.clear();
                if (!rec) continue;

                auto& mode = result.modes[r];
                ++mode.accepted_clicks[bi(det)];
                if (options.keep_records) mode.detections.push_back(*rec);
                const StateSymbol& sym = symbols[r];
                if (!setup.launched[r] || sym.basis != det) continue;
                const bool err = is_error(sym, det, rec->outcome);
                auto& cell = mode.tally.at(det, sym.intensity);
                cell.n += 1.0;
                auto& truth = mode.truth.cells[bi(det)][std::min<std::uint32_t>(photons[r], 2)];
                truth.n += 1.0;
                if (err) {
                    cell.m += 1.0;
                    truth.m += 1.0;
                }
            }
        }
    }
    return result;
}

// --- tally engine ----------------------------------------------------------

DriftTrajectory::DriftTrajectory(const ChannelSpec& spec, double duration, double substep,
                                 RandomStream& rng)
    : spec_(spec), duration_(duration), substep_(substep) {
    if (!(substep > 0.0)) throw std::invalid_argument("DriftTrajectory: substep must be > 0");
    if (!(duration >= 0.0)) throw std::invalid_argument("DriftTrajectory: duration must be >= 0");
    const auto steps = static_cast<std::size_t>(std::ceil(duration / substep));
    ChannelState st = init_channel(spec, rng);
    angles_.reserve(steps + 1);
    angles_.push_back(st.angles);
    for (std::size_t k = 0; k < steps; ++k) {
        st = step_drift(st, substep, rng);
        angles_.push_back(st.angles);
    }
}

ChannelState DriftTrajectory::state_at(double t) const {
    const double k = std::floor(std::max(0.0, t) / substep_);
    const auto idx = std::min(static_cast<std::size_t>(k), angles_.size() - 1);
    return channel_at(spec_, angles_[idx], t);
}

std::array<std::vector<TallyBlock>, 2> run_tally(const LinkSetup& setup,
                                                 const DriftTrajectory& trajectory,
                                                 double duration, double window,
                                                 RandomStream& rng) {
    if (!(window > 0.0 && duration > 0.0))
        throw std::invalid_argument("run_tally: duration and window must be positive");
    const double ratio = duration / window;
    const auto windows = static_cast<std::size_t>(std::llround(ratio));
    if (std::abs(ratio - static_cast<double>(windows)) > 1e-9 * ratio)
        throw std::invalid_argument("run_tally: window must divide duration");

    const auto& cfg = setup.cfg;
    const auto pulses = static_cast<std::uint64_t>(std::llround(cfg.qubit_rate * window));
    const IntensityMix mix = interleaved_mix(cfg);

    std::array<std::vector<TallyBlock>, 2> out;
    std::array<RandomStream, 2> streams{rng.derive("tally-mode1"), rng.derive("tally-mode2")};
    for (std::size_t w = 0; w < windows; ++w) {
        const ChannelState state = trajectory.state_at((static_cast<double>(w) + 0.5) * window);
        for (std::size_t s = 0; s < 2; ++s) {
            const auto probs = cell_probabilities(setup, state, s, mix, mix);
            out[s].push_back(sample_tally(probs, pulses, window, mode_number(s), cfg, streams[s]));
        }
    }
    return out;
}

// --- JSON ------------------------------------------------------------------

void to_json(nlohmann::json& j, const DetectorSpec& d) {
    j = nlohmann::json{{"efficiency", d.efficiency},
                       {"dark_rate", d.dark_rate},
                       {"dead_time", d.dead_time},
                       {"timestamp_resolution", d.timestamp_resolution}};
}

void from_json(const nlohmann::json& j, DetectorSpec& d) {
    detail::reject_unknown(j, "DetectorSpec",
                           {"efficiency", "dark_rate", "dead_time", "timestamp_resolution"});
    detail::read_optional(j, "efficiency", d.efficiency);
    detail::read_optional(j, "dark_rate", d.dark_rate);
    detail::read_optional(j, "dead_time", d.dead_time);
    detail::read_optional(j, "timestamp_resolution", d.timestamp_resolution);
}

void to_json(nlohmann::json& j, const ReceiverSpec& r) {
    j = nlohmann::json{{"interferometer_visibility", r.interferometer_visibility},
                       {"extinction_error", r.extinction_error},
                       {"z_detector", r.z_detector},
                       {"x_detector", r.x_detector}};
}

void from_json(const nlohmann::json& j, ReceiverSpec& r) {
    detail::reject_unknown(
        j, "ReceiverSpec",
        {"interferometer_visibility", "extinction_error", "z_detector", "x_detector"});
    detail::read_optional(j, "interferometer_visibility", r.interferometer_visibility);
    detail::read_optional(j, "extinction_error", r.extinction_error);
    detail::read_optional(j, "z_detector", r.z_detector);
    detail::read_optional(j, "x_detector", r.x_detector);
}

}  // namespace qkdsim
