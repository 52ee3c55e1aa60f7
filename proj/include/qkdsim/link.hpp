#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "qkdsim/channel.hpp"
#include "qkdsim/protocol.hpp"
#include "qkdsim/random.hpp"
#include "qkdsim/tally.hpp"

namespace qkdsim {

class DriftTrajectory;

/// The two multiplexed signal modes, as receive-port indices.
/// Mode 1 travels LP11a, Mode 2 travels LP11b.
inline constexpr std::array<std::size_t, 2> kSignalPorts{kPortLP11a, kPortLP11b};

inline constexpr int mode_number(std::size_t slot) { return static_cast<int>(slot) + 1; }

struct PulseRecord {
    std::uint64_t index = 0;
    std::uint8_t mode = 1;
    StateSymbol symbol;
    double mean_photon_number = 0.0;
    /// Emitted photon number; simulation ground truth only.
    std::uint32_t photon_number = 0;
};

struct DetectorSpec {
    double efficiency = 0.83;
    double dark_rate = 50.0;               // counts/s
    double dead_time = 33e-9;              // s
    double timestamp_resolution = 1e-12;   // s

    bool operator==(const DetectorSpec&) const = default;
};

/// One receiver per mode: basis beam splitter (ratio from ProtocolConfig::pz_bob),
/// time-of-arrival detector for Z, interferometer plus detector for X.
struct ReceiverSpec {
    double interferometer_visibility = 0.957;
    /// Probability that a photon lands in the wrong time bin.
    double extinction_error = 0.0086;
    DetectorSpec z_detector;
    DetectorSpec x_detector;

    const DetectorSpec& detector(Basis b) const { return b == Basis::Z ? z_detector : x_detector; }
    bool operator==(const ReceiverSpec&) const = default;
};

/// Outcome labels: Z detector 0 = early, 1 = late; X detector 0 = the port
/// where the X state interferes constructively, 1 = the other port.
struct DetectionRecord {
    std::uint64_t pulse_index = 0;
    std::uint8_t receive_port = 0;
    Basis basis = Basis::Z;
    std::uint8_t outcome = 0;
    double timestamp = 0.0;  // s, quantized
    /// Ground truth for diagnostics; never consulted by key-rate code.
    bool is_dark = false;
};

/// A detector input event before dead time and quantization.
struct RawClick {
    double time = 0.0;
    std::uint64_t pulse_index = 0;
    std::uint8_t receive_port = 0;
    Basis basis = Basis::Z;
    std::uint8_t outcome = 0;
    bool is_dark = false;
};

class ResourceLimitError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void validate_receiver(const ReceiverSpec& r);

/// Draws symbols i.i.d., or cycles through a pre-drawn pattern when
/// cfg.repeating_pattern is set.
class SymbolSource {
public:
    SymbolSource(const ProtocolConfig& cfg, RandomStream rng,
                 std::optional<Intensity> fixed_intensity = std::nullopt,
                 std::size_t pattern_offset = 0);
    StateSymbol next();

private:
    StateSymbol draw();

    ProtocolConfig cfg_;
    RandomStream rng_;
    std::optional<Intensity> fixed_;
    std::vector<StateSymbol> pattern_;
    std::size_t cursor_ = 0;
};

std::vector<StateSymbol> generate_symbols(const ProtocolConfig& cfg, std::size_t count,
                                          RandomStream& rng);

/// Photons of one pulse as detector input events at every monitored port.
/// Photons reaching a port other than the launched one carry a random
/// outcome. Slot timing: label 0 at the slot start, label 1 half a slot later.
std::vector<RawClick> simulate_pulse(const PulseRecord& pulse, const ChannelState& channel,
                                     const std::array<ReceiverSpec, 2>& receivers,
                                     const ProtocolConfig& cfg, RandomStream& rng);

/// Single-photon-detector front end: merges Poisson dark counts over
/// [0, duration), keeps at most one click per pulse slot (the earliest),
/// applies non-paralyzable dead time and quantizes timestamps.
/// `events` must be time-sorted and belong to one detector.
std::vector<DetectionRecord> detector_process(const std::vector<RawClick>& events,
                                              const DetectorSpec& spec, double duration,
                                              RandomStream& rng, double slot_period = 0.8e-9);

/// Streaming detector state used by detector_process and the per-pulse engine.
class DetectorFrontEnd {
public:
    DetectorFrontEnd(const DetectorSpec& spec, std::uint8_t port, Basis basis, double slot_period,
                     RandomStream rng, double start_time = 0.0);

    /// Appends dark counts with time < end to `slot_events`.
    void add_darks_before(double end, std::uint64_t slot_index, double slot_start,
                          std::vector<RawClick>& slot_events);
    /// Picks the earliest acceptable event of one slot, if any.
    std::optional<DetectionRecord> accept(std::vector<RawClick>& slot_events);

    double next_dark_time() const { return next_dark_; }

private:
    DetectorSpec spec_;
    std::uint8_t port_;
    Basis basis_;
    double slot_period_;
    RandomStream rng_;
    double next_dark_;
    double last_accept_ = -1.0;
    bool has_accept_ = false;
};

// ---------------------------------------------------------------------------
// Analytic per-pulse detection model shared by both engines.

/// Probability that transmitted pulses carry the signal intensity.
struct IntensityMix {
    double p_signal = 1.0;
    double weight(Intensity k) const { return k == Intensity::Signal ? p_signal : 1.0 - p_signal; }
};

IntensityMix interleaved_mix(const ProtocolConfig& cfg);
IntensityMix fixed_mix(Intensity k);

struct ClickOdds {
    double p_correct = 0.0;
    double p_error = 0.0;
    double p_click() const { return p_correct + p_error; }
};

/// Per-slot click statistics for one mode, before dead time.
struct ModeClickModel {
    /// Given Alice's (basis, intensity) and Bob's detector of the same basis.
    std::array<std::array<ClickOdds, 2>, 2> sifted{};  // [basis][intensity]
    /// Per detector [Z, X]: click probability per slot averaged over all
    /// transmitted states of the given mix.
    std::array<double, 2> detector_click{};
    /// Per detector, probability that a label-0 / label-1 event is present.
    std::array<std::array<double, 2>, 2> label_present{};
    /// Like `sifted`, but counting a present label-1 event whether or not a
    /// label-0 event precedes it (what a detector recovering mid-slot sees).
    std::array<std::array<ClickOdds, 2>, 2> late_present{};
};

struct LinkSetup {
    ProtocolConfig cfg;
    std::array<ReceiverSpec, 2> receivers{};
    std::array<bool, 2> launched{true, true};
};

ModeClickModel click_model(const LinkSetup& setup, const ChannelState& channel,
                           std::size_t mode_slot, const IntensityMix& mix);

/// Continuous-time non-paralyzable survival factor 1 / (1 + rate * dead_time).
double deadtime_thinning(double click_rate, double dead_time);

/// Stationary probability that a detector is live at the label-0 instant
/// (slot start) and at the label-1 instant (half a slot later), matching
/// DetectorFrontEnd with i.i.d. slots. `label_present` are per-slot marginals.
struct DetectorLiveness {
    double slot_start = 1.0;
    double mid_slot = 1.0;
};
DetectorLiveness detector_liveness(double p_click, const std::array<double, 2>& label_present,
                                   double slot_period, double dead_time, double resolution);

/// Accepted over offered clicks under detector_liveness.
double deadtime_thinning(double p_click, const std::array<double, 2>& label_present,
                         double slot_period, double dead_time, double resolution);

/// Sifted-cell probabilities per transmitted pulse, including dead time.
struct CellProbabilities {
    std::array<std::array<ClickOdds, 2>, 2> per_pulse{};  // [basis][intensity]
};

/// `mix` selects what is transmitted; `deadtime_mix` selects the traffic
/// used to evaluate detector saturation.
CellProbabilities cell_probabilities(const LinkSetup& setup, const ChannelState& channel,
                                     std::size_t mode_slot, const IntensityMix& mix,
                                     const IntensityMix& deadtime_mix);

/// Expected tallies of `pulses` transmitted pulses (no sampling noise).
TallyBlock expected_tally(const CellProbabilities& probs, double pulses, double duration,
                          int mode, const ProtocolConfig& cfg);

/// Tallies drawn from the binomial laws of `probs`.
TallyBlock sample_tally(const CellProbabilities& probs, std::uint64_t pulses, double duration,
                        int mode, const ProtocolConfig& cfg, RandomStream& rng);

// ---------------------------------------------------------------------------
// Per-pulse Monte Carlo engine.

/// Sifted counts split by emitted photon number (0, 1, >=2).
struct PhotonResolvedTally {
    std::array<std::array<TallyCell, 3>, 2> cells{};  // [basis][photon class]
    const TallyCell& at(Basis b, unsigned photons) const {
        return cells[static_cast<std::size_t>(b)][photons > 2 ? 2 : photons];
    }
};

struct McOptions {
    std::uint64_t max_pulses = 100'000'000;
    double drift_substep = 0.1;  // s
    double start_time = 0.0;     // s, channel time of the first pulse
    std::optional<Intensity> fixed_intensity;
    bool keep_records = false;
    /// Channel trajectory to follow; when null the engine steps its own drift.
    const DriftTrajectory* trajectory = nullptr;
};

struct McModeResult {
    TallyBlock tally;
    PhotonResolvedTally truth;
    std::vector<PulseRecord> pulses;
    std::vector<DetectionRecord> detections;
    std::array<std::uint64_t, 2> accepted_clicks{};  // [Z, X]
};

struct McResult {
    std::array<McModeResult, 2> modes;
    std::uint64_t pulse_count = 0;
    double duration = 0.0;
};

McResult run_mc(const LinkSetup& setup, const ChannelState& channel, std::uint64_t pulse_count,
                RandomStream& rng, const McOptions& options = {});

// ---------------------------------------------------------------------------
// Tally-level engine.

/// Piecewise-constant drift trajectory on a fixed time grid, so that every
/// consumer of one seed sees the same channel history.
class DriftTrajectory {
public:
    DriftTrajectory(const ChannelSpec& spec, double duration, double substep, RandomStream& rng);

    ChannelState state_at(double t) const;
    double substep() const { return substep_; }
    double duration() const { return duration_; }
    const ChannelSpec& spec() const { return spec_; }

private:
    ChannelSpec spec_;
    double duration_;
    double substep_;
    std::vector<DriftAngles> angles_;
};

/// Per mode, one TallyBlock per window, evaluated at the mid-window channel.
std::array<std::vector<TallyBlock>, 2> run_tally(const LinkSetup& setup,
                                                 const DriftTrajectory& trajectory,
                                                 double duration, double window,
                                                 RandomStream& rng);

void to_json(nlohmann::json& j, const DetectorSpec& d);
void from_json(const nlohmann::json& j, DetectorSpec& d);
void to_json(nlohmann::json& j, const ReceiverSpec& r);
void from_json(const nlohmann::json& j, ReceiverSpec& r);

}  // namespace qkdsim
