#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qkdsim/channel.hpp"
#include "qkdsim/keyrate.hpp"
#include "qkdsim/link.hpp"
#include "qkdsim/protocol.hpp"
#include "qkdsim/tally.hpp"

namespace qkdsim {

enum class Acquisition { Interleaved, Sequential };
enum class Engine { PerPulse, Tally };

/// Traffic used to evaluate detector saturation in sequential passes.
/// OperatingPoint: the interleaved mix, so a frozen channel gives identical
/// statistics in both acquisition modes. PerPass: the pass's own intensity.
enum class DeadtimeLoad { OperatingPoint, PerPass };

std::string to_string(Acquisition a);
std::string to_string(Engine e);
std::string to_string(DeadtimeLoad d);

/// Active-decoy settings with the windowed-analysis block size (1e8).
ProtocolConfig windowed_protocol();

struct Scenario {
    ProtocolConfig protocol = windowed_protocol();
    ChannelSpec channel;
    std::array<ReceiverSpec, 2> receivers{};
    Acquisition acquisition = Acquisition::Interleaved;
    /// Share of the duration spent on the mu1 pass (Sequential only).
    double sequential_split = 0.5;
    double duration = 500.0;  // s
    double window = 50.0;     // s
    /// Unset: Tally above 1 s, PerPulse otherwise.
    std::optional<Engine> engine;
    std::uint64_t seed = 1;
    std::array<bool, 2> launched{true, true};
    /// Mode 2 is measured in Z only by default and borrows Mode 1's X data.
    std::array<bool, 2> measure_x{true, false};
    DeadtimeLoad deadtime_load = DeadtimeLoad::OperatingPoint;
    KeyRateOptions keyrate;
    double drift_substep = 0.1;  // s
    /// Channel evaluation points per window pass (tally engine).
    int window_samples = 8;
    std::uint64_t max_pulses = 100'000'000;

    Engine resolved_engine() const;
    LinkSetup link_setup() const;
    bool operator==(const Scenario&) const = default;
};

/// Throws ConfigError listing every problem.
void validate_scenario(const Scenario& s);

struct WindowRecord {
    double start = 0.0;  // s
    int mode = 1;
    TallyBlock tally;
    KeyRateResult key;
};

struct ModeAggregate {
    int mode = 1;
    double mean_skr = 0.0;  // clamped windows, bits/s
    double std_skr = 0.0;   // sample standard deviation across windows
    double mean_skr_raw = 0.0;
    double std_skr_raw = 0.0;
    double qber_z = 0.0;  // pooled over the run
    std::optional<double> qber_x;
    std::size_t negative_windows = 0;
    std::size_t infeasible_windows = 0;
    std::size_t short_windows = 0;
    TallyBlock totals;

    bool operator==(const ModeAggregate&) const = default;
};

struct RunSummary {
    std::size_t window_count = 0;
    double duration = 0.0;
    double window = 0.0;
    std::uint64_t seed = 0;
    std::string acquisition;
    std::string engine;
    std::string scenario_hash;
    std::array<ModeAggregate, 2> modes{};
    double mean_total_skr = 0.0;
    double mean_total_skr_raw = 0.0;

    bool operator==(const RunSummary&) const = default;
};

struct WindowedResult {
    std::vector<WindowRecord> windows;  // window-major, Mode 1 before Mode 2
    RunSummary summary;
};

WindowedResult run_scenario(const Scenario& s);

/// Per-window tallies only (no key-rate evaluation), per mode.
std::array<std::vector<TallyBlock>, 2> scenario_tallies(const Scenario& s);

/// Aggregates and key rates from per-mode window tallies.
WindowedResult evaluate_windows(const Scenario& s, const std::array<std::vector<TallyBlock>, 2>& tallies);

// ---------------------------------------------------------------------------
// Stationary-channel expectations.

/// Weighted channel states approximating the stationary drift law
/// (Gauss-Hermite product rule). A single node when amplitude is 0.
struct ChannelNode {
    ChannelState state;
    double weight = 1.0;
};
std::vector<ChannelNode> stationary_nodes(const ChannelSpec& spec, int order = 7);

/// Expected per-pulse cell probabilities averaged over the stationary drift.
std::array<CellProbabilities, 2> stationary_probabilities(const Scenario& s, int order = 7);

// ---------------------------------------------------------------------------
// Calibration.

struct ModeTargets {
    std::optional<double> rate_z_mu1;  // sifted Z detections per second
    std::optional<double> rate_z_mu2;
    std::optional<double> rate_z;      // pooled over intensities
    std::optional<double> qber_z;
    std::optional<double> qber_x;

    bool operator==(const ModeTargets&) const = default;
};

struct CalibrationTargets {
    /// Replaces the template's protocol when present.
    std::optional<ProtocolConfig> protocol;
    std::array<ModeTargets, 2> modes{};
    std::optional<double> loss_db;
    double tolerance = 0.10;

    bool operator==(const CalibrationTargets&) const = default;
};

struct CalibrationResidual {
    std::string name;
    double target = 0.0;
    double model = 0.0;
    double relative = 0.0;
};

struct CalibrationReport {
    Scenario scenario;
    std::vector<CalibrationResidual> residuals;
    std::vector<std::pair<std::string, double>> parameters;
    int iterations = 0;
    bool converged = false;
};

class CalibrationError : public std::runtime_error {
public:
    CalibrationError(const std::string& what, CalibrationReport report)
        : std::runtime_error(what), report_(std::move(report)) {}
    const CalibrationReport& report() const { return report_; }

private:
    CalibrationReport report_;
};

/// Least-squares fit of per-mode mux insertion loss, per-mode extinction
/// error and a shared interferometer visibility so the stationary expected
/// rates and QBERs match the targets. Throws CalibrationError when targets
/// are infeasible or any residual exceeds the tolerance.
CalibrationReport calibrate(const CalibrationTargets& targets, const Scenario& tmpl);

/// Targets holding the scenario's own stationary expectations.
CalibrationTargets expected_targets(const Scenario& s);

// ---------------------------------------------------------------------------
// Loss sweep.

struct SweepRow {
    double loss_db = 0.0;
    std::array<double, 2> skr{};  // clamped, bits/s
    std::array<double, 2> skr_raw{};
    double total = 0.0;

    bool operator==(const SweepRow&) const = default;
};

/// Mean windowed SKR over the stationary drift law at each fiber loss.
/// Points run concurrently (see sweep_threads()).
std::vector<SweepRow> loss_sweep(const Scenario& s, const std::vector<double>& losses);

/// Mean windowed SKR of the scenario over the stationary drift law.
SweepRow stationary_skr(const Scenario& s);

/// QKDSIM_THREADS if set and positive, else the hardware concurrency.
unsigned sweep_threads();

/// Runs fn(i) for i in [0, count) on up to `threads` workers.
void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& fn);

// ---------------------------------------------------------------------------
// Outputs.

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline const std::vector<std::string>& windows_csv_columns() {
    static const std::vector<std::string> cols{
        "window_start_s", "mode",   "n_z_mu1", "n_z_mu2", "m_z_mu1", "m_z_mu2",
        "n_x_mu1",        "n_x_mu2", "m_x_mu1", "m_x_mu2", "qber_z",  "qber_x",
        "d0",             "d1",     "phi_z",   "skl_raw_bits", "skr_bps"};
    return cols;
}

void write_windows_csv(const WindowedResult& r, const std::filesystem::path& path);
void write_summary_json(const RunSummary& s, const std::filesystem::path& path);
void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path);
/// windows.csv and summary.json into `dir` (created if needed).
void emit_outputs(const WindowedResult& r, const std::filesystem::path& dir);
RunSummary read_summary_json(const std::filesystem::path& path);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const nlohmann::json& j, const std::filesystem::path& path);

void to_json(nlohmann::json& j, const Scenario& s);
void from_json(const nlohmann::json& j, Scenario& s);
void to_json(nlohmann::json& j, const ModeAggregate& m);
void from_json(const nlohmann::json& j, ModeAggregate& m);
void to_json(nlohmann::json& j, const RunSummary& s);
void from_json(const nlohmann::json& j, RunSummary& s);
void to_json(nlohmann::json& j, const CalibrationTargets& t);
void from_json(const nlohmann::json& j, CalibrationTargets& t);
void to_json(nlohmann::json& j, const CalibrationReport& r);
void to_json(nlohmann::json& j, const SweepRow& r);

}  // namespace qkdsim
