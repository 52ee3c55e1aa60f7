#pragma once

#include <array>
#include <string>

#include <nlohmann/json.hpp>

#include "qkdsim/random.hpp"

namespace qkdsim {

/// Port / fiber-mode indices shared by both lanterns.
inline constexpr std::size_t kPortLP01 = 0;
inline constexpr std::size_t kPortLP11a = 1;
inline constexpr std::size_t kPortLP11b = 2;
inline constexpr std::size_t kNumPorts = 3;

using Matrix3 = std::array<std::array<double, kNumPorts>, kNumPorts>;

Matrix3 identity3();
Matrix3 multiply(const Matrix3& a, const Matrix3& b);

/// Photonic lantern characterisation, one entry per single-mode port
/// {LP01 port, LP11a port, LP11b port}.
struct LanternSpec {
    /// Power in unintended modes relative to the target mode, dB (< 0).
    std::array<double, kNumPorts> crosstalk_db{-14.7, -17.5, -18.0};
    /// Polarization-dependent loss range [min, max] per port, dB.
    std::array<std::array<double, 2>, kNumPorts> pdl_db{{{2.1, 2.4}, {4.3, 4.4}, {5.5, 5.7}}};
    std::array<double, kNumPorts> insertion_loss_db{0.0, 0.0, 0.0};
    /// Share of an LP11 port's leakage that lands on the sibling LP11 port;
    /// the remainder goes to LP01.
    double sibling_share = 0.9;

    bool operator==(const LanternSpec&) const = default;
};

/// Multiplexing lantern: measured crosstalk averages and PDL ranges.
LanternSpec default_mux_lantern();
/// Demultiplexing lantern: same crosstalk averages, no PDL.
LanternSpec default_demux_lantern();
/// Demultiplexing lantern at the worst measured crosstalk (-11.3 / -14.6 dB).
LanternSpec worst_case_demux_lantern();

/// Slow mean-reverting drift of the mode-mixing and polarization angles.
struct DriftProcess {
    double correlation_time = 100.0;  // s
    double amplitude = 0.06;          // rad, stationary standard deviation of the polarization angle
    /// Set point of the polarization angle; PDL is linear in small
    /// excursions around pi/4 and quadratic around 0.
    double polarization_offset = 0.7853981633974483;
    /// LP11a <-> LP11b mixing amplitude relative to `amplitude`. This term
    /// exchanges photons between the signal modes and so moves the QBER.
    double lp11_weight = 0.2;
    /// LP01 <-> LP11 mixing amplitude relative to `amplitude`. LP01 is not
    /// detected, so this term only moves the transmission.
    double lp01_weight = 1.0;
    std::string seed_stream = "channel-drift";

    bool operator==(const DriftProcess&) const = default;
};

/// Instantaneous drift coordinates.
struct DriftAngles {
    double lp11_mixing = 0.0;
    double lp01_mixing = 0.0;
    double polarization = 0.0;

    bool operator==(const DriftAngles&) const = default;
};

/// Everything needed to build a channel: both lanterns, the fiber, the drift.
struct ChannelSpec {
    LanternSpec mux = default_mux_lantern();
    LanternSpec demux = default_demux_lantern();
    double fiber_loss_db = 5.0;
    DriftProcess drift;

    bool operator==(const ChannelSpec&) const = default;
};

struct ChannelState {
    /// coupling[launched][received]: power fraction including all losses.
    Matrix3 coupling{};
    std::array<double, kNumPorts> per_mode_loss_db{};
    double polarization_angle = 0.0;
    double t = 0.0;
    DriftAngles angles;
    ChannelSpec spec;
};

struct TransmissionProbs {
    std::array<double, kNumPorts> port{};
    double lost = 1.0;
};

/// Power-coupling matrix of a single lossless lantern (rows sum to 1).
Matrix3 lantern_coupling(const LanternSpec& spec);

/// Transmittance multiplier of a port with the given PDL at a polarization
/// angle: 1 at angle 0, 10^(-pdl/10) at pi/2.
double pdl_factor(double polarization_angle, double pdl_db);

/// Deterministic channel at fixed drift coordinates.
ChannelState channel_at(const ChannelSpec& spec, const DriftAngles& angles, double t = 0.0);

/// Drift coordinates at the stationary mean.
DriftAngles mean_angles(const DriftProcess& drift);
/// Stationary standard deviations of the drift coordinates.
DriftAngles stationary_std(const DriftProcess& drift);

/// Channel at t = 0 with angles drawn from the stationary distribution.
ChannelState init_channel(const LanternSpec& mux, const LanternSpec& demux, double fiber_loss_db,
                          const DriftProcess& drift, RandomStream& rng);
ChannelState init_channel(const ChannelSpec& spec, RandomStream& rng);

/// Advances the drift by dt seconds with the exact Ornstein-Uhlenbeck update.
ChannelState step_drift(const ChannelState& state, double dt, RandomStream& rng);

TransmissionProbs transmission_probs(const ChannelState& state, std::size_t launched_mode);

/// Throws std::invalid_argument naming the offending field.
void validate_channel_spec(const ChannelSpec& spec);

void to_json(nlohmann::json& j, const LanternSpec& s);
void from_json(const nlohmann::json& j, LanternSpec& s);
void to_json(nlohmann::json& j, const DriftProcess& d);
void from_json(const nlohmann::json& j, DriftProcess& d);
void to_json(nlohmann::json& j, const ChannelSpec& c);
void from_json(const nlohmann::json& j, ChannelSpec& c);

}  // namespace qkdsim
