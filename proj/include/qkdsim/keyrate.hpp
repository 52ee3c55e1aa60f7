#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qkdsim/link.hpp"
#include "qkdsim/protocol.hpp"
#include "qkdsim/tally.hpp"

namespace qkdsim {

struct KeyRateOptions {
    /// A block without X-basis data borrows the X statistics of a reference
    /// block (Mode 1). When false, such blocks get phi_z = 0.5.
    bool shared_phase_error = true;
    /// Each concentration inequality is given eps_sec / eps_divisor.
    double eps_divisor = 21.0;
    /// false drops every statistical-fluctuation term (asymptotic limit).
    bool finite_size = true;

    bool operator==(const KeyRateOptions&) const = default;
};

enum class PhaseSource { Own, Shared, Fallback };

std::string to_string(PhaseSource p);

struct DecoyBounds {
    double d0_low = 0.0;
    double d1_low = 0.0;
    double phi_z_up = 0.5;
    /// Unclamped values.
    double d0_raw = 0.0;
    double d1_raw = 0.0;
    double d0_upper = 0.0;
    double x_single_photon = 0.0;
    double x_single_photon_errors = 0.0;
    /// d1_raw < 0: the statistics are inconsistent with any honest channel.
    bool d1_infeasible = false;
    PhaseSource phase_source = PhaseSource::Fallback;
};

struct KeyRateResult {
    double d0 = 0.0;
    double d1 = 0.0;
    double phi_z = 0.5;
    double lambda_ec = 0.0;
    double secret_key_length_raw = 0.0;
    double secret_key_length = 0.0;
    double skr = 0.0;      // bits/s, from the clamped length
    double skr_raw = 0.0;  // bits/s, may be negative
    double qber_z = 0.0;
    double duration = 0.0;
    bool d1_infeasible = false;
    /// Fewer Z detections than the configured block size.
    bool short_block = false;
    PhaseSource phase_source = PhaseSource::Fallback;
};

/// sqrt((n / 2) ln(1 / eps)). Throws std::domain_error unless 0 < eps <= 1.
double hoeffding_delta(double n, double eps);

/// Errors over detections in one basis, pooled over intensities.
/// Throws std::domain_error when the basis is empty.
double qber(const TallyBlock& block, Basis basis);
double qber(const TallyBlock& block, Basis basis, Intensity intensity);

/// Vacuum / single-photon lower bounds and the phase-error upper bound.
/// `phase_reference` supplies X statistics when `block` has none.
DecoyBounds decoy_bounds(const TallyBlock& block, const KeyRateOptions& options = {},
                         const TallyBlock* phase_reference = nullptr);

/// f_ec * n_z * h(q_z).
double ec_leakage(double n_z, double q_z, double f_ec);

/// d0 + d1 (1 - h(phi)) - lambda_ec - 6 log2(21/eps_sec) - 2 log2(2/eps_corr).
double finite_key_length(double d0, double d1, double phi_z, double lambda_ec, double eps_sec,
                         double eps_corr);

/// Secret key length of `block` treated as one finite-key block.
KeyRateResult secret_key_length(const TallyBlock& block, const KeyRateOptions& options = {},
                                const TallyBlock* phase_reference = nullptr);

/// Key rate of a window whose detections are cut into blocks of
/// cfg.block_size Z detections. Windows short of one block are evaluated
/// as a single short block with full-strength finite-size terms.
KeyRateResult blocked_key_rate(const TallyBlock& window, const KeyRateOptions& options = {},
                               const TallyBlock* phase_reference = nullptr);

/// Standard sifting over records of one mode. Throws std::invalid_argument
/// when a detection refers to a pulse index that is not in `pulses`.
TallyBlock sift(const std::vector<PulseRecord>& pulses,
                const std::vector<DetectionRecord>& detections, const ProtocolConfig& cfg,
                double duration, int mode = 1);

// ---------------------------------------------------------------------------
// Protocol-parameter optimisation.

/// Single-mode channel description for the optimiser.
struct ChannelSummary {
    /// End-to-end loss per photon including detector efficiency, dB.
    double loss_db = 17.0;
    /// Per-photon error probabilities.
    double q_z = 0.0443;
    double q_x = 0.0214;
    double dark_rate = 50.0;
    double dead_time = 33e-9;

    bool operator==(const ChannelSummary&) const = default;
};

/// Equivalent single-mode link for the analytic tally model.
LinkSetup summary_link(const ChannelSummary& summary, const ProtocolConfig& cfg);
ChannelState summary_channel(const ChannelSummary& summary);

/// Expected tallies of a block holding cfg.block_size Z detections.
TallyBlock expected_block(const ChannelSummary& summary, const ProtocolConfig& cfg);

/// Sifted Z detection rates and QBERs as reported for a run, indexed
/// [signal, decoy].
struct PublishedRates {
    std::array<double, 2> rate_z{};  // 1/s
    std::array<double, 2> qber_z{};
    /// Absent: the mode was measured in Z only.
    std::optional<std::array<double, 2>> qber_x;
};

/// Block of cfg.block_size Z detections matching reported rates; X cells
/// are inferred from the basis-choice probabilities.
TallyBlock reconstruct_block(const ProtocolConfig& cfg, const PublishedRates& rates, int mode = 1);

struct Range {
    double lo = 0.0;
    double hi = 0.0;
    bool operator==(const Range&) const = default;
};

struct SearchSpace {
    Range p_mu1{0.5, 0.95};
    Range pz_alice{0.5, 0.98};
    Range mu1{0.1, 0.8};
    /// When empty, mu2 = mu1 / mu_ratio.
    std::optional<Range> mu2;
    double mu_ratio = 3.1;

    bool operator==(const SearchSpace&) const = default;
};

struct OptimizeOptions {
    std::uint64_t seed = 1;
    int random_starts = 4;
    int max_iterations = 400;
    KeyRateOptions keyrate;
};

struct OptimizeResult {
    ProtocolConfig config;
    double skr = 0.0;  // objective, raw (unclamped) bits/s
    int evaluations = 0;
    int iterations = 0;
    bool converged = false;
    std::string message;
};

/// Raw SKR of `cfg` on the summary channel.
double modeled_skr(const ChannelSummary& summary, const ProtocolConfig& cfg,
                   const KeyRateOptions& options = {});

/// Maximises modeled SKR over the search space starting from `base`
/// (fields outside the search space are kept).
OptimizeResult optimize_parameters(const ChannelSummary& summary, const ProtocolConfig& base,
                                   const SearchSpace& space, const OptimizeOptions& options = {});

/// Applies a normalised point in [0,1]^d of the search space to `base`.
ProtocolConfig apply_search_point(const ProtocolConfig& base, const SearchSpace& space,
                                  const std::vector<double>& unit_point);
std::size_t search_dimensions(const SearchSpace& space);

void to_json(nlohmann::json& j, const KeyRateResult& r);
void from_json(const nlohmann::json& j, KeyRateResult& r);
void to_json(nlohmann::json& j, const ChannelSummary& s);
void from_json(const nlohmann::json& j, ChannelSummary& s);
void to_json(nlohmann::json& j, const SearchSpace& s);
void from_json(const nlohmann::json& j, SearchSpace& s);

}  // namespace qkdsim
