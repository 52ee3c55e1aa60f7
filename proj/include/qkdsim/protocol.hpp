#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace qkdsim {

enum class Basis : std::uint8_t { Z = 0, X = 1 };
enum class Intensity : std::uint8_t { Signal = 0, Decoy = 1 };

/// Transmitter and receiver settings for one experiment.
struct ProtocolConfig {
    double qubit_rate = 1.25e9;
    double mu1 = 0.31;
    double mu2 = 0.1;
    double p_mu1 = 0.8;
    double pz_alice = 0.9;
    double pz_bob = 0.75;
    std::uint64_t sequence_length = 5000;
    double eps_sec = 1e-9;
    double eps_corr = 1e-9;
    double f_ec = 1.16;
    double block_size = 1e9;
    /// When true, symbols repeat a pre-drawn pattern of sequence_length
    /// entries instead of being drawn i.i.d. per pulse.
    bool repeating_pattern = false;

    double p_mu2() const { return 1.0 - p_mu1; }
    double px_alice() const { return 1.0 - pz_alice; }
    double px_bob() const { return 1.0 - pz_bob; }
    double mu(Intensity k) const { return k == Intensity::Signal ? mu1 : mu2; }
    double p_mu(Intensity k) const { return k == Intensity::Signal ? p_mu1 : p_mu2(); }

    bool operator==(const ProtocolConfig&) const = default;
};

/// The two reference columns of the published parameter table.
ProtocolConfig active_decoy_config();
ProtocolConfig no_decoy_config();

/// One prepared state. z_value is engaged exactly when basis == Z
/// (0 = early bin, 1 = late bin); the single X state carries no bit.
struct StateSymbol {
    Basis basis = Basis::Z;
    std::optional<std::uint8_t> z_value = 0;
    Intensity intensity = Intensity::Signal;

    bool valid() const { return (basis == Basis::Z) == z_value.has_value(); }
    bool operator==(const StateSymbol&) const = default;
};

struct ConfigViolation {
    std::string field;
    std::string message;
};

class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(std::vector<ConfigViolation> violations);
    const std::vector<ConfigViolation>& violations() const { return violations_; }

private:
    std::vector<ConfigViolation> violations_;
};

/// Binary Shannon entropy in bits, with 0 log 0 = 0.
/// Throws std::domain_error outside [0, 1].
double binary_entropy(double x);

/// Poisson mass e^-mu mu^n / n!.
double poisson_pn(double mu, unsigned n);

/// Probability that the source emits n photons, mixed over both intensities.
double tau_n(const ProtocolConfig& cfg, unsigned n);

/// Every violated invariant, in field order. Empty means valid.
std::vector<ConfigViolation> config_violations(const ProtocolConfig& cfg);

/// Returns cfg unchanged, or throws ConfigError listing every violation.
ProtocolConfig validate_config(const ProtocolConfig& cfg);

void to_json(nlohmann::json& j, const ProtocolConfig& cfg);
/// Strict: unknown keys are rejected, missing keys keep their defaults.
void from_json(const nlohmann::json& j, ProtocolConfig& cfg);

}  // namespace qkdsim
