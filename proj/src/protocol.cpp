#include "qkdsim/protocol.hpp"

#include <cmath>
#include <sstream>

#include "json_fields.hpp"

namespace qkdsim {

namespace {

std::string join_violations(const std::vector<ConfigViolation>& v) {
    std::ostringstream os;
    os << "invalid configuration:";
    for (const auto& e : v) os << "\n  " << e.field << ": " << e.message;
    return os.str();
}

bool open_unit(double p) { return p > 0.0 && p < 1.0; }

}  // namespace

ProtocolConfig active_decoy_config() { return ProtocolConfig{}; }

ProtocolConfig no_decoy_config() {
    ProtocolConfig cfg;
    cfg.mu1 = 0.6;
    cfg.mu2 = 0.2;
    cfg.p_mu1 = 0.8;
    cfg.pz_alice = 0.8;
    cfg.pz_bob = 0.5;
    return cfg;
}

ConfigError::ConfigError(std::vector<ConfigViolation> violations)
    : std::invalid_argument(join_violations(violations)), violations_(std::move(violations)) {}

double binary_entropy(double x) {
    if (!(x >= 0.0 && x <= 1.0)) {
        throw std::domain_error("binary_entropy: argument outside [0, 1]");
    }
    if (x == 0.0 || x == 1.0) return 0.0;
    return -x * std::log2(x) - (1.0 - x) * std::log2(1.0 - x);
}

double poisson_pn(double mu, unsigned n) {
    if (mu == 0.0) return n == 0 ? 1.0 : 0.0;
    return std::exp(-mu + n * std::log(mu) - std::lgamma(n + 1.0));
}

double tau_n(const ProtocolConfig& cfg, unsigned n) {
    return cfg.p_mu1 * poisson_pn(cfg.mu1, n) + cfg.p_mu2() * poisson_pn(cfg.mu2, n);
}

std::vector<ConfigViolation> config_violations(const ProtocolConfig& cfg) {
    std::vector<ConfigViolation> out;
    auto add = [&](const char* field, std::string msg) { out.push_back({field, std::move(msg)}); };

    if (!(cfg.qubit_rate > 0.0)) add("qubit_rate", "must be positive");
    if (!(cfg.mu1 > 0.0 && cfg.mu1 < 1.0)) add("mu1", "must lie in (0, 1)");
    if (!(cfg.mu2 > 0.0 && cfg.mu2 < 1.0)) add("mu2", "must lie in (0, 1)");
    if (!(cfg.mu2 < cfg.mu1)) add("mu2", "mu2 must be strictly less than mu1");
    if (!open_unit(cfg.p_mu1)) add("p_mu1", "probability out of range (0, 1)");
    if (!open_unit(cfg.pz_alice)) add("pz_alice", "probability out of range (0, 1)");
    if (!open_unit(cfg.pz_bob)) add("pz_bob", "probability out of range (0, 1)");
    if (cfg.sequence_length < 1) add("sequence_length", "must be at least 1");
    if (!open_unit(cfg.eps_sec)) add("eps_sec", "probability out of range (0, 1)");
    if (!open_unit(cfg.eps_corr)) add("eps_corr", "probability out of range (0, 1)");
    if (!(cfg.f_ec >= 1.0)) add("f_ec", "must be >= 1");
    if (!(cfg.block_size >= 1.0)) add("block_size", "must be >= 1");
    return out;
}

ProtocolConfig validate_config(const ProtocolConfig& cfg) {
    auto violations = config_violations(cfg);
    if (!violations.empty()) throw ConfigError(std::move(violations));
    return cfg;
}

void to_json(nlohmann::json& j, const ProtocolConfig& cfg) {
    j = nlohmann::json{{"qubit_rate", cfg.qubit_rate},
                       {"mu1", cfg.mu1},
                       {"mu2", cfg.mu2},
                       {"p_mu1", cfg.p_mu1},
                       {"pz_alice", cfg.pz_alice},
                       {"pz_bob", cfg.pz_bob},
                       {"sequence_length", cfg.sequence_length},
                       {"eps_sec", cfg.eps_sec},
                       {"eps_corr", cfg.eps_corr},
                       {"f_ec", cfg.f_ec},
                       {"block_size", cfg.block_size},
                       {"repeating_pattern", cfg.repeating_pattern}};
}

void from_json(const nlohmann::json& j, ProtocolConfig& cfg) {
    detail::reject_unknown(j, "ProtocolConfig",
                           {"qubit_rate", "mu1", "mu2", "p_mu1", "p_mu2", "pz_alice", "pz_bob",
                            "sequence_length", "eps_sec", "eps_corr", "f_ec", "block_size",
                            "repeating_pattern"});
    using detail::read_optional;
    read_optional(j, "qubit_rate", cfg.qubit_rate);
    read_optional(j, "mu1", cfg.mu1);
    read_optional(j, "mu2", cfg.mu2);
    read_optional(j, "p_mu1", cfg.p_mu1);
    read_optional(j, "pz_alice", cfg.pz_alice);
    read_optional(j, "pz_bob", cfg.pz_bob);
    read_optional(j, "sequence_length", cfg.sequence_length);
    read_optional(j, "eps_sec", cfg.eps_sec);
    read_optional(j, "eps_corr", cfg.eps_corr);
    read_optional(j, "f_ec", cfg.f_ec);
    read_optional(j, "block_size", cfg.block_size);
    read_optional(j, "repeating_pattern", cfg.repeating_pattern);
    if (auto it = j.find("p_mu2"); it != j.end()) {
        // Redundant with p_mu1; accepted only when consistent.
        const double p2 = it->get<double>();
        if (std::abs(p2 + cfg.p_mu1 - 1.0) > 1e-12) {
            throw ConfigError(std::vector<ConfigViolation>{{"p_mu2", "p_mu1 + p_mu2 must equal 1"}});
        }
    }
}

}  // namespace qkdsim
