#include "qkdsim/channel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json_fields.hpp"

namespace qkdsim {

namespace {

double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

Matrix3 diagonal(const std::array<double, kNumPorts>& d) {
    Matrix3 m{};
    for (std::size_t i = 0; i < kNumPorts; ++i) m[i][i] = d[i];
    return m;
}

Matrix3 drift_mixing(const DriftAngles& a) {
    const double s11 = std::pow(std::sin(a.lp11_mixing), 2);
    const double s01 = std::pow(std::sin(a.lp01_mixing), 2);
    Matrix3 lp11 = identity3();
    lp11[1][1] = lp11[2][2] = 1.0 - s11;
    lp11[1][2] = lp11[2][1] = s11;
    Matrix3 lp01 = identity3();
    lp01[0][0] = 1.0 - s01;
    lp01[0][1] = lp01[0][2] = lp01[1][0] = lp01[2][0] = 0.5 * s01;
    lp01[1][1] = lp01[2][2] = 1.0 - 0.5 * s01;
    return multiply(lp01, lp11);
}

double ou_step(double x, double mean, double sigma, double decay, RandomStream& rng) {
    return mean + (x - mean) * decay + sigma * std::sqrt(1.0 - decay * decay) * rng.normal();
}

}  // namespace

Matrix3 identity3() { return diagonal({1.0, 1.0, 1.0}); }

Matrix3 multiply(const Matrix3& a, const Matrix3& b) {
    Matrix3 out{};
    for (std::size_t i = 0; i < kNumPorts; ++i)
        for (std::size_t k = 0; k < kNumPorts; ++k)
            for (std::size_t j = 0; j < kNumPorts; ++j) out[i][j] += a[i][k] * b[k][j];
    return out;
}

LanternSpec default_mux_lantern() { return LanternSpec{}; }

LanternSpec default_demux_lantern() {
    LanternSpec s;
    s.pdl_db = {{{0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}}};
    return s;
}

LanternSpec worst_case_demux_lantern() {
    LanternSpec s = default_demux_lantern();
    s.crosstalk_db = {-11.3, -14.6, -14.6};
    return s;
}

Matrix3 lantern_coupling(const LanternSpec& spec) {
    Matrix3 m{};
    for (std::size_t i = 0; i < kNumPorts; ++i) {
        const double x = db_to_linear(spec.crosstalk_db[i]);
        const double leak = x / (1.0 + x);
        m[i][i] = 1.0 / (1.0 + x);
        if (i == kPortLP01) {
            m[i][kPortLP11a] = m[i][kPortLP11b] = 0.5 * leak;
        } else {
            const std::size_t sibling = i == kPortLP11a ? kPortLP11b : kPortLP11a;
            m[i][sibling] = spec.sibling_share * leak;
            m[i][kPortLP01] = (1.0 - spec.sibling_share) * leak;
        }
    }
    return m;
}

double pdl_factor(double polarization_angle, double pdl_db) {
    const double s = std::sin(polarization_angle);
    return std::pow(10.0, -pdl_db / 10.0 * s * s);
}

DriftAngles mean_angles(const DriftProcess& drift) {
    return DriftAngles{0.0, 0.0, drift.polarization_offset};
}

DriftAngles stationary_std(const DriftProcess& drift) {
    return DriftAngles{drift.amplitude * drift.lp11_weight, drift.amplitude * drift.lp01_weight,
                       drift.amplitude};
}

ChannelState channel_at(const ChannelSpec& spec, const DriftAngles& angles, double t) {
    const double fiber = db_to_linear(-spec.fiber_loss_db);
    std::array<double, kNumPorts> launch{};
    std::array<double, kNumPorts> receive{};
    for (std::size_t i = 0; i < kNumPorts; ++i) {
        const auto& pdl = spec.mux.pdl_db[i];
        launch[i] = db_to_linear(-spec.mux.insertion_loss_db[i]) * fiber *
                    pdl_factor(angles.polarization, 0.5 * (pdl[0] + pdl[1]));
        receive[i] = db_to_linear(-spec.demux.insertion_loss_db[i]);
    }

    ChannelState st;
    st.coupling = multiply(multiply(multiply(diagonal(launch), lantern_coupling(spec.mux)),
                                    multiply(drift_mixing(angles), lantern_coupling(spec.demux))),
                           diagonal(receive));
    for (std::size_t i = 0; i < kNumPorts; ++i) {
        double row = 0.0;
        for (double c : st.coupling[i]) row += c;
        st.per_mode_loss_db[i] = -10.0 * std::log10(row);
    }
    st.polarization_angle = angles.polarization;
    st.t = t;
    st.angles = angles;
    st.spec = spec;
    return st;
}

ChannelState init_channel(const ChannelSpec& spec, RandomStream& rng) {
    validate_channel_spec(spec);
    const auto& d = spec.drift;
    DriftAngles a = mean_angles(d);
    if (d.amplitude > 0.0) {
        const DriftAngles sd = stationary_std(d);
        a.lp11_mixing += sd.lp11_mixing * rng.normal();
        a.lp01_mixing += sd.lp01_mixing * rng.normal();
        a.polarization += sd.polarization * rng.normal();
    }
    return channel_at(spec, a, 0.0);
}

ChannelState init_channel(const LanternSpec& mux, const LanternSpec& demux, double fiber_loss_db,
                          const DriftProcess& drift, RandomStream& rng) {
    return init_channel(ChannelSpec{mux, demux, fiber_loss_db, drift}, rng);
}

ChannelState step_drift(const ChannelState& state, double dt, RandomStream& rng) {
    if (!(dt > 0.0)) throw std::invalid_argument("step_drift: dt must be positive");
    const auto& d = state.spec.drift;
    if (d.amplitude == 0.0) {
        ChannelState next = state;
        next.t += dt;
        return next;
    }
    const double decay = std::exp(-dt / d.correlation_time);
    const DriftAngles mean = mean_angles(d);
    const DriftAngles sd = stationary_std(d);
    DriftAngles a = state.angles;
    a.lp11_mixing = ou_step(a.lp11_mixing, mean.lp11_mixing, sd.lp11_mixing, decay, rng);
    a.lp01_mixing = ou_step(a.lp01_mixing, mean.lp01_mixing, sd.lp01_mixing, decay, rng);
    a.polarization = ou_step(a.polarization, mean.polarization, sd.polarization, decay, rng);
    return channel_at(state.spec, a, state.t + dt);
}

TransmissionProbs transmission_probs(const ChannelState& state, std::size_t launched_mode) {
    if (launched_mode >= kNumPorts) {
        throw std::out_of_range("transmission_probs: launched_mode must be 0, 1 or 2");
    }
    TransmissionProbs p;
    double sum = 0.0;
    for (std::size_t j = 0; j < kNumPorts; ++j) {
        p.port[j] = state.coupling[launched_mode][j];
        sum += p.port[j];
    }
    p.lost = std::max(0.0, 1.0 - sum);
    return p;
}

void validate_channel_spec(const ChannelSpec& spec) {
    auto check_lantern = [](const LanternSpec& l, const char* which) {
        for (std::size_t i = 0; i < kNumPorts; ++i) {
            if (!(l.crosstalk_db[i] < 0.0))
                throw std::invalid_argument(std::string(which) + ".crosstalk_db must be < 0");
            if (!(l.pdl_db[i][0] >= 0.0 && l.pdl_db[i][0] <= l.pdl_db[i][1]))
                throw std::invalid_argument(std::string(which) +
                                            ".pdl_db must satisfy 0 <= min <= max");
            if (!(l.insertion_loss_db[i] >= 0.0))
                throw std::invalid_argument(std::string(which) +
                                            ".insertion_loss_db must be >= 0");
        }
        if (!(l.sibling_share >= 0.0 && l.sibling_share <= 1.0))
            throw std::invalid_argument(std::string(which) + ".sibling_share must lie in [0, 1]");
    };
    check_lantern(spec.mux, "mux");
    check_lantern(spec.demux, "demux");
    if (!(spec.fiber_loss_db >= 0.0))
        throw std::invalid_argument("fiber_loss_db must be >= 0");
    if (!(spec.drift.correlation_time > 0.0))
        throw std::invalid_argument("drift.correlation_time must be > 0");
    if (!(spec.drift.amplitude >= 0.0))
        throw std::invalid_argument("drift.amplitude must be >= 0");
    if (!(spec.drift.lp11_weight >= 0.0))
        throw std::invalid_argument("drift.lp11_weight must be >= 0");
    if (!(spec.drift.lp01_weight >= 0.0))
        throw std::invalid_argument("drift.lp01_weight must be >= 0");
}

void to_json(nlohmann::json& j, const LanternSpec& s) {
    j = nlohmann::json{{"crosstalk_db", s.crosstalk_db},
                       {"pdl_db", s.pdl_db},
                       {"insertion_loss_db", s.insertion_loss_db},
                       {"sibling_share", s.sibling_share}};
}

void from_json(const nlohmann::json& j, LanternSpec& s) {
    detail::reject_unknown(j, "LanternSpec",
                           {"crosstalk_db", "pdl_db", "insertion_loss_db", "sibling_share"});
    detail::read_optional(j, "crosstalk_db", s.crosstalk_db);
    detail::read_optional(j, "pdl_db", s.pdl_db);
    detail::read_optional(j, "insertion_loss_db", s.insertion_loss_db);
    detail::read_optional(j, "sibling_share", s.sibling_share);
}

void to_json(nlohmann::json& j, const DriftProcess& d) {
    j = nlohmann::json{{"correlation_time", d.correlation_time},
                       {"amplitude", d.amplitude},
                       {"polarization_offset", d.polarization_offset},
                       {"lp11_weight", d.lp11_weight},
                       {"lp01_weight", d.lp01_weight},
                       {"seed_stream", d.seed_stream}};
}

void from_json(const nlohmann::json& j, DriftProcess& d) {
    detail::reject_unknown(
        j, "DriftProcess",
        {"correlation_time", "amplitude", "polarization_offset", "lp11_weight", "lp01_weight",
         "seed_stream"});
    detail::read_optional(j, "correlation_time", d.correlation_time);
    detail::read_optional(j, "amplitude", d.amplitude);
    detail::read_optional(j, "polarization_offset", d.polarization_offset);
    detail::read_optional(j, "lp11_weight", d.lp11_weight);
    detail::read_optional(j, "lp01_weight", d.lp01_weight);
    detail::read_optional(j, "seed_stream", d.seed_stream);
}

void to_json(nlohmann::json& j, const ChannelSpec& c) {
    j = nlohmann::json{{"mux", c.mux},
                       {"demux", c.demux},
                       {"fiber_loss_db", c.fiber_loss_db},
                       {"drift", c.drift}};
}

void from_json(const nlohmann::json& j, ChannelSpec& c) {
    detail::reject_unknown(j, "ChannelSpec", {"mux", "demux", "fiber_loss_db", "drift"});
    detail::read_optional(j, "mux", c.mux);
    detail::read_optional(j, "demux", c.demux);
    detail::read_optional(j, "fiber_loss_db", c.fiber_loss_db);
    detail::read_optional(j, "drift", c.drift);
}

}  // namespace qkdsim
