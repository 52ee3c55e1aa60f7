#pragma once

#include <array>

#include <nlohmann/json.hpp>

#include "qkdsim/protocol.hpp"

namespace qkdsim {

/// Sifted detections and errors of one cell. Counts are real-valued so that
/// blocks can be rescaled and reconstructed from published rates.
struct TallyCell {
    double n = 0.0;
    double m = 0.0;

    bool operator==(const TallyCell&) const = default;
};

/// Sifted statistics per (basis, intensity) for one mode over one window.
struct TallyBlock {
    std::array<std::array<TallyCell, 2>, 2> cells{};  // [basis][intensity]
    double duration = 1.0;                            // s
    int mode = 1;
    ProtocolConfig cfg;

    TallyCell& at(Basis b, Intensity k) { return cells[idx(b)][idx(k)]; }
    const TallyCell& at(Basis b, Intensity k) const { return cells[idx(b)][idx(k)]; }

    double n(Basis b) const { return at(b, Intensity::Signal).n + at(b, Intensity::Decoy).n; }
    double m(Basis b) const { return at(b, Intensity::Signal).m + at(b, Intensity::Decoy).m; }
    bool has_basis(Basis b) const { return n(b) > 0.0; }

    TallyBlock scaled(double factor) const;
    TallyBlock& operator+=(const TallyBlock& other);

    bool operator==(const TallyBlock&) const = default;

private:
    template <class E>
    static constexpr std::size_t idx(E e) {
        return static_cast<std::size_t>(e);
    }
};

/// Throws std::invalid_argument if a cell has m > n, a negative count, or
/// the duration is not positive.
void validate_tally(const TallyBlock& block);

void to_json(nlohmann::json& j, const TallyBlock& b);
void from_json(const nlohmann::json& j, TallyBlock& b);

}  // namespace qkdsim
