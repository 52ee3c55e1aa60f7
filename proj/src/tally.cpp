#include "qkdsim/tally.hpp"

#include <stdexcept>
#include <string>

#include "json_fields.hpp"

namespace qkdsim {

namespace {

constexpr std::array<const char*, 2> kBasisTag{"z", "x"};
constexpr std::array<const char*, 2> kIntensityTag{"mu1", "mu2"};

std::string key(const char* count, std::size_t b, std::size_t k) {
    return std::string(count) + "_" + kBasisTag[b] + "_" + kIntensityTag[k];
}

}  // namespace

TallyBlock TallyBlock::scaled(double factor) const {
    TallyBlock out = *this;
    for (auto& row : out.cells)
        for (auto& c : row) {
            c.n *= factor;
            c.m *= factor;
        }
    out.duration *= factor;
    return out;
}

TallyBlock& TallyBlock::operator+=(const TallyBlock& other) {
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t k = 0; k < 2; ++k) {
            cells[b][k].n += other.cells[b][k].n;
            cells[b][k].m += other.cells[b][k].m;
        }
    duration += other.duration;
    return *this;
}

void validate_tally(const TallyBlock& block) {
    if (!(block.duration > 0.0)) throw std::invalid_argument("TallyBlock: duration must be > 0");
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t k = 0; k < 2; ++k) {
            const auto& c = block.cells[b][k];
            if (!(c.n >= 0.0 && c.m >= 0.0 && c.m <= c.n)) {
                throw std::invalid_argument("TallyBlock: cell " + key("n", b, k) +
                                            " violates 0 <= m <= n");
            }
        }
}

void to_json(nlohmann::json& j, const TallyBlock& b) {
    j = nlohmann::json{{"mode", b.mode}, {"duration_s", b.duration}, {"config", b.cfg}};
    for (std::size_t bi = 0; bi < 2; ++bi)
        for (std::size_t k = 0; k < 2; ++k) {
            j[key("n", bi, k)] = b.cells[bi][k].n;
            j[key("m", bi, k)] = b.cells[bi][k].m;
        }
}

void from_json(const nlohmann::json& j, TallyBlock& b) {
    detail::reject_unknown(j, "TallyBlock",
                           {"mode", "duration_s", "config", "n_z_mu1", "n_z_mu2", "m_z_mu1",
                            "m_z_mu2", "n_x_mu1", "n_x_mu2", "m_x_mu1", "m_x_mu2"});
    detail::read_optional(j, "mode", b.mode);
    detail::read_optional(j, "duration_s", b.duration);
    detail::read_optional(j, "config", b.cfg);
    for (std::size_t bi = 0; bi < 2; ++bi)
        for (std::size_t k = 0; k < 2; ++k) {
            b.cells[bi][k].n = j.value(key("n", bi, k), 0.0);
            b.cells[bi][k].m = j.value(key("m", bi, k), 0.0);
        }
    validate_tally(b);
}

}  // namespace qkdsim
