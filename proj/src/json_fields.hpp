#pragma once

#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace qkdsim::detail {

/// Rejects keys of `j` that are not in `allowed`.
inline void reject_unknown(const nlohmann::json& j, std::string_view where,
                           std::initializer_list<std::string_view> allowed) {
    if (!j.is_object()) {
        throw std::invalid_argument(std::string(where) + ": expected a JSON object");
    }
    for (const auto& item : j.items()) {
        bool known = false;
        for (auto name : allowed) {
            if (item.key() == name) {
                known = true;
                break;
            }
        }
        if (!known) {
            throw std::invalid_argument(std::string(where) + ": unknown field \"" + item.key() +
                                        "\"");
        }
    }
}

template <class T>
void read_optional(const nlohmann::json& j, const char* key, T& out) {
    if (auto it = j.find(key); it != j.end()) it->get_to(out);
}

}  // namespace qkdsim::detail
