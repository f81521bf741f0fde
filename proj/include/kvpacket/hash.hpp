#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace kvp {

using Sha256 = std::array<uint8_t, 32>;

Sha256 sha256(std::span<const uint8_t> data);
Sha256 sha256(std::string_view data);

std::string hex(const Sha256& h);

} // namespace kvp
