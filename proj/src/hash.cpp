#include "kvpacket/hash.hpp"

#include <openssl/evp.h>

#include "kvpacket/error.hpp"

namespace kvp {

Sha256 sha256(std::span<const uint8_t> data) {
    Sha256 out{};
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != 32)
        throw Error("sha256 digest failed");
    return out;
}

Sha256 sha256(std::string_view data) {
    return sha256(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(data.data()), data.size()));
}

std::string hex(const Sha256& h) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    s.reserve(64);
    for (uint8_t b : h) {
        s.push_back(digits[b >> 4]);
        s.push_back(digits[b & 0xf]);
    }
    return s;
}

} // namespace kvp
