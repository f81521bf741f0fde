#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace kvp {

// Seeded RNG with named substreams. All distributions are hand-rolled on top
// of std::mt19937_64 so that sequences are identical across standard library
// implementations. Every component derives its own stream from one top-level
// seed, e.g. Rng(seed).stream("pretrain").
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(mix(seed)), seed_(seed) {}

    Rng stream(std::string_view name) const {
        uint64_t h = 1469598103934665603ull; // FNV-1a
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        return Rng(seed_ ^ mix(h));
    }

    Rng stream(uint64_t index) const { return Rng(seed_ ^ mix(index + 0x9e3779b97f4a7c15ull)); }

    uint64_t next_u64() { return engine_(); }

    // Inclusive bounds.
    int uniform_int(int lo, int hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    double uniform() { // [0, 1)
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    float uniform(float lo, float hi) { return lo + static_cast<float>(uniform()) * (hi - lo); }

    float normal(float mean = 0.f, float stddev = 1.f) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + stddev * static_cast<float>(spare_);
        }
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 1e-300);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return mean + stddev * static_cast<float>(r * std::cos(theta));
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = next_u64() % i;
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct values from [0, n).
    std::vector<int> sample_without_replacement(int n, int k) {
        std::vector<int> idx(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        shuffle(idx);
        idx.resize(static_cast<size_t>(k));
        return idx;
    }

private:
    static uint64_t mix(uint64_t x) { // splitmix64 finalizer
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    std::mt19937_64 engine_;
    uint64_t seed_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace kvp
