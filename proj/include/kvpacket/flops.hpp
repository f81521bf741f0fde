#pragma once

#include <cstdint>

namespace kvp {

// Which accounting channel compute is billed to while a meter is active.
// Off discards (query-time decode is never billed against context preparation).
enum class Phase { Off, Forward, Selection };

struct FlopsSnapshot {
    uint64_t realign_ops = 0;
    uint64_t forward_flops = 0;
    uint64_t selection_flops = 0;

    uint64_t total() const { return realign_ops + forward_flops + selection_flops; }
};

// Context-preparation cost meter. One meter may be active per thread;
// tensor ops report into it through the thread_local current pointer.
class FlopsMeter {
public:
    FlopsMeter() = default;
    FlopsMeter(const FlopsMeter&) = delete;
    FlopsMeter& operator=(const FlopsMeter&) = delete;

    void add_matmul(uint64_t m, uint64_t n, uint64_t k) { add_flops(2 * m * n * k); }

    void add_flops(uint64_t flops) {
        switch (phase_) {
        case Phase::Forward: counts_.forward_flops += flops; break;
        case Phase::Selection: counts_.selection_flops += flops; break;
        case Phase::Off: break;
        }
    }

    // One op per rotated element, regardless of phase.
    void add_rotations(uint64_t n) { counts_.realign_ops += n; }

    Phase phase() const { return phase_; }
    void set_phase(Phase p) { phase_ = p; }

    const FlopsSnapshot& snapshot() const { return counts_; }

    static FlopsMeter* current() { return current_; }

private:
    friend class MeterScope;
    FlopsSnapshot counts_;
    Phase phase_ = Phase::Off;
    static thread_local FlopsMeter* current_;
};

// Installs a meter for the enclosing scope. Non-nesting.
class MeterScope {
public:
    explicit MeterScope(FlopsMeter& m);
    ~MeterScope();
    MeterScope(const MeterScope&) = delete;
    MeterScope& operator=(const MeterScope&) = delete;
};

// Temporarily switches the active meter's phase; no-op when no meter is active.
class PhaseScope {
public:
    explicit PhaseScope(Phase p) {
        if (FlopsMeter* m = FlopsMeter::current()) {
            meter_ = m;
            prev_ = m->phase();
            m->set_phase(p);
        }
    }
    ~PhaseScope() {
        if (meter_) meter_->set_phase(prev_);
    }
    PhaseScope(const PhaseScope&) = delete;
    PhaseScope& operator=(const PhaseScope&) = delete;

private:
    FlopsMeter* meter_ = nullptr;
    Phase prev_ = Phase::Off;
};

inline void meter_matmul(uint64_t m, uint64_t n, uint64_t k) {
    if (FlopsMeter* f = FlopsMeter::current()) f->add_matmul(m, n, k);
}

inline void meter_flops(uint64_t flops) {
    if (FlopsMeter* f = FlopsMeter::current()) f->add_flops(flops);
}

inline void meter_rotations(uint64_t n) {
    if (FlopsMeter* f = FlopsMeter::current()) f->add_rotations(n);
}

} // namespace kvp
