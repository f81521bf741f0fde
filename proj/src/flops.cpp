#include "kvpacket/flops.hpp"

#include "kvpacket/error.hpp"

namespace kvp {

thread_local FlopsMeter* FlopsMeter::current_ = nullptr;

MeterScope::MeterScope(FlopsMeter& m) {
    if (FlopsMeter::current_) throw StateError("a FlopsMeter is already active on this thread");
    FlopsMeter::current_ = &m;
}

MeterScope::~MeterScope() { FlopsMeter::current_ = nullptr; }

} // namespace kvp
