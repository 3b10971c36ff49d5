#pragma once

// Deterministic work splitting and per-stream random generators.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string_view>

namespace stldp {

using Rng = std::mt19937_64;

/// Independent generator for the stream named `key` under `seed`.
Rng stream_rng(std::uint64_t seed, std::string_view key);
Rng stream_rng(std::uint64_t seed, std::uint64_t key);

/// Workers used by parallel_for: STLDP_THREADS if set, else the hardware
/// concurrency; 1 in strict-order mode.
unsigned worker_count();
void set_strict_order(bool strict);
bool strict_order();

/// Calls fn(i) for i in [0, n). Each index is handled by exactly one worker,
/// so writing results into slot i keeps outputs independent of scheduling.
/// The first exception thrown by any call is rethrown after all workers stop.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace stldp
