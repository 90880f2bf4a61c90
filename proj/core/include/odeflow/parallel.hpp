#pragma once

#include <cstddef>
#include <functional>

namespace odeflow {

/// Worker cap from ODEFLOW_THREADS (default: hardware concurrency, at least 1).
std::size_t worker_count();

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Each index is
/// handled by exactly one worker; fn must only write to per-index state.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

/// Keep freed buffers in the process heap instead of handing them back to the
/// OS. Training frees and reallocates the same large tensors every step, and
/// without this most of that time goes to page faults. No-op off glibc.
void retain_heap_memory();

}  // namespace odeflow
