#pragma once

#include <cstddef>
#include <functional>

namespace atlas {

/// Worker cap: ATLAS_THREADS if set and positive, else hardware concurrency.
std::size_t thread_limit();

/// Runs body(chunk) for chunk in [0, chunks) across up to thread_limit() threads.
/// Callers keep results per chunk and merge them in chunk order, so reductions
/// are bit-identical regardless of the thread count.
void parallel_chunks(std::size_t chunks, const std::function<void(std::size_t)>& body);

/// Fixed chunking of [0, n) used by all accumulating passes.
inline constexpr std::size_t kChunkSize = 256;
inline std::size_t chunk_count(std::size_t n) { return (n + kChunkSize - 1) / kChunkSize; }

}  // namespace atlas
