#pragma once

namespace gsau {

/// Keeps large freed buffers in the heap instead of returning them to the
/// OS, so per-batch activations reuse pages. No-op outside glibc.
void configure_allocator();

}  // namespace gsau
