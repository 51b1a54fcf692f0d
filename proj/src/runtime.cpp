#include "gsau/runtime.hpp"

#include <climits>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace gsau {

void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, INT_MAX);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace gsau
