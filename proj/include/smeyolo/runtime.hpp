#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace sme {

/// Keeps large tensor buffers on the heap between training steps instead of
/// mapping fresh pages for every allocation. Call once at program start.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace sme
