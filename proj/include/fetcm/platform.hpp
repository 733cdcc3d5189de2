#pragma once

#include <cstddef>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace fetcm {

// Training allocates and frees many large tensors per batch. glibc's default
// policy returns them to the OS each time, which costs more system time than
// the arithmetic; keeping them in the heap avoids that.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace fetcm
