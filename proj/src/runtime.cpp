#include "clipa/runtime.hpp"

#include <cstdlib>  // defines __GLIBC__ where applicable

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace clipa {

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 100 << 20);
#endif
}

}  // namespace clipa
