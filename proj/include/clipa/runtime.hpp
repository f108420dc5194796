#pragma once

namespace clipa {

// Keeps freed blocks in the heap instead of returning them to the OS. The
// autodiff graph allocates and frees many short-lived buffers per step, and
// without this every step pays for fresh zero-filled pages. No-op off glibc.
void tune_allocator();

}  // namespace clipa
