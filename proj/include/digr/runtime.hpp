#pragma once

namespace digr {

/// Keeps large tensor buffers on the heap instead of fresh mmap pages.
/// Safe to call more than once.
void tune_allocator();

}  // namespace digr
