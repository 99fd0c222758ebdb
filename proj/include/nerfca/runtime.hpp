#pragma once

namespace nerfca {

/// Keeps large temporary buffers on the heap instead of returning them to the OS after
/// every batch. No effect outside glibc.
void tune_allocator();

}  // namespace nerfca
