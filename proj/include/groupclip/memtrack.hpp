// Copyright 2026 The groupclip Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>

namespace groupclip {

// Allocation accounting for the clipping paths. Two pools:
//   kParamGrad - buffers holding (per-example or accumulated) parameter
//                gradients and per-example norm arrays. The fused path must
//                stay at O(sum_k d_k) here while a materializing path pays
//                O(B * sum_k d_k).
//   kBackprop  - activation-gradient workspace (dLogits, per-layer e).
// Bytes are registered explicitly at the allocation sites of those buffers;
// this is bookkeeping, not a malloc hook.
enum class MemPool { kParamGrad = 0, kBackprop = 1 };

namespace gradmem {

void add(MemPool pool, std::size_t bytes);
void sub(MemPool pool, std::size_t bytes);
void reset();
std::size_t current(MemPool pool);
std::size_t peak(MemPool pool);

}  // namespace gradmem

// RAII registration for one tracked buffer.
class TrackedBytes {
 public:
  TrackedBytes() = default;
  TrackedBytes(MemPool pool, std::size_t bytes) : pool_(pool), bytes_(bytes) {
    gradmem::add(pool_, bytes_);
  }
  TrackedBytes(const TrackedBytes&) = delete;
  TrackedBytes& operator=(const TrackedBytes&) = delete;
  TrackedBytes(TrackedBytes&& o) noexcept : pool_(o.pool_), bytes_(o.bytes_) { o.bytes_ = 0; }
  TrackedBytes& operator=(TrackedBytes&& o) noexcept {
    release();
    pool_ = o.pool_;
    bytes_ = o.bytes_;
    o.bytes_ = 0;
    return *this;
  }
  ~TrackedBytes() { release(); }

  void release() {
    if (bytes_ != 0) gradmem::sub(pool_, bytes_);
    bytes_ = 0;
  }

 private:
  MemPool pool_ = MemPool::kParamGrad;
  std::size_t bytes_ = 0;
};

}  // namespace groupclip
