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

#include "groupclip/memtrack.hpp"

#include <atomic>

namespace groupclip::gradmem {
namespace {

struct Pool {
  std::atomic<std::size_t> current{0};
  std::atomic<std::size_t> peak{0};
};

Pool g_pools[2];

}  // namespace

void add(MemPool pool, std::size_t bytes) {
  Pool& p = g_pools[static_cast<int>(pool)];
  const std::size_t now = p.current.fetch_add(bytes) + bytes;
  std::size_t prev = p.peak.load();
  while (prev < now && !p.peak.compare_exchange_weak(prev, now)) {
  }
}

void sub(MemPool pool, std::size_t bytes) {
  g_pools[static_cast<int>(pool)].current.fetch_sub(bytes);
}

void reset() {
  for (Pool& p : g_pools) {
    p.current.store(0);
    p.peak.store(0);
  }
}

std::size_t current(MemPool pool) { return g_pools[static_cast<int>(pool)].current.load(); }

std::size_t peak(MemPool pool) { return g_pools[static_cast<int>(pool)].peak.load(); }

}  // namespace groupclip::gradmem
