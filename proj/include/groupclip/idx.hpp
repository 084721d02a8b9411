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

#include <string>

#include "groupclip/tensor.hpp"

namespace groupclip {

// IDX binary reader (big-endian magic, u8 payload). Image files (magic 2051)
// are scaled to [0, 1]; label files (magic 2049) keep raw values so they stay
// usable as class indices. Malformed files raise FormatError with the byte
// offset of the failure.
Tensor read_idx(const std::string& path);

}  // namespace groupclip
