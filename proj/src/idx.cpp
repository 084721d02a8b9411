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

#include "groupclip/idx.hpp"

#include <cstdint>
#include <fstream>
#include <vector>

#include "groupclip/errors.hpp"

namespace groupclip {
namespace {

constexpr std::uint32_t kImagesMagic = 2051;  // 0x00000803
constexpr std::uint32_t kLabelsMagic = 2049;  // 0x00000801

std::uint32_t read_u32_be(std::ifstream& is, std::size_t offset) {
  unsigned char buf[4];
  is.read(reinterpret_cast<char*>(buf), 4);
  if (!is) throw FormatError("idx: truncated at byte " + std::to_string(offset));
  return (static_cast<std::uint32_t>(buf[0]) << 24) | (static_cast<std::uint32_t>(buf[1]) << 16) |
         (static_cast<std::uint32_t>(buf[2]) << 8) | static_cast<std::uint32_t>(buf[3]);
}

}  // namespace

Tensor read_idx(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("idx: cannot open " + path);

  const std::uint32_t magic = read_u32_be(is, 0);
  int ndim;
  bool scale;
  if (magic == kImagesMagic) {
    ndim = 3;
    scale = true;
  } else if (magic == kLabelsMagic) {
    ndim = 1;
    scale = false;
  } else {
    throw FormatError("idx: bad magic " + std::to_string(magic) + " at byte 0 in " + path);
  }

  std::vector<std::size_t> shape;
  std::size_t total = 1;
  for (int d = 0; d < ndim; ++d) {
    const std::size_t offset = 4 + 4 * static_cast<std::size_t>(d);
    const std::uint32_t n = read_u32_be(is, offset);
    if (n == 0) throw FormatError("idx: zero dimension at byte " + std::to_string(offset));
    shape.push_back(n);
    total *= n;
  }

  std::vector<unsigned char> payload(total);
  const std::size_t payload_offset = 4 + 4 * static_cast<std::size_t>(ndim);
  is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(total));
  if (static_cast<std::size_t>(is.gcount()) != total) {
    throw FormatError("idx: truncated payload at byte " +
                      std::to_string(payload_offset + static_cast<std::size_t>(is.gcount())) +
                      " (expected " + std::to_string(total) + " bytes)");
  }

  Tensor out(shape);
  const double denom = scale ? 255.0 : 1.0;
  for (std::size_t i = 0; i < total; ++i) out.data[i] = static_cast<double>(payload[i]) / denom;
  return out;
}

}  // namespace groupclip
