// Copyright 2026 The fedcq Authors
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

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "fedcq/nn/tensor.hpp"

namespace fedcq::nn {

// Checkpoint file layout (version 1, all integers and doubles little-endian):
//
//   magic    8 bytes  "FCQCKPT1"
//   version  u32      1
//   n_meta   u32      then n_meta x { u32 len, key bytes, u32 len, value bytes }
//   n_tensor u32      then n_tensor x { u32 len, name bytes, u64 rows, u64 cols,
//                                       rows*cols f64 row-major }
//
// Metadata holds string key/value pairs (role, entity, market, ...).
struct NamedTensor {
  std::string name;
  Matrix value;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<NamedTensor> tensors;

  void add(std::string name, const Matrix& value) {
    tensors.push_back({std::move(name), value});
  }
  const Matrix& get(std::string_view name) const;
  bool has(std::string_view name) const;
  const std::string& meta_at(const std::string& key) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Little-endian primitive writers/readers shared by the binary formats.
class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void str(std::string_view s);
  void raw(std::string_view s) { out_.append(s); }
  void matrix(const Matrix& m);
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view in) : in_(in) {}
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string str();
  std::string_view raw(std::size_t n);
  Matrix matrix();
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const;
  std::string_view in_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace fedcq::nn
