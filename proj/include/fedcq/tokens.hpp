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
#include <string>
#include <vector>

namespace fedcq::quant {

// Discrete codes of one entity. `local` is -1 when the quantizer has a
// single (federated) level.
struct TokenPair {
  int fed = -1;
  int local = -1;

  bool operator==(const TokenPair&) const = default;
};

struct CodebookUsage {
  int used_fed = 0;    // distinct federated codes in use
  int used_local = 0;  // distinct local codes in use
  int codebook_size = 0;
  double fed_fraction() const { return codebook_size ? double(used_fed) / codebook_size : 0; }
  double local_fraction() const {
    return codebook_size ? double(used_local) / codebook_size : 0;
  }
};

struct TokenTable {
  std::string market_id;
  int codebook_size = 0;
  bool two_level = true;
  std::vector<TokenPair> users;
  std::vector<TokenPair> items;

  const TokenPair& user(int id) const;
  const TokenPair& item(int id) const;
  // Throws if any code is outside [0, codebook_size) (or local codes are
  // present on a single-level table).
  void validate() const;
  CodebookUsage user_usage() const;
  CodebookUsage item_usage() const;

  // Two CSV files with header "entity_id,id_fed,id_local".
  void save_csv(const std::filesystem::path& user_file,
                const std::filesystem::path& item_file) const;
  static TokenTable load_csv(std::string market_id, int codebook_size, bool two_level,
                             const std::filesystem::path& user_file,
                             const std::filesystem::path& item_file);
};

}  // namespace fedcq::quant
