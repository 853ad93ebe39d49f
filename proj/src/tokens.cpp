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

#include "fedcq/tokens.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "fedcq/error.hpp"

namespace fedcq::quant {
namespace {

const TokenPair& lookup(const std::vector<TokenPair>& v, int id, const char* kind,
                        const std::string& market) {
  if (id < 0 || static_cast<std::size_t>(id) >= v.size()) {
    throw Error("no tokens for " + std::string(kind) + " " + std::to_string(id) +
                " in market " + market);
  }
  return v[static_cast<std::size_t>(id)];
}

CodebookUsage usage(const std::vector<TokenPair>& v, int T) {
  std::set<int> fed, local;
  for (const auto& t : v) {
    fed.insert(t.fed);
    if (t.local >= 0) local.insert(t.local);
  }
  return {static_cast<int>(fed.size()), static_cast<int>(local.size()), T};
}

void write_csv(const std::filesystem::path& path, const std::vector<TokenPair>& v) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "entity_id,id_fed,id_local\n";
  for (std::size_t k = 0; k < v.size(); ++k) {
    out << k << ',' << v[k].fed << ',' << v[k].local << '\n';
  }
  if (!out) throw Error("write failed: " + path.string());
}

int parse_int(std::string_view s, const std::filesystem::path& path, int line) {
  int v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ParseError(path.string() + " line " + std::to_string(line) + ": bad integer '" +
                     std::string(s) + "'");
  }
  return v;
}

std::vector<TokenPair> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "entity_id,id_fed,id_local") {
    throw ParseError(path.string() + ": unexpected header '" + line + "'");
  }
  std::vector<TokenPair> v;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::string_view rest(line);
    std::string_view fields[3];
    for (int f = 0; f < 3; ++f) {
      const auto comma = rest.find(',');
      if ((f < 2) == (comma == std::string_view::npos)) {
        throw ParseError(path.string() + " line " + std::to_string(lineno) +
                         ": expected 3 fields");
      }
      fields[f] = rest.substr(0, comma);
      rest = comma == std::string_view::npos ? std::string_view() : rest.substr(comma + 1);
    }
    const int id = parse_int(fields[0], path, lineno);
    if (id != static_cast<int>(v.size())) {
      throw ParseError(path.string() + " line " + std::to_string(lineno) +
                       ": entity ids must be dense and ordered");
    }
    v.push_back({parse_int(fields[1], path, lineno), parse_int(fields[2], path, lineno)});
  }
  return v;
}

}  // namespace

const TokenPair& TokenTable::user(int id) const { return lookup(users, id, "user", market_id); }
const TokenPair& TokenTable::item(int id) const { return lookup(items, id, "item", market_id); }

void TokenTable::validate() const {
  if (codebook_size < 1) throw ConfigError("token table without a codebook size");
  for (const auto* v : {&users, &items}) {
    for (const auto& t : *v) {
      const bool local_ok = two_level ? (t.local >= 0 && t.local < codebook_size) : t.local == -1;
      if (t.fed < 0 || t.fed >= codebook_size || !local_ok) {
        throw Error("token (" + std::to_string(t.fed) + ", " + std::to_string(t.local) +
                    ") out of range for codebook size " + std::to_string(codebook_size));
      }
    }
  }
}

CodebookUsage TokenTable::user_usage() const { return usage(users, codebook_size); }
CodebookUsage TokenTable::item_usage() const { return usage(items, codebook_size); }

void TokenTable::save_csv(const std::filesystem::path& user_file,
                          const std::filesystem::path& item_file) const {
  write_csv(user_file, users);
  write_csv(item_file, items);
}

TokenTable TokenTable::load_csv(std::string market_id, int codebook_size, bool two_level,
                                const std::filesystem::path& user_file,
                                const std::filesystem::path& item_file) {
  TokenTable t;
  t.market_id = std::move(market_id);
  t.codebook_size = codebook_size;
  t.two_level = two_level;
  t.users = read_csv(user_file);
  t.items = read_csv(item_file);
  t.validate();
  return t;
}

}  // namespace fedcq::quant
