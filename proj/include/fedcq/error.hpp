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

#include <stdexcept>
#include <string>

namespace fedcq {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file or config (carries a line number when known).
class ParseError : public Error {
 public:
  using Error::Error;
};

class EmptyDatasetError : public Error {
 public:
  using Error::Error;
};

// Tensor or table dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A value that may never leave a client was routed towards the server.
class PrivacyWallError : public Error {
 public:
  using Error::Error;
};

// NaN/inf in a loss or gradient; training halts.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A pipeline stage was run before the stage producing its inputs.
class DependencyError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace fedcq
