// Copyright 2026 The privgemo Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace privgemo {

/// Base of every error the engine raises on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line_no, const std::string& what)
      : Error("line " + std::to_string(line_no) + ": " + what), line_no_(line_no) {}
  std::size_t line_no() const noexcept { return line_no_; }

 private:
  std::size_t line_no_;
};

class UnknownEntity : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class NoAlignment : public Error {
 public:
  using Error::Error;
};

class NoTopicEntities : public Error {
 public:
  using Error::Error;
};

class CoarsenError : public Error {
 public:
  using Error::Error;
};

class BudgetInfeasible : public Error {
 public:
  using Error::Error;
};

// A token that the session never minted. Usually a hallucinated identifier
// coming back from the remote model.
class UnknownToken : public Error {
 public:
  explicit UnknownToken(std::string token)
      : Error("unknown token: " + token), token_(std::move(token)) {}
  const std::string& token() const noexcept { return token_; }

 private:
  std::string token_;
};

class GatewayError : public Error {
 public:
  using Error::Error;
};

class MalformedModelOutput : public Error {
 public:
  using Error::Error;
};

// A raw label was about to leave on the remote channel. This is a bug in the
// caller, never a model failure, and must not be swallowed.
class BoundaryViolation : public Error {
 public:
  BoundaryViolation(std::string label, std::string field)
      : Error("raw label '" + label + "' in field '" + field + "'"),
        label_(std::move(label)),
        field_(std::move(field)) {}
  const std::string& label() const noexcept { return label_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::string label_;
  std::string field_;
};

class LeakageGuardError : public Error {
 public:
  using Error::Error;
};

class KeyFileError : public Error {
 public:
  using Error::Error;
};

class StoreError : public Error {
 public:
  using Error::Error;
};

}  // namespace privgemo
