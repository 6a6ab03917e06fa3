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
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace privgemo::gateway {

using Vector = std::vector<double>;

/// Cosine of two equal-length vectors; 0 when either has zero norm.
double cosine(std::span<const double> a, std::span<const double> b);

/// Dense text encoder. Implementations must be deterministic and return
/// unit-norm vectors of dimension() entries.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::size_t dimension() const noexcept = 0;
  virtual Vector embed(std::string_view text) const = 0;
  virtual std::string name() const = 0;

  double similarity(std::string_view a, std::string_view b) const {
    return cosine(embed(a), embed(b));
  }
};

/// Lower-cased character trigrams of " text ", hashed (FNV-1a) into
/// `dimension` buckets, then L2-normalised.
class HashingEmbedder final : public Embedder {
 public:
  static constexpr std::size_t kDefaultDimension = 256;

  explicit HashingEmbedder(std::size_t dimension = kDefaultDimension);
  std::size_t dimension() const noexcept override { return dimension_; }
  Vector embed(std::string_view text) const override;
  std::string name() const override { return "hashing-trigram"; }

 private:
  std::size_t dimension_;
};

/// "hashing" (default) is the only built-in backend.
std::unique_ptr<Embedder> make_embedder(std::string_view backend);

}  // namespace privgemo::gateway
