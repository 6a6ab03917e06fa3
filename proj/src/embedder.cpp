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

#include "privgemo/embedder.hpp"

#include <cctype>
#include <cmath>
#include <cstdint>

#include "privgemo/errors.hpp"

namespace privgemo::gateway {

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidArgument("cosine of vectors with different dimensions");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

HashingEmbedder::HashingEmbedder(std::size_t dimension) : dimension_(dimension) {
  if (dimension == 0) throw InvalidArgument("embedder dimension must be positive");
}

Vector HashingEmbedder::embed(std::string_view text) const {
  if (text.empty()) throw InvalidArgument("cannot embed empty text");
  std::string padded;
  padded.reserve(text.size() + 2);
  padded.push_back(' ');
  for (unsigned char c : text) padded.push_back(static_cast<char>(std::tolower(c)));
  padded.push_back(' ');

  Vector v(dimension_, 0.0);
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
    std::uint64_t h = 14695981039346656037ull;
    for (std::size_t k = i; k < i + 3; ++k) {
      h ^= static_cast<unsigned char>(padded[k]);
      h *= 1099511628211ull;
    }
    v[h % dimension_] += 1.0;
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

std::unique_ptr<Embedder> make_embedder(std::string_view backend) {
  if (backend.empty() || backend == "hashing") return std::make_unique<HashingEmbedder>();
  throw InvalidArgument("unknown embedder backend '" + std::string(backend) + "'");
}

}  // namespace privgemo::gateway
