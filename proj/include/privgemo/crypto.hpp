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

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Thin wrappers over OpenSSL primitives.
namespace privgemo::crypto {

using Bytes = std::vector<std::uint8_t>;

Bytes random_bytes(std::size_t n);
std::array<std::uint8_t, 32> hmac_sha256(std::span<const std::uint8_t> key, std::string_view message);
std::array<std::uint8_t, 32> sha256(std::string_view message);
std::string to_hex(std::span<const std::uint8_t> bytes);
std::optional<Bytes> from_hex(std::string_view hex);
std::string sha256_hex(std::string_view message);

/// AES-256-GCM. Output layout: 12-byte nonce | ciphertext | 16-byte tag.
Bytes seal_aes_gcm(std::span<const std::uint8_t> key, std::string_view plaintext);
/// Throws StoreError when authentication fails.
std::string open_aes_gcm(std::span<const std::uint8_t> key, std::span<const std::uint8_t> sealed);

void secure_zero(std::span<std::uint8_t> bytes) noexcept;

/// Owning byte buffer that is wiped on destruction and on clear().
class SecretBytes {
 public:
  SecretBytes() = default;
  explicit SecretBytes(Bytes bytes) : bytes_(std::move(bytes)) {}
  SecretBytes(const SecretBytes&) = delete;
  SecretBytes& operator=(const SecretBytes&) = delete;
  SecretBytes(SecretBytes&& other) noexcept : bytes_(std::move(other.bytes_)) { other.bytes_.clear(); }
  SecretBytes& operator=(SecretBytes&& other) noexcept {
    if (this != &other) {
      clear();
      bytes_ = std::move(other.bytes_);
      other.bytes_.clear();
    }
    return *this;
  }
  ~SecretBytes() { clear(); }

  void clear() noexcept {
    secure_zero(bytes_);
    bytes_.clear();
  }
  bool empty() const noexcept { return bytes_.empty(); }
  std::span<const std::uint8_t> view() const noexcept { return bytes_; }

 private:
  Bytes bytes_;
};

}  // namespace privgemo::crypto
