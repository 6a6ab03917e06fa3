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

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "privgemo/anonymizer.hpp"
#include "privgemo/crypto.hpp"
#include "privgemo/embedder.hpp"
#include "privgemo/gateway.hpp"
#include "privgemo/retrieval.hpp"

namespace privgemo::memory {

inline constexpr double kQuestionWeight = 0.5;
inline constexpr double kIndicatorWeight = 0.5;
inline constexpr double kSimilarityWeight = 0.7;
inline constexpr double kHitWeight = 0.3;
inline constexpr std::size_t kRetrieveWidth = 5;
inline constexpr std::size_t kBufferCapacity = 1000;
inline constexpr std::size_t kPoolCapacity = 10000;
// Records at or above this hybrid score steer exploration.
inline constexpr double kUsefulScore = 0.6;
inline constexpr double kPolicyRatioTolerance = 0.2;
inline constexpr const char* kAnyPolicy = "*";

struct Step {
  retrieval::Mode mode = retrieval::Mode::kTopic;
  std::size_t depth = 1;

  friend bool operator==(const Step&, const Step&) = default;
};
/// "Topic@2"
std::string to_string(const Step& s);
std::optional<Step> step_from_string(std::string_view s);

struct Outcome {
  bool sufficient = false;
  std::vector<std::string> warnings;  // "Mode@d: note"
};

struct ExperienceRecord {
  std::uint64_t id = 0;
  std::string anon_indicator;  // placeholder form
  std::size_t d_predict = 1;
  std::vector<Step> trajectory;
  std::vector<std::string> path_templates;
  Outcome outcome;
  gateway::Vector q_embedding;
  gateway::Vector i_embedding;
  std::string policy_tag;
  std::uint64_t hit_count = 0;
  std::uint64_t last_used = 0;  // logical clock
  bool exemplar = false;
  bool payload_sealed = false;
};

/// Equal relation mode and ratios within the tolerance; the wildcard tag
/// matches every policy.
bool policy_compatible(std::string_view tag, const anon::PrivacyPolicy& policy);

/// Reads a 32-byte key stored raw or as 64 hex characters.
crypto::SecretBytes load_key_file(const std::filesystem::path& path);
/// Writes a fresh random key (hex) with owner-only permissions.
void create_key_file(const std::filesystem::path& path);
/// The key file named by PRIVGEMO_MEMORY_KEY, else `configured`.
std::filesystem::path resolve_key_path(const std::filesystem::path& configured);

/// Experience records with exact vector search. Optionally backed by an
/// on-disk store: an append-only log of AES-GCM sealed payloads plus a
/// sidecar file of plaintext embeddings. Many readers, one writer.
class ExperiencePool {
 public:
  explicit ExperiencePool(std::size_t dimension, std::size_t capacity = kPoolCapacity);
  ~ExperiencePool();
  ExperiencePool(ExperiencePool&&) noexcept;
  ExperiencePool& operator=(ExperiencePool&&) noexcept;

  /// Opens (or creates) the store in `dir`. A new store is seeded with the
  /// cold-start exemplars. Throws StoreError on a corrupt or foreign store.
  static ExperiencePool open(const std::filesystem::path& dir, crypto::SecretBytes key,
                             const gateway::Embedder& embedder, std::size_t capacity = kPoolCapacity);

  std::size_t dimension() const noexcept { return dimension_; }
  std::size_t size() const;
  bool persistent() const noexcept;
  std::vector<ExperienceRecord> snapshot() const;
  std::optional<ExperienceRecord> find(std::uint64_t id) const;

  /// Appends a record (assigning its id); prunes low-value records beyond
  /// capacity. Throws InvalidArgument on a dimension mismatch.
  std::uint64_t add(ExperienceRecord record);
  /// Adds the templates of `record` to `id` and counts a hit.
  void merge(std::uint64_t id, const std::vector<std::string>& templates);
  void record_hits(const std::vector<std::uint64_t>& ids);
  void clear();
  /// Seeds the five built-in exemplars when the pool is empty.
  void ensure_seeded(const gateway::Embedder& embedder);

  nlohmann::json export_bundle() const;
  /// Appends every record of `bundle`; returns how many were imported.
  std::size_t import_bundle(const nlohmann::json& bundle);

  std::uint64_t tick();

 private:
  struct Store;

  void prune_locked();
  void append_locked(const ExperienceRecord& r);

  std::size_t dimension_;
  std::size_t capacity_;
  mutable std::shared_mutex mutex_;
  std::vector<ExperienceRecord> records_;
  std::uint64_t next_id_ = 1;
  std::uint64_t clock_ = 0;
  std::unique_ptr<Store> store_;
};

/// Recently used records, scored by 0.7 * hybrid + 0.3 * count/(count+1).
class HighFreqBuffer {
 public:
  explicit HighFreqBuffer(std::size_t capacity = kBufferCapacity) : capacity_(capacity) {}

  void touch(std::uint64_t id, double score, std::uint64_t clock);
  bool contains(std::uint64_t id) const;
  std::vector<std::uint64_t> ids() const;
  std::size_t size() const;
  std::size_t capacity() const noexcept { return capacity_; }

 private:
  struct Entry {
    double score = 0.0;
    std::uint64_t last_used = 0;
  };
  std::size_t capacity_;
  mutable std::mutex mutex_;
  std::unordered_map<std::uint64_t, Entry> entries_;
};

double hybrid_score(const ExperienceRecord& r, const gateway::Vector& q, const gateway::Vector& i);
double buffer_score(double hybrid, std::uint64_t hit_count);

struct ScoredRecord {
  ExperienceRecord record;
  double hybrid = 0.0;
  double buffer = 0.0;
};

struct ControlHints {
  bool call_brain = true;
  retrieval::Mode mode = retrieval::Mode::kTopic;
  std::size_t depth = 1;
  std::vector<std::string> warnings;
  std::vector<std::string> templates;
};

struct ExperienceQuery {
  std::string question;
  /// Placeholder-form indicator. Without one, the question similarity
  /// stands in for both terms of the hybrid score.
  std::optional<std::string> indicator;
  std::size_t d_predict = retrieval::kMaxDepth;
  std::size_t d_max = retrieval::kMaxDepth;
};

struct ExperienceResult {
  std::vector<ScoredRecord> records;  // best first
  ControlHints hints;
};

/// Exact top-`w_exp` by buffer score over compatible records (ties by id);
/// hit counts of the returned records are incremented afterwards.
ExperienceResult get_exp(ExperiencePool& pool, HighFreqBuffer& buffer, const ExperienceQuery& query,
                         const anon::PrivacyPolicy& policy, std::size_t w_exp, const gateway::Embedder& embedder);

/// (Topic, min(d_predict, d_max)) unless a useful successful record starts
/// elsewhere; depth clamped to [1, d_max].
Step init_policy(const std::vector<ScoredRecord>& records, std::size_t d_predict, std::size_t d_max);

struct NodeProgress {
  Step at;
  std::size_t d_predict = 1;
  std::size_t d_max = retrieval::kMaxDepth;
};

struct Suggestion {
  Step next;
  bool prune = false;
  std::string reason;
};

Suggestion next_step(const std::vector<ScoredRecord>& records, const NodeProgress& node);

struct Artifacts {
  std::string question;
  std::string anon_indicator;
  std::size_t d_predict = 1;
  std::vector<Step> trajectory;
  std::vector<std::string> templates;
  Outcome outcome;
};

/// No-op unless the outcome is sufficient. Throws LeakageGuardError when a
/// template or the indicator carries a raw label. An existing record with
/// the same indicator and question absorbs the templates instead of a new
/// record being added. Returns the id written or merged into.
std::optional<std::uint64_t> write_back_if_success(ExperiencePool& pool, HighFreqBuffer& buffer,
                                                   const Artifacts& artifacts, const anon::PrivacyPolicy& policy,
                                                   const gateway::BoundaryScanner& guard,
                                                   const gateway::Embedder& embedder);

}  // namespace privgemo::memory
