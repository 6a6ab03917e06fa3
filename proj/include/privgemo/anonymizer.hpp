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
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "privgemo/crypto.hpp"
#include "privgemo/grounding.hpp"
#include "privgemo/kg_store.hpp"

namespace privgemo::anon {

enum class RelationMode { kUtility, kPrivacy };
enum class DateGranularity { kYear, kMonth, kFull };

const char* to_string(RelationMode m);
const char* to_string(DateGranularity g);
RelationMode relation_mode_from_string(std::string_view s);
DateGranularity date_granularity_from_string(std::string_view s);

struct PrivacyPolicy {
  RelationMode relation_mode = RelationMode::kPrivacy;
  double anonymization_ratio = 1.0;
  std::size_t node_budget = 200;
  std::size_t cluster_min_size = 2;
  DateGranularity date_granularity = DateGranularity::kYear;
  double number_bucket_width = 10.0;
  bool expose_type_tags = true;

  /// Throws InvalidArgument on out-of-range fields.
  void validate() const;
  /// Short stable description, e.g. "privacy|1.00", stored with experience.
  std::string fingerprint() const;
};

/// Date truncated to the policy granularity; number mapped to its
/// "[lo,hi)" bucket; strings returned unchanged (they are pseudonymized).
/// Throws CoarsenError when the literal does not parse.
kg::Literal coarsen_literal(const kg::Literal& literal, const PrivacyPolicy& policy);

// ---------------------------------------------------------------------------
// Session mapping

enum class TokenKind { kEntity, kLiteral, kRelation, kGroup };

struct TokenTarget {
  TokenKind kind = TokenKind::kEntity;
  std::vector<std::uint32_t> ids;  // raw node ids (entity/literal/group) or relation id
  std::vector<std::string> labels;
};

/// Per-question pseudonym table. Tokens are HMAC-SHA256(secret, label)
/// truncated to 8 hex characters with an "ent_" or "rel_" prefix; a numeric
/// suffix resolves the rare collision. The secret is wiped by seal(), after
/// which nothing new can be minted.
class SessionMapping {
 public:
  /// Fresh 32-byte random secret.
  SessionMapping();
  /// Caller-provided secret; intended for tests.
  explicit SessionMapping(crypto::Bytes secret);

  SessionMapping(SessionMapping&&) noexcept = default;
  SessionMapping& operator=(SessionMapping&&) noexcept = default;

  const std::string& mint_entity(kg::NodeId id, std::string_view label);
  const std::string& mint_literal(kg::NodeId id, kg::LiteralKind kind, std::string_view raw);
  const std::string& mint_relation(kg::RelationId id, std::string_view label);
  const std::string& mint_group(const std::vector<kg::NodeId>& members,
                                const std::vector<std::string>& labels);
  /// Identity entry: the token is the raw label itself (plaintext entities).
  const std::string& keep_plain(kg::NodeId id, std::string_view label);
  const std::string& keep_plain_relation(kg::RelationId id, std::string_view label);

  std::optional<std::string> entity_token(kg::NodeId id) const;
  std::optional<std::string> relation_token(kg::RelationId id) const;
  bool is_plain(kg::NodeId id) const;
  bool is_plain_relation(kg::RelationId id) const;
  const TokenTarget* resolve(std::string_view token) const;

  /// Deterministic 64-bit seed derived from the secret.
  std::uint64_t derive_seed(std::string_view purpose) const;

  void seal() noexcept;
  bool sealed() const noexcept { return sealed_; }
  std::size_t size() const noexcept { return inverse_.size(); }
  const std::unordered_map<std::string, TokenTarget>& inverse() const noexcept { return inverse_; }

 private:
  const std::string& mint(std::string_view prefix, std::string_view key, TokenTarget target);
  void require_open() const;

  crypto::SecretBytes secret_;
  bool sealed_ = false;
  std::unordered_map<kg::NodeId, std::string> entity_forward_;
  std::unordered_map<kg::RelationId, std::string> relation_forward_;
  std::unordered_map<std::string, TokenTarget> inverse_;
  std::unordered_map<kg::NodeId, bool> plain_;
  std::unordered_set<kg::RelationId> plain_relations_;
};

// ---------------------------------------------------------------------------
// Anonymized view

using ViewIndex = std::uint32_t;

struct ViewNode {
  std::string token;    // internal handle, unique within the view
  std::string display;  // what crosses the remote channel
  std::vector<std::string> type_tags;
  std::vector<kg::NodeId> members;  // raw node ids; more than one for a supernode
  bool anchor = false;
  bool literal = false;
  std::optional<kg::LiteralKind> literal_kind;

  bool supernode() const noexcept { return members.size() > 1; }
};

struct ViewEdge {
  ViewIndex head = 0;
  ViewIndex tail = 0;
  std::string relation;            // displayed relation label
  std::vector<kg::TripleId> raw;   // raw triples this edge stands for
};

struct AnchorSketch {
  std::string token;
  std::string degree_bucket;
  std::map<std::string, std::size_t> type_histogram;
  std::size_t radius_reached = 0;
};

struct StructureSketch {
  std::vector<AnchorSketch> anchors;
  std::size_t entity_count = 0;
  std::size_t triple_count = 0;
};

/// One step along a view edge, forward (head to tail) or backward.
struct PathStep {
  std::uint32_t edge = 0;
  bool forward = true;

  friend bool operator==(const PathStep&, const PathStep&) = default;
  friend auto operator<=>(const PathStep&, const PathStep&) = default;
};

struct RawPath {
  std::vector<kg::TripleId> triples;
  std::vector<kg::NodeId> nodes;  // triples.size() + 1 entries
};

class AnonymizedView {
 public:
  std::vector<ViewNode> nodes;
  std::vector<ViewEdge> edges;
  std::vector<ViewIndex> anchors;     // topic-set order
  std::vector<kg::NodeId> anchor_raw;  // same order, raw ids
  StructureSketch sketch;
  std::size_t raw_entity_count = 0;  // before sanitization
  std::size_t raw_triple_count = 0;

  /// Rebuilds adjacency and lookup tables; call after editing nodes/edges.
  void reindex();

  std::optional<ViewIndex> find_token(std::string_view token) const;
  std::optional<ViewIndex> find_display(std::string_view display) const;
  std::optional<ViewIndex> node_of_raw(kg::NodeId raw) const;
  const std::vector<std::uint32_t>& out_edges(ViewIndex v) const { return out_[v]; }
  const std::vector<std::uint32_t>& in_edges(ViewIndex v) const { return in_[v]; }
  /// Incident edges of `v` as steps leaving `v`, ordered by (relation,
  /// neighbour, direction).
  std::vector<PathStep> steps_from(ViewIndex v) const;
  ViewIndex step_target(ViewIndex from, const PathStep& step) const;

  std::size_t entity_count() const noexcept { return nodes.size(); }
  std::size_t triple_count() const noexcept { return edges.size(); }
  /// 1 - after/before, clamped to [0, 1].
  double reduction_ratio() const noexcept;

  /// Sketch header lines ("# ...") followed by "display<TAB>relation<TAB>display".
  std::string serialize() const;

  /// Every concrete raw path an anonymized path stands for (capped).
  std::vector<RawPath> expand(ViewIndex start, const std::vector<PathStep>& steps,
                              const kg::KnowledgeGraph& g, std::size_t cap = 64) const;

 private:
  std::vector<std::vector<std::uint32_t>> out_;
  std::vector<std::vector<std::uint32_t>> in_;
  std::unordered_map<std::string, ViewIndex> by_token_;
  std::unordered_map<std::string, ViewIndex> by_display_;
  std::unordered_map<kg::NodeId, ViewIndex> by_raw_;
};

// ---------------------------------------------------------------------------
// Operations

/// Mints tokens for every entity, literal and relation of `sub`. With a
/// ratio below 1, a secret-seeded sample of non-anchor entities keeps raw
/// labels; ratio 0 is the identity map.
SessionMapping build_mapping(const grounding::RawSubgraph& sub, const PrivacyPolicy& policy);
SessionMapping build_mapping(const grounding::RawSubgraph& sub, const PrivacyPolicy& policy,
                             SessionMapping mapping);

/// Pseudonymized, literal-coarsened view of `sub` (no structural changes).
AnonymizedView build_view(const grounding::RawSubgraph& sub, const SessionMapping& mapping,
                          const PrivacyPolicy& policy);

/// Supernode clustering, then budget pruning, then the sketch. Mints group
/// tokens in `mapping`.
AnonymizedView sanitize_structure(AnonymizedView view, SessionMapping& mapping,
                                  const PrivacyPolicy& policy);

StructureSketch build_sketch(const AnonymizedView& view);

/// Raw labels that must never reach the remote channel for this session.
std::vector<std::string> boundary_dictionary(const grounding::RawSubgraph& sub,
                                             const SessionMapping& mapping,
                                             const PrivacyPolicy& policy);

/// Replaces every token in `text` by its raw label; a supernode becomes
/// "{a, b, c}". Throws UnknownToken for a token the session never minted.
std::string deanonymize_text(std::string_view text, const SessionMapping& mapping);

/// Everything the controller needs from the privacy stage of one question.
struct Session {
  SessionMapping mapping;
  AnonymizedView view;
  std::vector<std::string> dictionary;
  PrivacyPolicy policy;

  /// Raw text to its anonymized form: each pseudonymized label is replaced,
  /// case-insensitively and on word boundaries, by its view display.
  std::string anon_text(std::string_view raw_text, const kg::KnowledgeGraph& g) const;
};

/// build_mapping, build_view, sanitize_structure, then seal.
Session anonymize(const grounding::RawSubgraph& sub, const PrivacyPolicy& policy);

}  // namespace privgemo::anon
