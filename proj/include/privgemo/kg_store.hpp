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
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace privgemo::kg {

using NodeId = std::uint32_t;
using RelationId = std::uint32_t;
using TripleId = std::uint32_t;

enum class NodeKind : std::uint8_t { kEntity, kLiteral };
enum class LiteralKind : std::uint8_t { kDate, kNumber, kString };
enum class Direction : std::uint8_t { kOut, kIn, kBoth };
enum class GraphFormat : std::uint8_t { kTsv, kNTriples };

const char* to_string(LiteralKind kind);
std::optional<LiteralKind> literal_kind_from_string(std::string_view s);

struct Literal {
  LiteralKind kind = LiteralKind::kString;
  std::string raw;
};

struct DateParts {
  int year = 0;
  std::optional<int> month;
  std::optional<int> day;
};

/// Accepts an ISO-8601 prefix: YYYY, YYYY-MM, YYYY-MM-DD, optionally followed
/// by a time part starting with 'T'.
std::optional<DateParts> parse_iso_date(std::string_view s);
std::optional<double> parse_decimal(std::string_view s);
bool well_formed(const Literal& literal);

/// A vertex of the graph. Entities and tail-position literals share one id
/// space so traversal code does not need two code paths; `kind` tells them
/// apart.
struct Node {
  NodeId id = 0;
  NodeKind kind = NodeKind::kEntity;
  std::string label;  // surface string, or the raw literal value
  LiteralKind literal_kind = LiteralKind::kString;
  std::vector<std::string> type_tags;  // sorted, unique; empty for literals

  bool is_literal() const noexcept { return kind == NodeKind::kLiteral; }
};

struct RelationRef {
  RelationId id = 0;
  std::string label;
  std::optional<std::string> cluster_label;
};

struct Triple {
  NodeId head = 0;
  RelationId relation = 0;
  NodeId tail = 0;

  friend bool operator==(const Triple&, const Triple&) = default;
};

// Coarse schema cluster of a dotted relation label: everything before the
// last dot ("people.person.nationality" -> "people.person").
std::optional<std::string> relation_cluster(std::string_view relation_label);

/// Immutable in-memory triple store.
///
/// Ids are assigned in first-appearance order of the input, so two loads of
/// the same file agree on every id and on every adjacency ordering. Adjacency
/// buckets are sorted by (relation id, neighbour id).
class KnowledgeGraph {
 public:
  class Builder;

  static KnowledgeGraph load(const std::filesystem::path& path,
                             GraphFormat format = GraphFormat::kTsv);
  static KnowledgeGraph parse(std::istream& in, GraphFormat format = GraphFormat::kTsv);

  std::size_t node_count() const noexcept { return nodes_.size(); }
  std::size_t entity_count() const noexcept { return nodes_.size() - literal_count_; }
  std::size_t literal_count() const noexcept { return literal_count_; }
  std::size_t relation_count() const noexcept { return relations_.size(); }
  std::size_t triple_count() const noexcept { return triples_.size(); }
  std::size_t duplicate_warnings() const noexcept { return duplicate_warnings_; }

  std::span<const Node> nodes() const noexcept { return nodes_; }
  std::span<const RelationRef> relations() const noexcept { return relations_; }
  std::span<const Triple> triples() const noexcept { return triples_; }

  const Node& node(NodeId id) const;
  const RelationRef& relation(RelationId id) const;
  const Triple& triple(TripleId id) const;
  bool valid(NodeId id) const noexcept { return id < nodes_.size(); }

  std::optional<NodeId> find_entity(std::string_view label) const;
  std::optional<RelationId> find_relation(std::string_view label) const;
  std::optional<TripleId> find_triple(NodeId head, RelationId relation, NodeId tail) const;

  std::span<const TripleId> out_edges(NodeId id) const;
  std::span<const TripleId> in_edges(NodeId id) const;

  /// Triples incident to `id`; `kBoth` merges both buckets in
  /// (relation, neighbour, direction) order.
  std::vector<TripleId> neighbors(NodeId id, Direction direction) const;

  /// Undirected shortest-path length from `a` to `b`, or nullopt beyond `cap`.
  std::optional<std::size_t> hop_distance(NodeId a, NodeId b, std::size_t cap) const;

  /// "(head, relation, tail)" with raw labels.
  std::string describe(TripleId id) const;

 private:
  std::vector<Node> nodes_;
  std::vector<RelationRef> relations_;
  std::vector<Triple> triples_;
  std::vector<std::vector<TripleId>> out_index_;
  std::vector<std::vector<TripleId>> in_index_;
  std::unordered_map<std::string, NodeId> entity_by_label_;
  std::unordered_map<std::string, RelationId> relation_by_label_;
  std::size_t literal_count_ = 0;
  std::size_t duplicate_warnings_ = 0;
};

/// Incremental construction; used by the file loaders and by tests that need
/// synthetic graphs.
class KnowledgeGraph::Builder {
 public:
  Builder();
  ~Builder();
  Builder(Builder&&) noexcept;
  Builder& operator=(Builder&&) noexcept;

  /// Returns false (and counts a duplicate warning) if the triple exists.
  bool add(std::string_view head, std::string_view relation, std::string_view tail);
  bool add_literal(std::string_view head, std::string_view relation, const Literal& tail);

  KnowledgeGraph build() &&;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace privgemo::kg
