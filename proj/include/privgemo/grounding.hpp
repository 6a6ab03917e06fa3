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

#include <optional>
#include <string>
#include <vector>

#include "privgemo/embedder.hpp"
#include "privgemo/gateway.hpp"
#include "privgemo/kg_store.hpp"

namespace privgemo::grounding {

struct Question {
  std::string id;
  std::string text;
  std::vector<std::string> gold_answers;
};

struct TopicEntity {
  kg::NodeId entity = 0;
  std::string mention;
  double score = 0.0;
};

/// Aligned anchors, ordered by score (descending) then entity id.
struct TopicEntitySet {
  std::vector<TopicEntity> items;

  bool empty() const noexcept { return items.empty(); }
  std::size_t size() const noexcept { return items.size(); }
  std::vector<kg::NodeId> ids() const;
  bool contains(kg::NodeId id) const;
};

struct RawSubgraph {
  const kg::KnowledgeGraph* parent = nullptr;
  std::vector<kg::NodeId> members;    // sorted
  std::vector<kg::TripleId> triples;  // sorted; ids into the parent graph
  std::vector<kg::NodeId> anchors;    // topic-set order
  std::size_t radius = 0;

  bool contains(kg::NodeId id) const;
  std::size_t entity_count() const;
};

inline constexpr double kAlignmentFloor = 0.35;

/// Asks the Hand for the entity mentions of `q`.
std::vector<std::string> extract_mentions(const Question& q, gateway::Gateway& gateway);

/// Top-`top_k` entities per mention by label-embedding cosine. An exact
/// case-insensitive label match scores 1.0. Candidates under `floor` are
/// dropped; throws NoAlignment when nothing survives.
TopicEntitySet align_mentions(const std::vector<std::string>& mentions, const kg::KnowledgeGraph& g,
                              const gateway::Embedder& embedder, std::size_t top_k = 1,
                              double floor = kAlignmentFloor);

/// Members are every node within `d_max` undirected hops of an anchor; the
/// triples are those induced on the members.
RawSubgraph detect_subgraph(const kg::KnowledgeGraph& g, const TopicEntitySet& t, std::size_t d_max);

}  // namespace privgemo::grounding
