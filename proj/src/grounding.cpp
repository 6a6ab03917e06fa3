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

#include "privgemo/grounding.hpp"

#include <algorithm>
#include <deque>

#include <nlohmann/json.hpp>

#include "privgemo/errors.hpp"

namespace privgemo::grounding {

std::vector<kg::NodeId> TopicEntitySet::ids() const {
  std::vector<kg::NodeId> out;
  out.reserve(items.size());
  for (const auto& t : items) out.push_back(t.entity);
  return out;
}

bool TopicEntitySet::contains(kg::NodeId id) const {
  return std::any_of(items.begin(), items.end(), [&](const TopicEntity& t) { return t.entity == id; });
}

bool RawSubgraph::contains(kg::NodeId id) const {
  return std::binary_search(members.begin(), members.end(), id);
}

std::size_t RawSubgraph::entity_count() const {
  return static_cast<std::size_t>(std::count_if(members.begin(), members.end(), [&](kg::NodeId id) {
    return !parent->node(id).is_literal();
  }));
}

std::vector<std::string> extract_mentions(const Question& q, gateway::Gateway& gateway) {
  if (q.text.empty()) throw InvalidArgument("question text is empty");
  const std::string reply = gateway.hand_call("hand.entity_extraction", {{"question", q.text}});
  const auto j = gateway::parse_json_reply(reply);
  if (!j.contains("mentions") || !j["mentions"].is_array()) {
    throw MalformedModelOutput("entity extraction reply lacks a 'mentions' array");
  }
  std::vector<std::string> out;
  for (const auto& m : j["mentions"]) {
    if (!m.is_string()) throw MalformedModelOutput("non-string mention");
    if (!m.get<std::string>().empty()) out.push_back(m.get<std::string>());
  }
  return out;
}

TopicEntitySet align_mentions(const std::vector<std::string>& mentions, const kg::KnowledgeGraph& g,
                              const gateway::Embedder& embedder, std::size_t top_k, double floor) {
  if (top_k == 0) throw InvalidArgument("top_k must be at least 1");
  std::vector<gateway::Vector> label_vectors;
  std::vector<kg::NodeId> entity_ids;
  for (const auto& n : g.nodes()) {
    if (n.is_literal()) continue;
    entity_ids.push_back(n.id);
    label_vectors.push_back(embedder.embed(n.label));
  }

  TopicEntitySet out;
  for (const auto& mention : mentions) {
    if (mention.empty()) continue;
    const auto mv = embedder.embed(mention);
    const std::string lowered = gateway::to_lower(mention);
    std::vector<TopicEntity> scored;
    for (std::size_t i = 0; i < entity_ids.size(); ++i) {
      const auto& label = g.node(entity_ids[i]).label;
      double s = gateway::to_lower(label) == lowered ? 1.0 : gateway::cosine(mv, label_vectors[i]);
      if (s >= floor) scored.push_back({entity_ids[i], mention, s});
    }
    std::sort(scored.begin(), scored.end(), [](const TopicEntity& a, const TopicEntity& b) {
      return a.score != b.score ? a.score > b.score : a.entity < b.entity;
    });
    std::size_t kept = 0;
    for (const auto& cand : scored) {
      if (kept == top_k) break;
      if (out.contains(cand.entity)) continue;
      out.items.push_back(cand);
      ++kept;
    }
  }
  if (out.empty()) throw NoAlignment("no mention aligned above the similarity floor");
  std::stable_sort(out.items.begin(), out.items.end(), [](const TopicEntity& a, const TopicEntity& b) {
    return a.score != b.score ? a.score > b.score : a.entity < b.entity;
  });
  return out;
}

RawSubgraph detect_subgraph(const kg::KnowledgeGraph& g, const TopicEntitySet& t, std::size_t d_max) {
  if (t.empty()) throw InvalidArgument("topic entity set is empty");
  if (d_max < 1) throw InvalidArgument("d_max must be at least 1");
  std::vector<std::size_t> dist(g.node_count(), SIZE_MAX);
  std::deque<kg::NodeId> queue;
  RawSubgraph sub;
  sub.parent = &g;
  sub.radius = d_max;
  for (const auto& a : t.items) {
    if (!g.valid(a.entity)) throw UnknownEntity("anchor id out of range");
    sub.anchors.push_back(a.entity);
    if (dist[a.entity] == SIZE_MAX) {
      dist[a.entity] = 0;
      queue.push_back(a.entity);
    }
  }
  while (!queue.empty()) {
    const kg::NodeId u = queue.front();
    queue.pop_front();
    sub.members.push_back(u);
    if (dist[u] == d_max) continue;
    for (kg::TripleId id : g.neighbors(u, kg::Direction::kBoth)) {
      const auto& tr = g.triple(id);
      const kg::NodeId v = tr.head == u ? tr.tail : tr.head;
      if (dist[v] == SIZE_MAX) {
        dist[v] = dist[u] + 1;
        queue.push_back(v);
      }
    }
  }
  std::sort(sub.members.begin(), sub.members.end());
  for (kg::NodeId u : sub.members) {
    for (kg::TripleId id : g.out_edges(u)) {
      if (dist[g.triple(id).tail] != SIZE_MAX) sub.triples.push_back(id);
    }
  }
  std::sort(sub.triples.begin(), sub.triples.end());
  return sub;
}

}  // namespace privgemo::grounding
