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

#include <algorithm>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "privgemo/anonymizer.hpp"
#include "privgemo/grounding.hpp"
#include "privgemo/kg_store.hpp"

namespace privgemo::test {

// Exhaustive covering-path enumeration over walks from the first anchor.
// A walk is accepted when its anchor visits are exactly the given order,
// each stretch between anchors (and the tail) repeats no node, and its
// length falls in (m*(d-1), m*d].
inline std::set<std::pair<anon::ViewIndex, std::vector<anon::PathStep>>> brute_force_paths(
    const anon::AnonymizedView& view, const std::vector<anon::ViewIndex>& order, bool tail, std::size_t d) {
  std::set<std::pair<anon::ViewIndex, std::vector<anon::PathStep>>> out;
  const std::size_t m = order.size();
  tail = tail || m == 1;
  const std::size_t hi = m * d, lo = m * (d - 1);
  const std::set<anon::ViewIndex> anchors(order.begin(), order.end());
  std::vector<anon::PathStep> walk;
  std::vector<anon::ViewIndex> stretch{order[0]};
  auto dfs = [&](auto&& self, anon::ViewIndex at, std::size_t next) -> void {
    const bool done = next == m;
    if (done && walk.size() > lo && walk.size() <= hi) {
      if (tail ? at != order.back() : at == order.back()) out.insert({order[0], walk});
    }
    if (walk.size() == hi) return;
    if (done && !tail) return;
    for (const auto& step : view.steps_from(at)) {
      const auto to = view.step_target(at, step);
      if (std::find(stretch.begin(), stretch.end(), to) != stretch.end()) continue;
      if (anchors.count(to)) {
        if (done || to != order[next]) continue;
        auto saved = stretch;
        stretch.assign(1, to);
        walk.push_back(step);
        self(self, to, next + 1);
        walk.pop_back();
        stretch = std::move(saved);
      } else {
        stretch.push_back(to);
        walk.push_back(step);
        self(self, to, next);
        walk.pop_back();
        stretch.pop_back();
      }
    }
  };
  dfs(dfs, order[0], 1);
  return out;
}

struct RandomCase {
  kg::KnowledgeGraph graph;
  std::vector<std::string> anchors;
};

// Sparse random graph over n nodes with a handful of relation labels.
inline RandomCase random_case(std::mt19937_64& rng, std::size_t max_nodes = 50, std::size_t max_anchors = 4) {
  std::uniform_int_distribution<std::size_t> nd(3, max_nodes);
  const std::size_t n = nd(rng);
  const std::size_t e = n + n / 5 + 1;
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::uniform_int_distribution<int> rel(0, 3);
  kg::KnowledgeGraph::Builder b;
  for (std::size_t i = 0; i < n; ++i) b.add("n" + std::to_string(i), "r.s.t" + std::to_string(rel(rng)), "n" + std::to_string(pick(rng)));
  for (std::size_t i = n; i < e; ++i) {
    b.add("n" + std::to_string(pick(rng)), "r.s.t" + std::to_string(rel(rng)), "n" + std::to_string(pick(rng)));
  }
  RandomCase c{std::move(b).build(), {}};
  std::uniform_int_distribution<std::size_t> na(1, std::min(max_anchors, n));
  const std::size_t k = na(rng);
  std::set<std::string> chosen;
  std::uniform_int_distribution<std::size_t> pick_id(0, c.graph.node_count() - 1);
  while (chosen.size() < k) {
    const auto label = c.graph.node(static_cast<kg::NodeId>(pick_id(rng))).label;
    if (chosen.insert(label).second) c.anchors.push_back(label);
  }
  return c;
}

inline grounding::RawSubgraph whole_graph(const kg::KnowledgeGraph& g, const std::vector<std::string>& anchors) {
  grounding::TopicEntitySet t;
  for (const auto& a : anchors) t.items.push_back({*g.find_entity(a), a, 1.0});
  return grounding::detect_subgraph(g, t, g.node_count());
}

}  // namespace privgemo::test
