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

#include "privgemo/retrieval.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "privgemo/errors.hpp"
#include "privgemo/grounding.hpp"

namespace privgemo::retrieval {

using anon::AnonymizedView;
using anon::PathStep;
using anon::ViewIndex;

const char* to_string(Mode m) {
  switch (m) {
    case Mode::kTopic: return "Topic";
    case Mode::kRefine: return "Refine";
    case Mode::kPredict: return "Predict";
  }
  return "Topic";
}

std::optional<Mode> mode_from_string(std::string_view s) {
  if (s == "Topic") return Mode::kTopic;
  if (s == "Refine") return Mode::kRefine;
  if (s == "Predict") return Mode::kPredict;
  return std::nullopt;
}

const char* to_string(IndicatorSource s) {
  switch (s) {
    case IndicatorSource::kBrain: return "brain";
    case IndicatorSource::kHand: return "hand";
    case IndicatorSource::kMemory: return "memory";
    case IndicatorSource::kFallback: return "fallback";
  }
  return "fallback";
}

// ---------------------------------------------------------------------------
// Indicator

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string strip_parentheticals(std::string_view s) {
  std::string out;
  int depth = 0;
  for (char c : s) {
    if (c == '(') {
      ++depth;
    } else if (c == ')' && depth > 0) {
      --depth;
    } else if (depth == 0) {
      out.push_back(c);
    }
  }
  return trim(out);
}

std::vector<std::string> split_arrows(std::string_view text) {
  std::vector<std::string> parts;
  std::size_t pos = 0;
  while (true) {
    const auto next = text.find(" -- ", pos);
    parts.push_back(strip_parentheticals(text.substr(pos, next == std::string_view::npos ? next : next - pos)));
    if (next == std::string_view::npos) break;
    pos = next + 4;
  }
  return parts;
}

// "{ent_x:type}" or "ent_x" to the view node it names.
std::optional<ViewIndex> lookup_symbol(const AnonymizedView& view, std::string_view raw) {
  std::string s = trim(raw);
  if (s.size() >= 2 && s.front() == '{' && s.back() == '}') s = s.substr(1, s.size() - 2);
  if (auto v = view.find_token(s)) return v;
  if (auto v = view.find_display(s)) return v;
  if (const auto colon = s.rfind(':'); colon != std::string::npos) {
    const auto head = s.substr(0, colon);
    if (auto v = view.find_token(head)) return v;
    if (auto v = view.find_display(head)) return v;
  }
  return std::nullopt;
}

bool is_answer_marker(const std::string& slot) {
  const auto lowered = gateway::to_lower(slot);
  return lowered == "ans" || lowered == "?ans" || lowered == "?answer";
}

}  // namespace

std::vector<ViewIndex> Indicator::anchors() const {
  std::vector<ViewIndex> out;
  for (const auto& s : slots) {
    if (s.anchor) out.push_back(*s.anchor);
  }
  return out;
}

bool Indicator::answer_outside() const {
  std::optional<std::size_t> first, last;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (!slots[i].anchor) continue;
    if (!first) first = i;
    last = i;
  }
  return !first || answer_slot < *first || answer_slot > *last;
}

bool Indicator::answer_first() const {
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].anchor) return answer_slot < i;
  }
  return false;
}

std::string Indicator::text() const {
  std::string out;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (i) out += " -- " + relations[i - 1] + " -- ";
    out += slots[i].text;
  }
  return out;
}

std::string Indicator::canonical() const {
  std::string out;
  std::size_t topic = 0;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (i) out += " -- " + relations[i - 1] + " -- ";
    if (slots[i].anchor) {
      out += "TOPIC_" + std::to_string(++topic);
    } else if (i == answer_slot) {
      out += "ANS";
    } else {
      out += "X";
    }
  }
  return out;
}

Indicator parse_indicator(std::string_view text, const AnonymizedView& view, IndicatorSource source) {
  const auto parts = split_arrows(trim(text));
  if (parts.size() < 3 || parts.size() % 2 == 0) {
    throw MalformedModelOutput("indicator needs alternating slots and relations: '" + std::string(text) + "'");
  }
  Indicator ind;
  ind.source = source;
  std::set<ViewIndex> seen;
  std::optional<std::size_t> explicit_answer, last_query;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i % 2 == 1) {
      ind.relations.push_back(parts[i]);
      continue;
    }
    IndicatorSlot slot{parts[i], std::nullopt};
    const std::size_t index = ind.slots.size();
    if (is_answer_marker(slot.text)) {
      explicit_answer = index;
    } else if (!slot.text.empty() && slot.text.front() == '?') {
      last_query = index;
    } else if (auto v = lookup_symbol(view, slot.text)) {
      const bool is_anchor = std::find(view.anchors.begin(), view.anchors.end(), *v) != view.anchors.end();
      if (is_anchor && seen.insert(*v).second) slot.anchor = v;
    }
    ind.slots.push_back(std::move(slot));
  }
  if (seen.empty()) throw MalformedModelOutput("indicator names no topic entity");
  if (explicit_answer) {
    ind.answer_slot = *explicit_answer;
  } else if (last_query) {
    ind.answer_slot = *last_query;
  } else {
    throw MalformedModelOutput("indicator has no answer slot");
  }
  std::size_t d = 1;
  for (std::size_t i = 0; i < ind.slots.size(); ++i) {
    if (ind.slots[i].anchor) d = std::max(d, i > ind.answer_slot ? i - ind.answer_slot : ind.answer_slot - i);
  }
  ind.d_predict = d;
  return ind;
}

Indicator fallback_indicator(const AnonymizedView& view, std::size_t d_max) {
  if (view.anchors.empty()) throw InvalidArgument("view has no anchors");
  Indicator ind;
  ind.source = IndicatorSource::kFallback;
  for (ViewIndex a : view.anchors) {
    if (!ind.slots.empty()) ind.relations.emplace_back("?");
    ind.slots.push_back({view.nodes[a].display, a});
  }
  ind.relations.emplace_back("?");
  ind.slots.push_back({"?ans", std::nullopt});
  ind.answer_slot = ind.slots.size() - 1;
  ind.d_predict = std::max<std::size_t>(1, d_max);
  return ind;
}

// ---------------------------------------------------------------------------
// Path text

namespace {

std::string node_text(const AnonymizedView& view, ViewIndex v) {
  const auto& n = view.nodes[v];
  std::string out = "{" + n.display;
  if (n.literal && n.literal_kind) {
    out += std::string(":") + kg::to_string(*n.literal_kind);
  } else if (!n.type_tags.empty()) {
    out += ":";
    for (std::size_t i = 0; i < n.type_tags.size(); ++i) out += (i ? "," : "") + n.type_tags[i];
  }
  return out + "}";
}

std::string canonical_of(const AnonymizedView& view, const std::vector<PathStep>& steps,
                         const std::vector<ViewIndex>& nodes, const std::vector<ViewIndex>& topics, bool tail) {
  std::string out;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (i) out += " -- " + view.edges[steps[i - 1].edge].relation + " -- ";
    const auto it = std::find(topics.begin(), topics.end(), nodes[i]);
    if (it != topics.end()) {
      out += "TOPIC_" + std::to_string(it - topics.begin() + 1);
    } else if (tail && i + 1 == nodes.size()) {
      out += "ANS";
    } else {
      out += "X";
    }
  }
  return out;
}

}  // namespace

std::string chain_text(const ReasoningPath& p, const AnonymizedView& view) {
  std::string out = node_text(view, p.nodes.front());
  for (std::size_t i = 0; i < p.steps.size(); ++i) {
    const auto& rel = view.edges[p.steps[i].edge].relation;
    out += p.steps[i].forward ? " -> " + rel + " -> " : " <- " + rel + " <- ";
    out += node_text(view, p.nodes[i + 1]);
  }
  return out;
}

std::string canonical_text(const ReasoningPath& p, const AnonymizedView& view, const std::vector<ViewIndex>& topics) {
  return canonical_of(view, p.steps, p.nodes, topics, p.has_tail);
}

std::string numbered_chains(const std::vector<ReasoningPath>& paths, const AnonymizedView& view) {
  std::string out;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    out += "[P" + std::to_string(i + 1) + "] " + chain_text(paths[i], view) + "\n";
  }
  return out;
}

std::string numbered_raw_paths(const std::vector<ReasoningPath>& paths, const AnonymizedView& view,
                               const kg::KnowledgeGraph& g, std::size_t cap_per_path) {
  std::string out;
  std::size_t n = 0;
  for (const auto& p : paths) {
    for (const auto& raw : view.expand(p.start, p.steps, g, cap_per_path)) {
      out += "[P" + std::to_string(++n) + "] ";
      for (std::size_t i = 0; i < raw.triples.size(); ++i) out += (i ? "; " : "") + g.describe(raw.triples[i]);
      out += "\n";
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tree-structured bidirectional search

namespace {

struct Partial {
  std::vector<PathStep> steps;
  std::vector<ViewIndex> nodes;
};

class BeamRanker {
 public:
  BeamRanker(const AnonymizedView& view, const SearchSpec& spec, const gateway::Embedder* embedder)
      : view_(view), spec_(spec), embedder_(embedder) {
    if (embedder_ && !spec_.relevance.empty()) target_ = embedder_->embed(spec_.relevance);
  }

  // Keeps the `beam` best partials.
  void prune(std::vector<Partial>& layer) {
    if (spec_.beam == kUnbounded || layer.size() <= spec_.beam) return;
    const auto& topics = spec_.topics.empty() ? spec_.anchors : spec_.topics;
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(layer.size());
    for (std::size_t i = 0; i < layer.size(); ++i) {
      double s = 0.0;
      if (!target_.empty()) {
        const auto text = canonical_of(view_, layer[i].steps, layer[i].nodes, topics, false);
        s = gateway::cosine(embedder_->embed(text), target_);
      }
      scored.emplace_back(s, i);
    }
    std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      const auto& pa = layer[a.second];
      const auto& pb = layer[b.second];
      return std::tie(pa.nodes.front(), pa.steps) < std::tie(pb.nodes.front(), pb.steps);
    });
    std::vector<Partial> kept;
    kept.reserve(spec_.beam);
    for (std::size_t i = 0; i < spec_.beam; ++i) kept.push_back(std::move(layer[scored[i].second]));
    layer = std::move(kept);
  }

 private:
  const AnonymizedView& view_;
  const SearchSpec& spec_;
  const gateway::Embedder* embedder_;
  gateway::Vector target_;
};

// Layers of simple partial paths rooted at `root`. Interior nodes are never
// anchors; a partial that reaches an anchor stays in its layer but is not
// extended.
std::vector<std::vector<Partial>> grow_tree(const AnonymizedView& view, ViewIndex root, std::size_t depth,
                                            const std::unordered_set<ViewIndex>& anchors, BeamRanker& ranker) {
  std::vector<std::vector<Partial>> layers(depth + 1);
  layers[0].push_back(Partial{{}, {root}});
  for (std::size_t k = 1; k <= depth; ++k) {
    for (const auto& p : layers[k - 1]) {
      const ViewIndex end = p.nodes.back();
      if (k > 1 && anchors.count(end)) continue;
      for (const auto& step : view.steps_from(end)) {
        const ViewIndex next = view.step_target(end, step);
        if (std::find(p.nodes.begin(), p.nodes.end(), next) != p.nodes.end()) continue;
        Partial q = p;
        q.steps.push_back(step);
        q.nodes.push_back(next);
        layers[k].push_back(std::move(q));
      }
    }
    ranker.prune(layers[k]);
    if (layers[k].empty()) break;
  }
  return layers;
}

// Segment pieces from `a` to `b` of every length in [1, max_len], keyed by length.
std::map<std::size_t, std::vector<Partial>> join_segments(const std::vector<std::vector<Partial>>& from_a,
                                                          const std::vector<std::vector<Partial>>& from_b,
                                                          ViewIndex b, std::size_t max_len,
                                                          const std::unordered_set<ViewIndex>& anchors) {
  std::map<std::size_t, std::vector<Partial>> out;
  for (std::size_t len = 1; len <= max_len; ++len) {
    const std::size_t x = (len + 1) / 2;
    const std::size_t y = len / 2;
    if (x >= from_a.size() || y >= from_b.size()) continue;
    std::unordered_map<ViewIndex, std::vector<const Partial*>> by_end;
    for (const auto& q : from_b[y]) by_end[q.nodes.back()].push_back(&q);
    for (const auto& p : from_a[x]) {
      const ViewIndex meet = p.nodes.back();
      if (y == 0) {
        if (meet != b) continue;
      } else if (anchors.count(meet)) {
        continue;
      }
      auto it = by_end.find(meet);
      if (it == by_end.end()) continue;
      for (const Partial* q : it->second) {
        bool disjoint = true;
        for (std::size_t i = 0; i + 1 < q->nodes.size() && disjoint; ++i) {
          if (std::find(p.nodes.begin(), p.nodes.end(), q->nodes[i]) != p.nodes.end()) disjoint = false;
        }
        if (!disjoint) continue;
        Partial seg = p;
        for (std::size_t i = q->steps.size(); i-- > 0;) {
          seg.steps.push_back(PathStep{q->steps[i].edge, !q->steps[i].forward});
          seg.nodes.push_back(q->nodes[i]);
        }
        out[len].push_back(std::move(seg));
      }
    }
  }
  return out;
}

}  // namespace

std::vector<ReasoningPath> tree_bibfs(const AnonymizedView& view, const SearchSpec& spec,
                                      const gateway::Embedder* embedder) {
  std::vector<ReasoningPath> result;
  if (spec.anchors.empty() || spec.depth == 0) return result;
  std::vector<ViewIndex> order;
  for (ViewIndex a : spec.anchors) {
    if (a >= view.nodes.size()) throw InvalidArgument("anchor outside the view");
    if (std::find(order.begin(), order.end(), a) == order.end()) order.push_back(a);
  }
  const std::size_t m = order.size();
  const bool tail = spec.tail || m == 1;
  const std::size_t hi = m * spec.depth;
  const std::size_t lo = m * (spec.depth - 1);
  const std::size_t stages = (m - 1) + (tail ? 1 : 0);
  if (stages > hi) return result;
  const std::size_t max_piece = hi - (stages - 1);
  const std::unordered_set<ViewIndex> anchor_set(order.begin(), order.end());

  SearchSpec ranked = spec;
  ranked.anchors = order;
  BeamRanker ranker(view, ranked, embedder);

  std::vector<std::vector<std::vector<Partial>>> trees(m);
  for (std::size_t i = 0; i < m; ++i) {
    // The last anchor also seeds the tail, which needs full-length layers.
    const bool last = i + 1 == m;
    const std::size_t depth = last && tail ? max_piece : (max_piece + 1) / 2;
    trees[i] = grow_tree(view, order[i], depth, anchor_set, ranker);
  }

  // Pieces per stage, keyed by length.
  std::vector<std::map<std::size_t, std::vector<Partial>>> pieces;
  for (std::size_t i = 0; i + 1 < m; ++i) {
    pieces.push_back(join_segments(trees[i], trees[i + 1], order[i + 1], max_piece, anchor_set));
  }
  if (tail) {
    std::map<std::size_t, std::vector<Partial>> tails;
    const auto& tree = trees[m - 1];
    for (std::size_t len = 1; len < tree.size() && len <= max_piece; ++len) {
      for (const auto& p : tree[len]) {
        if (!anchor_set.count(p.nodes.back())) tails[len].push_back(p);
      }
    }
    pieces.push_back(std::move(tails));
  }

  std::vector<Partial> combined{Partial{{}, {order.front()}}};
  for (std::size_t s = 0; s < pieces.size(); ++s) {
    const std::size_t remaining = pieces.size() - s - 1;
    std::vector<Partial> next;
    for (const auto& c : combined) {
      for (const auto& [len, list] : pieces[s]) {
        if (c.steps.size() + len + remaining > hi) break;
        for (const auto& piece : list) {
          Partial q = c;
          q.steps.insert(q.steps.end(), piece.steps.begin(), piece.steps.end());
          q.nodes.insert(q.nodes.end(), piece.nodes.begin() + 1, piece.nodes.end());
          next.push_back(std::move(q));
        }
      }
    }
    ranker.prune(next);
    combined = std::move(next);
    if (combined.empty()) return result;
  }

  for (auto& c : combined) {
    if (c.steps.size() <= lo || c.steps.size() > hi) continue;
    ReasoningPath p;
    p.start = order.front();
    p.steps = std::move(c.steps);
    p.nodes = std::move(c.nodes);
    p.covered = order;
    p.has_tail = tail;
    result.push_back(std::move(p));
  }
  std::sort(result.begin(), result.end(), [](const ReasoningPath& a, const ReasoningPath& b) {
    return std::make_tuple(a.length(), a.start, std::cref(a.steps)) <
           std::make_tuple(b.length(), b.start, std::cref(b.steps));
  });
  return result;
}

// ---------------------------------------------------------------------------
// Selection

std::vector<ReasoningPath> fuzzy_select(std::vector<ReasoningPath> paths, const AnonymizedView& view,
                                        const Indicator& indicator,
                                        const std::vector<std::string>& memory_templates, double alpha,
                                        std::size_t w1, const gateway::Embedder& embedder) {
  if (alpha < 0.0 || alpha > 1.0) throw InvalidArgument("alpha must lie in [0, 1]");
  if (w1 == 0) throw InvalidArgument("w1 must be at least 1");
  const auto target = embedder.embed(indicator.canonical());
  std::vector<gateway::Vector> templates;
  for (const auto& t : memory_templates) {
    if (!t.empty()) templates.push_back(embedder.embed(t));
  }
  const auto topics = indicator.anchors();
  std::vector<std::string> keys(paths.size());
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const auto v = embedder.embed(canonical_text(paths[i], view, topics));
    double mem = 0.0;
    for (const auto& t : templates) mem = std::max(mem, gateway::cosine(v, t));
    paths[i].score = alpha * gateway::cosine(v, target) + (1.0 - alpha) * mem;
    keys[i] = chain_text(paths[i], view);
  }
  std::vector<std::size_t> order(paths.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (paths[a].score != paths[b].score) return paths[a].score > paths[b].score;
    if (keys[a] != keys[b]) return keys[a] < keys[b];
    return std::tie(paths[a].start, paths[a].steps) < std::tie(paths[b].start, paths[b].steps);
  });
  std::vector<ReasoningPath> out;
  for (std::size_t i = 0; i < order.size() && i < w1; ++i) out.push_back(std::move(paths[order[i]]));
  return out;
}

namespace {

std::vector<ReasoningPath> head(const std::vector<ReasoningPath>& paths, std::size_t n) {
  return {paths.begin(), paths.begin() + static_cast<std::ptrdiff_t>(std::min(n, paths.size()))};
}

std::optional<std::size_t> path_index(const nlohmann::json& entry) {
  std::string id;
  if (entry.is_string()) {
    id = entry.get<std::string>();
  } else if (entry.is_object() && entry.contains("path_id") && entry["path_id"].is_string()) {
    id = entry["path_id"].get<std::string>();
  } else {
    return std::nullopt;
  }
  id = trim(id);
  if (!id.empty() && id.front() == '[') id = id.substr(1);
  if (!id.empty() && id.back() == ']') id.pop_back();
  if (id.size() < 2 || (id[0] != 'P' && id[0] != 'p')) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto n = std::stoul(id.substr(1), &used);
    if (used + 1 != id.size() || n == 0) return std::nullopt;
    return n - 1;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

std::string json_array(const std::vector<std::string>& items) { return nlohmann::json(items).dump(); }

}  // namespace

std::vector<ReasoningPath> brain_select(const std::vector<ReasoningPath>& paths, const AnonymizedView& view,
                                        std::string_view question_anon, const Indicator& indicator,
                                        std::string_view split_question_anon, std::size_t w_max,
                                        gateway::Gateway& gateway, std::optional<std::size_t> node_id) {
  (void)node_id;
  if (paths.empty() || w_max == 0) return {};
  if (!gateway.brain_available()) return head(paths, w_max);
  gateway::Fields fields{{"question", std::string(question_anon)},
                         {"indicator", indicator.text()},
                         {"split_question", std::string(split_question_anon)},
                         {"paths", numbered_chains(paths, view)}};
  std::vector<std::size_t> picked;
  try {
    const auto reply = gateway::parse_json_reply(gateway.brain_call("brain.path_selection", fields));
    if (!reply.contains("top_paths") || !reply["top_paths"].is_array()) {
      throw MalformedModelOutput("path selection reply lacks 'top_paths'");
    }
    std::vector<std::pair<double, nlohmann::json>> entries;
    std::size_t position = 0;
    for (const auto& e : reply["top_paths"]) {
      double rank = static_cast<double>(position++);
      if (e.is_object() && e.contains("rank") && e["rank"].is_number()) rank = e["rank"].get<double>();
      entries.emplace_back(rank, e);
    }
    std::stable_sort(entries.begin(), entries.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [rank, e] : entries) {
      auto idx = path_index(e);
      if (!idx || *idx >= paths.size()) continue;
      if (std::find(picked.begin(), picked.end(), *idx) == picked.end()) picked.push_back(*idx);
      if (picked.size() == w_max) break;
    }
  } catch (const MalformedModelOutput& e) {
    spdlog::warn("path selection fell back to fuzzy order: {}", e.what());
    return head(paths, w_max);
  } catch (const GatewayError& e) {
    spdlog::warn("path selection unavailable: {}", e.what());
    return head(paths, w_max);
  }
  for (std::size_t i = 0; i < paths.size() && picked.size() < w_max; ++i) {
    if (std::find(picked.begin(), picked.end(), i) == picked.end()) picked.push_back(i);
  }
  std::vector<ReasoningPath> out;
  for (auto i : picked) out.push_back(paths[i]);
  return out;
}

std::vector<ReasoningPath> evidence_pruning(std::vector<ReasoningPath> paths, const ExplorationContext& ctx,
                                            bool* brain_used) {
  if (brain_used) *brain_used = false;
  auto fuzzy = fuzzy_select(std::move(paths), ctx.session->view, *ctx.indicator, ctx.memory_templates, ctx.alpha,
                            std::max<std::size_t>(1, ctx.beam), *ctx.embedder);
  if (fuzzy.size() > ctx.w_max && ctx.gateway->brain_available()) {
    if (brain_used) *brain_used = true;
    return brain_select(fuzzy, ctx.session->view, ctx.question_anon, *ctx.indicator, ctx.split_question_anon,
                        ctx.w_max, *ctx.gateway, ctx.node_id);
  }
  return head(fuzzy, ctx.w_max);
}

// ---------------------------------------------------------------------------
// Exploration phases

namespace {

std::vector<ViewIndex> visiting_order(const Indicator& ind) {
  auto anchors = ind.anchors();
  if (ind.answer_first()) std::reverse(anchors.begin(), anchors.end());
  return anchors;
}

void add_unique(std::vector<ReasoningPath>& into, std::vector<ReasoningPath> more) {
  for (auto& p : more) {
    if (std::find(into.begin(), into.end(), p) == into.end()) into.push_back(std::move(p));
  }
}

std::vector<ReasoningPath> search(const ExplorationContext& ctx, std::vector<ViewIndex> anchors, bool tail,
                                  std::size_t d_from, std::size_t d_to, const std::string& relevance) {
  std::vector<ReasoningPath> out;
  const auto& view = ctx.session->view;
  for (std::size_t d = std::max<std::size_t>(1, d_from); d <= d_to; ++d) {
    SearchSpec spec;
    spec.anchors = anchors;
    spec.tail = tail;
    spec.depth = d;
    spec.beam = ctx.beam;
    spec.relevance = relevance;
    spec.topics = ctx.indicator ? ctx.indicator->anchors() : anchors;
    add_unique(out, tree_bibfs(view, spec, ctx.embedder));
  }
  std::set<kg::TripleId> touched;
  for (const auto& p : out) {
    for (const auto& s : p.steps) touched.insert(view.edges[s.edge].raw.begin(), view.edges[s.edge].raw.end());
  }
  ctx.gateway->record_kg_expansion(touched.size(), ctx.node_id);
  return out;
}

CandidatePool finish(const ExplorationContext& ctx, Mode phase, std::vector<ReasoningPath> paths, std::size_t d) {
  CandidatePool pool;
  pool.phase = phase;
  pool.depth_used = d;
  if (!paths.empty()) pool.paths = evidence_pruning(std::move(paths), ctx, &pool.brain_selected);
  return pool;
}

std::string raw_topic_labels(const ExplorationContext& ctx) {
  std::vector<std::string> labels;
  for (kg::NodeId id : ctx.session->view.anchor_raw) labels.push_back(ctx.graph->node(id).label);
  return json_array(labels);
}

std::string anon_topic_labels(const ExplorationContext& ctx) {
  std::vector<std::string> labels;
  for (ViewIndex a : ctx.session->view.anchors) labels.push_back(ctx.session->view.nodes[a].display);
  return json_array(labels);
}

std::string raw_indicator(const ExplorationContext& ctx) {
  try {
    return anon::deanonymize_text(ctx.indicator->text(), ctx.session->mapping);
  } catch (const UnknownToken&) {
    return ctx.indicator->text();
  }
}

}  // namespace

CandidatePool explore_topic(const ExplorationContext& ctx, std::size_t d) {
  const auto& ind = *ctx.indicator;
  const std::size_t start = std::min({ind.d_predict, ctx.d_max, d});
  auto paths = search(ctx, visiting_order(ind), ind.answer_outside(), start, d, ind.canonical());
  return finish(ctx, Mode::kTopic, std::move(paths), d);
}

CandidatePool explore_refine(const ExplorationContext& ctx, const CandidatePool& previous, std::size_t d) {
  const auto& view = ctx.session->view;
  const gateway::Fields fields{{"question", ctx.question},
                               {"topic_entities", raw_topic_labels(ctx)},
                               {"indicator", raw_indicator(ctx)},
                               {"split_question", ctx.split_question},
                               {"paths", numbered_raw_paths(previous.paths, view, *ctx.graph)}};
  std::optional<gateway::FollowUp> follow;
  for (int attempt = 0; attempt < 2 && !follow; ++attempt) {
    try {
      follow = gateway::parse_follow_up(ctx.gateway->hand_call("hand.follow_up", fields));
    } catch (const MalformedModelOutput& e) {
      spdlog::warn("follow-up reply malformed (attempt {}): {}", attempt + 1, e.what());
    }
  }
  CandidatePool empty;
  empty.phase = Mode::kRefine;
  empty.depth_used = d;
  if (!follow) return empty;

  std::vector<ViewIndex> anchors;
  try {
    const auto mentions = grounding::extract_mentions({"", follow->query, {}}, *ctx.gateway);
    const auto aligned = grounding::align_mentions(mentions, *ctx.graph, *ctx.embedder);
    for (const auto& te : aligned.items) {
      auto v = view.node_of_raw(te.entity);
      if (v && std::find(anchors.begin(), anchors.end(), *v) == anchors.end()) anchors.push_back(*v);
    }
  } catch (const NoAlignment&) {
    return empty;
  } catch (const MalformedModelOutput& e) {
    spdlog::warn("follow-up entity extraction failed: {}", e.what());
    return empty;
  }
  if (anchors.empty()) return empty;
  auto paths = search(ctx, anchors, true, 1, d, ctx.session->anon_text(follow->query, *ctx.graph));
  return finish(ctx, Mode::kRefine, std::move(paths), d);
}

CandidatePool explore_predict(const ExplorationContext& ctx, const std::vector<CandidatePool>& previous,
                              std::size_t d) {
  const auto& view = ctx.session->view;
  const auto& ind = *ctx.indicator;
  const auto base = visiting_order(ind);
  std::vector<ViewIndex> accepted;
  std::size_t dropped = 0;

  if (ctx.gateway->brain_available()) {
    std::vector<ReasoningPath> prior;
    for (const auto& pool : previous) add_unique(prior, pool.paths);
    const gateway::Fields fields{{"question", ctx.question_anon},
                                 {"topic_entities", anon_topic_labels(ctx)},
                                 {"indicator", ind.text()},
                                 {"split_question", ctx.split_question_anon},
                                 {"paths", numbered_chains(prior, view)}};
    try {
      const auto reply = gateway::parse_json_reply(ctx.gateway->brain_call("brain.predict", fields));
      if (reply.contains("predictions") && reply["predictions"].is_array()) {
        std::size_t seen = 0;
        for (const auto& p : reply["predictions"]) {
          if (seen++ == 3) break;
          std::string target;
          if (p.is_string()) {
            target = p.get<std::string>();
          } else if (p.is_object() && p.contains("target") && p["target"].is_string()) {
            target = p["target"].get<std::string>();
          }
          auto v = lookup_symbol(view, target);
          if (!v) {
            ++dropped;
            continue;
          }
          if (std::find(base.begin(), base.end(), *v) != base.end()) continue;
          if (std::find(accepted.begin(), accepted.end(), *v) == accepted.end()) accepted.push_back(*v);
        }
      } else {
        spdlog::warn("prediction reply lacks 'predictions'");
      }
    } catch (const MalformedModelOutput& e) {
      spdlog::warn("prediction reply malformed: {}", e.what());
    } catch (const GatewayError& e) {
      spdlog::warn("prediction unavailable: {}", e.what());
    }
  }
  if (dropped) spdlog::info("dropped {} predicted token(s) absent from the view", dropped);

  std::vector<ReasoningPath> paths;
  if (accepted.empty()) {
    paths = search(ctx, base, ind.answer_outside(), 1, d, ind.canonical());
  } else {
    for (ViewIndex target : accepted) {
      auto anchors = base;
      anchors.push_back(target);
      add_unique(paths, search(ctx, anchors, false, 1, d, ind.canonical()));
    }
  }
  auto pool = finish(ctx, Mode::kPredict, std::move(paths), d);
  pool.predicted = accepted;
  pool.dropped_predictions = dropped;
  return pool;
}

}  // namespace privgemo::retrieval
