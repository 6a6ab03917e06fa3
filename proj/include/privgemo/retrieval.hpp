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
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "privgemo/anonymizer.hpp"
#include "privgemo/embedder.hpp"
#include "privgemo/gateway.hpp"

namespace privgemo::retrieval {

inline constexpr std::size_t kBeamWidth = 80;   // fuzzy-selection width, reused for the BFS beam
inline constexpr std::size_t kMaxSelected = 3;  // paths kept after evidence pruning
inline constexpr std::size_t kMaxDepth = 3;
inline constexpr double kPruneAlpha = 0.6;
// 0 disables the beam entirely.
inline constexpr std::size_t kUnbounded = 0;

enum class Mode { kTopic, kRefine, kPredict };
const char* to_string(Mode m);
std::optional<Mode> mode_from_string(std::string_view s);

enum class IndicatorSource { kBrain, kHand, kMemory, kFallback };
const char* to_string(IndicatorSource s);

struct IndicatorSlot {
  std::string text;                     // as written (anonymized)
  std::optional<anon::ViewIndex> anchor;  // set when the slot names an anchor
};

/// Ordered sketch "A -- r -- ?x -- r -- B" over anonymized labels.
struct Indicator {
  std::vector<IndicatorSlot> slots;
  std::vector<std::string> relations;  // slots.size() - 1 entries
  std::size_t answer_slot = 0;
  std::size_t d_predict = 1;
  IndicatorSource source = IndicatorSource::kFallback;

  /// Anchors in slot order.
  std::vector<anon::ViewIndex> anchors() const;
  /// True when the answer slot is outside the span of anchor slots.
  bool answer_outside() const;
  /// True when the answer slot precedes the first anchor slot.
  bool answer_first() const;
  std::string text() const;
  /// Placeholder form used for similarity: anchors become TOPIC_k, the
  /// answer ANS, every other slot X.
  std::string canonical() const;
};

/// Splits on " -- " and drops parenthetical remarks. The answer slot is an
/// explicit ANS/?ans slot, otherwise the last slot starting with '?'. Throws
/// MalformedModelOutput when the text has no anchor or no answer slot.
Indicator parse_indicator(std::string_view text, const anon::AnonymizedView& view,
                          IndicatorSource source);

/// anchors... -> ANS with d_predict = `d_max`.
Indicator fallback_indicator(const anon::AnonymizedView& view, std::size_t d_max);

// ---------------------------------------------------------------------------
// Paths

struct ReasoningPath {
  anon::ViewIndex start = 0;
  std::vector<anon::PathStep> steps;
  std::vector<anon::ViewIndex> nodes;    // steps.size() + 1
  std::vector<anon::ViewIndex> covered;  // anchors in the order they are met
  bool has_tail = false;
  double score = 0.0;

  std::size_t length() const noexcept { return steps.size(); }
  friend bool operator==(const ReasoningPath& a, const ReasoningPath& b) {
    return a.start == b.start && a.steps == b.steps;
  }
};

/// "{ent_1:type} -> rel -> {ent_2}"; backward steps read "<- rel <-".
std::string chain_text(const ReasoningPath& p, const anon::AnonymizedView& view);
/// "TOPIC_1 -- rel -- X -- rel -- ANS"; `topics` fixes the TOPIC numbering.
std::string canonical_text(const ReasoningPath& p, const anon::AnonymizedView& view,
                           const std::vector<anon::ViewIndex>& topics);

struct SearchSpec {
  std::vector<anon::ViewIndex> anchors;  // visiting order
  bool tail = false;                     // path continues past the last anchor
  std::size_t depth = 1;
  std::size_t beam = kBeamWidth;
  std::string relevance;  // text the beam ranks partial paths against
  std::vector<anon::ViewIndex> topics;  // TOPIC numbering for the beam text
};

/// Every path that visits the anchors in order, with simple anchor-free
/// segments between consecutive anchors (and a simple anchor-free tail when
/// requested), whose length L satisfies m*(depth-1) < L <= m*depth. Segments
/// are joined meet-in-the-middle from per-anchor BFS trees. With a bounded
/// beam each BFS layer and each join stage keeps the `beam` partial paths
/// most similar to `relevance`; the result is then a subset.
std::vector<ReasoningPath> tree_bibfs(const anon::AnonymizedView& view, const SearchSpec& spec,
                                      const gateway::Embedder* embedder);

// ---------------------------------------------------------------------------
// Selection

/// alpha * cos(path, indicator) + (1 - alpha) * max_j cos(path, template_j),
/// sorted descending; ties by chain text then steps. Keeps the top `w1`.
std::vector<ReasoningPath> fuzzy_select(std::vector<ReasoningPath> paths, const anon::AnonymizedView& view,
                                        const Indicator& indicator,
                                        const std::vector<std::string>& memory_templates, double alpha,
                                        std::size_t w1, const gateway::Embedder& embedder);

/// Brain ranking over anonymized chains. Unknown ids are ignored and a
/// short ranking is filled from the incoming order; any failure (disabled
/// channel, budget, malformed reply) falls back to the incoming order.
std::vector<ReasoningPath> brain_select(const std::vector<ReasoningPath>& paths, const anon::AnonymizedView& view,
                                        std::string_view question_anon, const Indicator& indicator,
                                        std::string_view split_question_anon, std::size_t w_max,
                                        gateway::Gateway& gateway, std::optional<std::size_t> node_id = {});

/// "[P1] chain" lines.
std::string numbered_chains(const std::vector<ReasoningPath>& paths, const anon::AnonymizedView& view);

// ---------------------------------------------------------------------------
// Exploration phases

struct CandidatePool {
  Mode phase = Mode::kTopic;
  std::vector<ReasoningPath> paths;
  std::size_t depth_used = 0;
  bool brain_selected = false;
  std::vector<anon::ViewIndex> predicted;  // Predict phase: accepted target nodes
  std::size_t dropped_predictions = 0;     // tokens not present in the view
};

struct ExplorationContext {
  const anon::Session* session = nullptr;
  const kg::KnowledgeGraph* graph = nullptr;
  const gateway::Embedder* embedder = nullptr;
  gateway::Gateway* gateway = nullptr;

  const Indicator* indicator = nullptr;
  std::string question;             // raw, Hand side only
  std::string split_question;       // raw, Hand side only
  std::string question_anon;        // Brain side
  std::string split_question_anon;  // Brain side
  std::vector<std::string> memory_templates;

  std::size_t beam = kBeamWidth;
  std::size_t w_max = kMaxSelected;
  std::size_t d_max = kMaxDepth;
  double alpha = kPruneAlpha;
  std::optional<std::size_t> node_id;
};

/// Union of searches at depth min(d_predict, d_max, d) .. d, then pruned.
CandidatePool explore_topic(const ExplorationContext& ctx, std::size_t d);

/// The Hand writes a follow-up question for what `previous` lacks; its
/// entities become the new anchors. No alignable anchor gives an empty pool.
CandidatePool explore_refine(const ExplorationContext& ctx, const CandidatePool& previous, std::size_t d);

/// The Brain proposes up to three target tokens; each accepted one is
/// searched as a final anchor after the indicator anchors. Without usable
/// predictions the original anchors are searched alone.
CandidatePool explore_predict(const ExplorationContext& ctx, const std::vector<CandidatePool>& previous,
                              std::size_t d);

/// fuzzy_select to W1, then brain_select to W_max when the Brain is
/// available and more than W_max paths remain, else the fuzzy top W_max.
std::vector<ReasoningPath> evidence_pruning(std::vector<ReasoningPath> paths, const ExplorationContext& ctx,
                                            bool* brain_used = nullptr);

/// Raw expansions of pool paths, "[P1] (h, r, t); (h, r, t)" per line.
std::string numbered_raw_paths(const std::vector<ReasoningPath>& paths, const anon::AnonymizedView& view,
                               const kg::KnowledgeGraph& g, std::size_t cap_per_path = 64);

}  // namespace privgemo::retrieval
