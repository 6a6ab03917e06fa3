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
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "privgemo/anonymizer.hpp"
#include "privgemo/embedder.hpp"
#include "privgemo/gateway.hpp"
#include "privgemo/grounding.hpp"
#include "privgemo/kg_store.hpp"
#include "privgemo/memory.hpp"
#include "privgemo/retrieval.hpp"

namespace privgemo::controller {

inline constexpr double kGateThreshold = 0.85;
inline constexpr std::size_t kModeCount = 3;

struct Limits {
  std::size_t d_max = retrieval::kMaxDepth;
  std::size_t beam = retrieval::kBeamWidth;
  std::size_t w_max = retrieval::kMaxSelected;
  std::size_t w_exp = memory::kRetrieveWidth;
  double alpha = retrieval::kPruneAlpha;
  double gate_threshold = kGateThreshold;
  std::size_t max_brain_calls = 12;
  /// 0 means |modes| * d_max.
  std::size_t max_iterations = 0;

  std::size_t iteration_cap() const noexcept { return max_iterations ? max_iterations : kModeCount * d_max; }
};

enum class NodeStatus { kActive, kVerified, kPruned };
const char* to_string(NodeStatus s);

// Where the final answer came from.
enum class AnswerSource { kNone, kKgOnly, kLlmInspiredKg, kKgInspiredLlm };
const char* to_string(AnswerSource s);

struct GateDecision {
  bool call_brain = true;
  bool reuse_memory = false;
  double best_score = 0.0;
  std::optional<memory::ExperienceRecord> record;  // set when reusing
};

/// Reuse when the best non-exemplar successful record scores at least
/// `threshold`; otherwise call the Brain.
GateDecision gate_brain_usage(const std::vector<memory::ScoredRecord>& records,
                              double threshold = kGateThreshold);

/// Indicator with anchors as TOPIC_k (k = position among the view's
/// anchors), the answer as ANS and other slots as X. Relations are kept.
std::string memory_form(const retrieval::Indicator& ind, const anon::AnonymizedView& view);
/// Inverse of memory_form for the current session; nullopt when the stored
/// form names an anchor the view does not have or does not parse.
std::optional<retrieval::Indicator> instantiate(const std::string& stored, const anon::AnonymizedView& view);

struct Analysis {
  retrieval::Indicator indicator;
  std::vector<std::string> splits;       // raw
  std::vector<std::string> splits_anon;  // same order
  std::string question_anon;
  std::size_t d_predict = 1;
};

/// Stored analysis on reuse; otherwise the Brain (anonymized) or the Hand
/// (raw, then mapped). A malformed reply is retried once, then the fallback
/// indicator is used.
Analysis question_analysis(const std::string& question, const anon::Session& session, const kg::KnowledgeGraph& g,
                           const GateDecision& decision, gateway::Gateway& gateway, std::size_t d_max);

struct Evidence {
  std::vector<kg::TripleId> triples;
  std::vector<std::string> facts;  // as the Hand wrote them
  std::vector<std::string> split_answer;
  bool sufficient_main = false;
  std::vector<std::string> main_answer;
};

struct NodeState {
  std::size_t index = 0;
  std::string split_question;
  std::string split_question_anon;
  memory::Step at;
  std::vector<retrieval::CandidatePool> pools;
  Evidence evidence;
  NodeStatus status = NodeStatus::kActive;
  std::vector<memory::Step> trajectory;
  std::string reason;
  std::vector<std::string> warnings;  // "Mode@d: note"
};

struct ReasoningTree {
  retrieval::Indicator indicator;
  std::size_t d_predict = 1;
  std::vector<NodeState> nodes;  // children of the root, analysis order
};

/// Everything a run shares across its nodes.
struct RunContext {
  const kg::KnowledgeGraph* graph = nullptr;
  const anon::Session* session = nullptr;
  const gateway::Embedder* embedder = nullptr;
  gateway::Gateway* gateway = nullptr;
  memory::ExperiencePool* pool = nullptr;
  memory::HighFreqBuffer* buffer = nullptr;
  anon::PrivacyPolicy policy;
  Limits limits;
  std::string question;
  std::string question_anon;
};

/// Explore, de-anonymize, refine and check `node` until it is Verified or
/// Pruned. Runs at most limits.iteration_cap() iterations.
NodeStatus node_verification_loop(NodeState& node, const ReasoningTree& tree, const RunContext& ctx);

struct NodeSummary {
  std::string split_question;
  NodeStatus status = NodeStatus::kActive;
  std::vector<memory::Step> trajectory;
  std::string reason;
};

struct RunResult {
  std::string question;
  std::vector<std::string> answers;
  bool sufficient = false;
  AnswerSource source = AnswerSource::kNone;
  std::vector<kg::TripleId> evidence;
  std::vector<std::string> evidence_text;
  std::string explanation;

  std::vector<std::string> topic_entities;
  std::string indicator;  // memory form
  retrieval::IndicatorSource analysis_source = retrieval::IndicatorSource::kFallback;
  bool memory_reused = false;
  std::optional<std::uint64_t> written_record;
  std::vector<NodeSummary> nodes;

  gateway::ExposureTally tally;
  std::size_t brain_analysis_calls = 0;
  gateway::Transcript transcript;
  std::size_t raw_entities = 0;
  std::size_t view_entities = 0;
  double reduction_ratio = 0.0;
};

struct Backends {
  std::shared_ptr<gateway::Backend> brain;  // may be null: Hand-only operation
  std::shared_ptr<gateway::Backend> hand;
};

/// One question end to end. Throws NoTopicEntities when nothing aligns;
/// otherwise returns, possibly with an empty answer and sufficient=false.
RunResult run(const grounding::Question& q, const kg::KnowledgeGraph& g, const anon::PrivacyPolicy& policy,
              memory::ExperiencePool& pool, memory::HighFreqBuffer& buffer, const Backends& backends,
              const gateway::Embedder& embedder, const Limits& limits = {});

}  // namespace privgemo::controller
