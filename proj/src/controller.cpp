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

#include "privgemo/controller.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "privgemo/errors.hpp"

namespace privgemo::controller {

using json = nlohmann::json;
using retrieval::Mode;

const char* to_string(NodeStatus s) {
  switch (s) {
    case NodeStatus::kActive: return "Active";
    case NodeStatus::kVerified: return "Verified";
    case NodeStatus::kPruned: return "Pruned";
  }
  return "?";
}

const char* to_string(AnswerSource s) {
  switch (s) {
    case AnswerSource::kNone: return "none";
    case AnswerSource::kKgOnly: return "kg-only";
    case AnswerSource::kLlmInspiredKg: return "llm-inspired-kg";
    case AnswerSource::kKgInspiredLlm: return "kg-inspired-llm";
  }
  return "?";
}

namespace {

std::string normalize(std::string_view s) {
  std::string out;
  bool space = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      space = !out.empty();
      continue;
    }
    if (space) out.push_back(' ');
    space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

std::vector<std::string> string_list(const json& j, const char* key) {
  std::vector<std::string> out;
  if (!j.contains(key)) return out;
  const auto& v = j[key];
  if (v.is_string()) {
    if (!v.get<std::string>().empty()) out.push_back(v.get<std::string>());
  } else if (v.is_array()) {
    for (const auto& item : v) {
      if (item.is_string() && !item.get<std::string>().empty()) out.push_back(item.get<std::string>());
    }
  }
  return out;
}

bool flag(const json& j, const char* key) {
  if (!j.contains(key)) return false;
  const auto& v = j[key];
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_string()) return normalize(v.get<std::string>()) == "true";
  return false;
}

std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

// Hand call expecting a JSON object; one retry on a malformed reply.
std::optional<json> hand_json(gateway::Gateway& gw, std::string_view template_id, const gateway::Fields& fields) {
  for (int attempt = 0; attempt < 2; ++attempt) {
    try {
      return gateway::parse_json_reply(gw.hand_call(template_id, fields));
    } catch (const MalformedModelOutput& e) {
      spdlog::warn("{} reply malformed (attempt {}): {}", template_id, attempt + 1, e.what());
    } catch (const GatewayError& e) {
      spdlog::warn("{} failed: {}", template_id, e.what());
      return std::nullopt;
    }
  }
  return std::nullopt;
}

std::string raw_indicator_text(const retrieval::Indicator& ind, const anon::Session& session) {
  try {
    return anon::deanonymize_text(ind.text(), session.mapping);
  } catch (const UnknownToken&) {
    return ind.text();
  }
}

std::vector<std::string> split_slots(const std::string& text) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    auto at = text.find(" -- ", start);
    parts.push_back(text.substr(start, at == std::string::npos ? std::string::npos : at - start));
    if (at == std::string::npos) break;
    start = at + 4;
  }
  return parts;
}

}  // namespace

GateDecision gate_brain_usage(const std::vector<memory::ScoredRecord>& records, double threshold) {
  GateDecision d;
  const memory::ScoredRecord* best = nullptr;
  for (const auto& s : records) {
    if (s.record.exemplar || !s.record.outcome.sufficient) continue;
    if (!best || s.hybrid > best->hybrid) best = &s;
  }
  if (best) d.best_score = best->hybrid;
  if (best && best->hybrid >= threshold) {
    d.call_brain = false;
    d.reuse_memory = true;
    d.record = best->record;
  }
  return d;
}

std::string memory_form(const retrieval::Indicator& ind, const anon::AnonymizedView& view) {
  std::string out;
  for (std::size_t i = 0; i < ind.slots.size(); ++i) {
    if (i) out += " -- " + ind.relations[i - 1] + " -- ";
    const auto& slot = ind.slots[i];
    if (slot.anchor) {
      auto it = std::find(view.anchors.begin(), view.anchors.end(), *slot.anchor);
      out += "TOPIC_" + std::to_string(it - view.anchors.begin() + 1);
    } else if (i == ind.answer_slot) {
      out += "ANS";
    } else {
      out += "X";
    }
  }
  return out;
}

std::optional<retrieval::Indicator> instantiate(const std::string& stored, const anon::AnonymizedView& view) {
  auto parts = split_slots(stored);
  for (std::size_t i = 0; i < parts.size(); i += 2) {
    auto& p = parts[i];
    if (p.rfind("TOPIC_", 0) == 0) {
      std::size_t k = 0;
      try {
        k = std::stoul(p.substr(6));
      } catch (const std::exception&) {
        return std::nullopt;
      }
      if (k == 0 || k > view.anchors.size()) return std::nullopt;
      p = view.nodes[view.anchors[k - 1]].display;
    } else if (p == "ANS") {
      p = "?ans";
    } else {
      p = "?x" + std::to_string(i / 2);
    }
  }
  try {
    return retrieval::parse_indicator(join(parts, " -- "), view, retrieval::IndicatorSource::kMemory);
  } catch (const MalformedModelOutput&) {
    return std::nullopt;
  }
}

Analysis question_analysis(const std::string& question, const anon::Session& session, const kg::KnowledgeGraph& g,
                           const GateDecision& decision, gateway::Gateway& gw, std::size_t d_max) {
  const auto& view = session.view;
  Analysis a;
  a.question_anon = session.anon_text(question, g);
  bool done = false;

  if (decision.reuse_memory && decision.record) {
    if (auto ind = instantiate(decision.record->anon_indicator, view)) {
      a.indicator = std::move(*ind);
      done = true;
      gw.note("analysis reused from experience record " + std::to_string(decision.record->id));
    } else {
      spdlog::warn("stored indicator does not fit this session; analysing afresh");
    }
  }

  if (!done && decision.call_brain && gw.brain_available()) {
    std::vector<std::string> anchors;
    for (auto v : view.anchors) anchors.push_back(view.nodes[v].display);
    const gateway::Fields fields{{"question", a.question_anon}, {"topic_entities", json(anchors).dump()}};
    for (int attempt = 0; attempt < 2 && !done; ++attempt) {
      try {
        const auto reply = gateway::parse_json_reply(gw.brain_call("brain.question_analysis", fields));
        if (!reply.contains("indicator") || !reply["indicator"].is_string()) {
          throw MalformedModelOutput("analysis reply lacks 'indicator'");
        }
        auto ind = retrieval::parse_indicator(reply["indicator"].get<std::string>(), view,
                                              retrieval::IndicatorSource::kBrain);
        std::vector<std::string> splits, splits_anon;
        for (const auto& s : string_list(reply, "split_questions")) {
          splits.push_back(anon::deanonymize_text(s, session.mapping));
          splits_anon.push_back(s);
        }
        a.indicator = std::move(ind);
        a.splits = std::move(splits);
        a.splits_anon = std::move(splits_anon);
        done = true;
      } catch (const MalformedModelOutput& e) {
        spdlog::warn("brain analysis malformed (attempt {}): {}", attempt + 1, e.what());
      } catch (const UnknownToken& e) {
        spdlog::warn("brain analysis used an unknown token (attempt {}): {}", attempt + 1, e.what());
      } catch (const GatewayError& e) {
        spdlog::warn("brain analysis unavailable: {}", e.what());
        break;
      }
    }
  } else if (!done) {
    std::vector<std::string> anchors;
    for (auto id : view.anchor_raw) anchors.push_back(g.node(id).label);
    const gateway::Fields fields{{"question", question}, {"topic_entities", json(anchors).dump()}};
    for (int attempt = 0; attempt < 2 && !done; ++attempt) {
      try {
        const auto reply = gateway::parse_json_reply(gw.hand_call("hand.question_analysis", fields));
        if (!reply.contains("indicator") || !reply["indicator"].is_string()) {
          throw MalformedModelOutput("analysis reply lacks 'indicator'");
        }
        a.indicator = retrieval::parse_indicator(session.anon_text(reply["indicator"].get<std::string>(), g), view,
                                                 retrieval::IndicatorSource::kHand);
        a.splits = string_list(reply, "split_questions");
        a.splits_anon.clear();
        for (const auto& s : a.splits) a.splits_anon.push_back(session.anon_text(s, g));
        done = true;
      } catch (const MalformedModelOutput& e) {
        spdlog::warn("hand analysis malformed (attempt {}): {}", attempt + 1, e.what());
      } catch (const GatewayError& e) {
        spdlog::warn("hand analysis unavailable: {}", e.what());
        break;
      }
    }
  }

  if (!done) {
    a.indicator = retrieval::fallback_indicator(view, d_max);
    a.splits.clear();
    a.splits_anon.clear();
  }
  if (a.splits.empty()) {
    a.splits = {question};
    a.splits_anon = {a.question_anon};
  }
  a.d_predict = std::max<std::size_t>(1, a.indicator.d_predict);
  return a;
}

namespace {

retrieval::CandidatePool explore(const memory::Step& at, const retrieval::ExplorationContext& ectx,
                                 const NodeState& node) {
  try {
    switch (at.mode) {
      case Mode::kTopic: return retrieval::explore_topic(ectx, at.depth);
      case Mode::kRefine: {
        static const retrieval::CandidatePool kNone;
        return retrieval::explore_refine(ectx, node.pools.empty() ? kNone : node.pools.back(), at.depth);
      }
      case Mode::kPredict: return retrieval::explore_predict(ectx, node.pools, at.depth);
    }
  } catch (const GatewayError& e) {
    spdlog::warn("{} exploration failed: {}", retrieval::to_string(at.mode), e.what());
  } catch (const MalformedModelOutput& e) {
    spdlog::warn("{} exploration failed: {}", retrieval::to_string(at.mode), e.what());
  }
  retrieval::CandidatePool empty;
  empty.phase = at.mode;
  empty.depth_used = at.depth;
  return empty;
}

// De-anonymize the pool, let the Hand refine it into facts and judge them.
bool verify(NodeState& node, const retrieval::CandidatePool& pool, const ReasoningTree& tree, const RunContext& ctx,
            std::string& why) {
  if (pool.paths.empty()) {
    why = "no candidate paths";
    return false;
  }
  const auto& g = *ctx.graph;
  const auto& view = ctx.session->view;
  std::unordered_map<std::string, kg::TripleId> known;
  for (const auto& p : pool.paths) {
    for (const auto& raw : view.expand(p.start, p.steps, g)) {
      for (auto t : raw.triples) known.emplace(normalize(g.describe(t)), t);
    }
  }
  const gateway::Fields refine_fields{{"question", ctx.question},
                                      {"split_question", node.split_question},
                                      {"paths", retrieval::numbered_raw_paths(pool.paths, view, g)}};
  auto refined = hand_json(*ctx.gateway, "hand.path_refine", refine_fields);
  if (!refined) {
    why = "path refinement failed";
    return false;
  }
  Evidence ev;
  ev.facts = string_list(*refined, "verified_facts");
  for (const auto& f : ev.facts) {
    auto it = known.find(normalize(f));
    if (it != known.end() && std::find(ev.triples.begin(), ev.triples.end(), it->second) == ev.triples.end()) {
      ev.triples.push_back(it->second);
    }
  }
  const gateway::Fields check_fields{{"question", ctx.question},
                                     {"indicator", raw_indicator_text(tree.indicator, *ctx.session)},
                                     {"split_question", node.split_question},
                                     {"evidence", join(ev.facts, "\n")}};
  auto check = hand_json(*ctx.gateway, "hand.sufficiency", check_fields);
  if (!check) {
    why = "sufficiency check failed";
    return false;
  }
  const bool sufficient = flag(*check, "sufficient_split");
  ev.split_answer = string_list(*check, "split_answer");
  ev.sufficient_main = flag(*check, "sufficient_main");
  ev.main_answer = string_list(*check, "main_answer");
  node.evidence = std::move(ev);
  if (!sufficient) {
    why = "evidence insufficient";
    return false;
  }
  if (node.evidence.triples.empty()) {
    why = "verified facts are not in the graph";
    return false;
  }
  return true;
}

}  // namespace

NodeStatus node_verification_loop(NodeState& node, const ReasoningTree& tree, const RunContext& ctx) {
  const auto& view = ctx.session->view;
  const std::size_t d_max = ctx.limits.d_max;
  memory::ExperienceQuery query{node.split_question, memory_form(tree.indicator, view), tree.d_predict, d_max};
  const auto exp = memory::get_exp(*ctx.pool, *ctx.buffer, query, ctx.policy, ctx.limits.w_exp, *ctx.embedder);

  retrieval::ExplorationContext ectx;
  ectx.session = ctx.session;
  ectx.graph = ctx.graph;
  ectx.embedder = ctx.embedder;
  ectx.gateway = ctx.gateway;
  ectx.indicator = &tree.indicator;
  ectx.question = ctx.question;
  ectx.split_question = node.split_question;
  ectx.question_anon = ctx.question_anon;
  ectx.split_question_anon = node.split_question_anon;
  ectx.memory_templates = exp.hints.templates;
  ectx.beam = ctx.limits.beam;
  ectx.w_max = ctx.limits.w_max;
  ectx.d_max = d_max;
  ectx.alpha = ctx.limits.alpha;
  ectx.node_id = node.index;

  std::set<std::pair<int, std::size_t>> tried;
  auto key = [](const memory::Step& s) { return std::make_pair(static_cast<int>(s.mode), s.depth); };
  node.at.depth = std::clamp<std::size_t>(node.at.depth, 1, d_max);

  for (std::size_t iter = 0; iter < ctx.limits.iteration_cap(); ++iter) {
    tried.insert(key(node.at));
    node.trajectory.push_back(node.at);
    node.pools.push_back(explore(node.at, ectx, node));
    std::string why;
    if (verify(node, node.pools.back(), tree, ctx, why)) {
      node.status = NodeStatus::kVerified;
      node.reason = "verified in " + memory::to_string(node.at);
      return node.status;
    }
    const memory::NodeProgress progress{node.at, tree.d_predict, d_max};
    auto next = memory::next_step(exp.records, progress);
    if (!next.prune && tried.count(key(next.next))) {
      next = memory::next_step({}, progress);
      if (!next.prune && tried.count(key(next.next))) {
        next.prune = true;
        next.reason = "no untried step";
      }
    }
    if (next.prune) {
      node.status = NodeStatus::kPruned;
      node.reason = why + "; " + next.reason;
      node.warnings.push_back(memory::to_string(node.at) + ": pruned, " + why);
      return node.status;
    }
    node.at = memory::Step{next.next.mode, std::min(next.next.depth, d_max)};
  }
  node.status = NodeStatus::kPruned;
  node.reason = "iteration budget exhausted";
  node.warnings.push_back(memory::to_string(node.at) + ": pruned, iteration budget");
  return node.status;
}

RunResult run(const grounding::Question& q, const kg::KnowledgeGraph& g, const anon::PrivacyPolicy& policy,
              memory::ExperiencePool& pool, memory::HighFreqBuffer& buffer, const Backends& backends,
              const gateway::Embedder& embedder, const Limits& limits) {
  policy.validate();
  if (!backends.hand) throw InvalidArgument("a Hand backend is required");
  if (limits.d_max == 0 || limits.w_max == 0 || limits.w_exp == 0) {
    throw InvalidArgument("d_max, w_max and w_exp must be positive");
  }
  RunResult result;
  result.question = q.text;

  gateway::GatewayOptions options;
  options.brain_enabled = backends.brain != nullptr;
  options.max_brain_calls = limits.max_brain_calls;
  gateway::Gateway gw(backends.brain, backends.hand, options);

  // Grounding and the privacy stage.
  std::vector<std::string> mentions;
  for (int attempt = 0; attempt < 2; ++attempt) {
    try {
      mentions = grounding::extract_mentions(q, gw);
      break;
    } catch (const MalformedModelOutput& e) {
      spdlog::warn("entity extraction malformed (attempt {}): {}", attempt + 1, e.what());
    }
  }
  grounding::TopicEntitySet topics;
  try {
    topics = grounding::align_mentions(mentions, g, embedder);
  } catch (const NoAlignment& e) {
    throw NoTopicEntities(std::string("no topic entity aligned: ") + e.what());
  }
  for (const auto& te : topics.items) result.topic_entities.push_back(g.node(te.entity).label);
  const auto sub = grounding::detect_subgraph(g, topics, limits.d_max);
  const auto session = anon::anonymize(sub, policy);
  gw.set_boundary(gateway::BoundaryScanner(session.dictionary));
  result.raw_entities = session.view.raw_entity_count;
  result.view_entities = session.view.entity_count();
  result.reduction_ratio = session.view.reduction_ratio();

  // Memory gate and analysis.
  pool.ensure_seeded(embedder);
  const auto root = memory::get_exp(pool, buffer, {q.text, std::nullopt, limits.d_max, limits.d_max}, policy,
                                    limits.w_exp, embedder);
  const auto decision = gate_brain_usage(root.records, limits.gate_threshold);
  auto analysis = question_analysis(q.text, session, g, decision, gw, limits.d_max);
  result.memory_reused = analysis.indicator.source == retrieval::IndicatorSource::kMemory;
  result.analysis_source = analysis.indicator.source;

  ReasoningTree tree;
  tree.indicator = analysis.indicator;
  tree.d_predict = analysis.d_predict;
  result.indicator = memory_form(tree.indicator, session.view);
  const auto first = memory::init_policy(root.records, tree.d_predict, limits.d_max);
  for (std::size_t i = 0; i < analysis.splits.size(); ++i) {
    NodeState node;
    node.index = i;
    node.split_question = analysis.splits[i];
    node.split_question_anon = analysis.splits_anon[i];
    node.at = first;
    tree.nodes.push_back(std::move(node));
  }

  RunContext ctx;
  ctx.graph = &g;
  ctx.session = &session;
  ctx.embedder = &embedder;
  ctx.gateway = &gw;
  ctx.pool = &pool;
  ctx.buffer = &buffer;
  ctx.policy = policy;
  ctx.limits = limits;
  ctx.question = q.text;
  ctx.question_anon = analysis.question_anon;

  for (auto& node : tree.nodes) {
    node_verification_loop(node, tree, ctx);
    if (node.status == NodeStatus::kVerified && node.evidence.sufficient_main) break;
  }

  // Synthesis and global sufficiency.
  const NodeState* deciding = nullptr;
  const NodeState* main_node = nullptr;
  bool all_verified = true;
  for (const auto& node : tree.nodes) {
    if (node.status != NodeStatus::kVerified) {
      all_verified = false;
      continue;
    }
    deciding = &node;
    if (node.evidence.sufficient_main) main_node = &node;
  }
  if (main_node) deciding = main_node;
  result.sufficient = deciding && (all_verified || main_node);

  if (result.sufficient) {
    for (const auto& node : tree.nodes) {
      if (node.status != NodeStatus::kVerified) continue;
      for (auto t : node.evidence.triples) {
        if (std::find(result.evidence.begin(), result.evidence.end(), t) == result.evidence.end()) {
          result.evidence.push_back(t);
        }
      }
    }
    for (auto t : result.evidence) result.evidence_text.push_back(g.describe(t));
    if (auto final = hand_json(gw, "hand.final_answer",
                               {{"question", q.text}, {"evidence", join(result.evidence_text, "\n")}})) {
      result.answers = string_list(*final, "answer");
      if (final->contains("explanation") && (*final)["explanation"].is_string()) {
        result.explanation = (*final)["explanation"].get<std::string>();
      }
    }
    if (result.answers.empty()) {
      result.answers = main_node ? main_node->evidence.main_answer : deciding->evidence.split_answer;
    }
    std::vector<std::string> unique;
    for (auto& a : result.answers) {
      if (std::find(unique.begin(), unique.end(), a) == unique.end()) unique.push_back(a);
    }
    result.answers = std::move(unique);
    if (result.answers.empty()) result.sufficient = false;
  }

  if (result.sufficient) {
    std::set<std::string> labels;
    for (auto t : result.evidence) {
      labels.insert(normalize(g.node(g.triple(t).head).label));
      labels.insert(normalize(g.node(g.triple(t).tail).label));
    }
    const bool grounded = std::all_of(result.answers.begin(), result.answers.end(),
                                      [&](const std::string& a) { return labels.count(normalize(a)) > 0; });
    bool predicted = false;
    for (const auto& node : tree.nodes) {
      if (node.status == NodeStatus::kVerified && node.pools.back().phase == Mode::kPredict) predicted = true;
    }
    result.source = !grounded ? AnswerSource::kKgInspiredLlm
                              : (predicted ? AnswerSource::kLlmInspiredKg : AnswerSource::kKgOnly);

    // Write-back of the anonymized artifacts.
    memory::Artifacts art;
    art.question = q.text;
    art.anon_indicator = result.indicator;
    art.d_predict = tree.d_predict;
    art.trajectory = deciding->trajectory;
    art.outcome.sufficient = true;
    for (const auto& node : tree.nodes) {
      for (const auto& w : node.warnings) art.outcome.warnings.push_back(w);
      if (node.status != NodeStatus::kVerified) continue;
      for (const auto& p : node.pools.back().paths) {
        bool used = false;
        for (const auto& raw : session.view.expand(p.start, p.steps, g)) {
          for (auto t : raw.triples) {
            if (std::find(node.evidence.triples.begin(), node.evidence.triples.end(), t) !=
                node.evidence.triples.end()) {
              used = true;
            }
          }
        }
        if (used) art.templates.push_back(retrieval::canonical_text(p, session.view, session.view.anchors));
      }
    }
    try {
      result.written_record = memory::write_back_if_success(pool, buffer, art, policy, gw.boundary(), embedder);
    } catch (const LeakageGuardError& e) {
      spdlog::warn("experience write-back refused: {}", e.what());
      gw.note(std::string("write-back refused: ") + e.what());
    }
  }

  for (const auto& node : tree.nodes) {
    result.nodes.push_back({node.split_question, node.status, node.trajectory, node.reason});
  }
  result.tally = gw.tally();
  result.transcript = gw.transcript();
  for (const auto& e : result.transcript.events()) {
    if (e.kind == gateway::EventKind::kBrainCall && e.template_id == "brain.question_analysis") {
      ++result.brain_analysis_calls;
    }
  }
  return result;
}

}  // namespace privgemo::controller
