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

#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "privgemo/errors.hpp"
#include "privgemo/harness.hpp"
#include "support/fixtures.hpp"

namespace privgemo::controller {
namespace {

using gateway::EventKind;
using test::fixture;

struct CaseStudy {
  const char* id;
  const char* graph;
  const char* question;
  const char* answer;
};

const CaseStudy kCases[] = {
    {"table6", "mascot.kg", "Lou Seal is the mascot for the team that last won the World Series when?",
     "2014 World Series"},
    {"table7", "lejre.kg", "What European Union country sharing borders with Germany contains the Lejre Municipality?",
     "Denmark"},
    {"table8", "guatemala.kg", "Which nation has the Alta Verapaz Department and is in Central America?", "Guatemala"},
    {"table9", "obama.kg", "What nationality is the spouse of Barack Obama?", "American"},
    {"table10", "paris.kg", "Which person served as the mayor of Paris and was born in Dublin?", "Sir Charles Cameron"},
};

anon::PrivacyPolicy policy_at(double ratio) {
  anon::PrivacyPolicy p;
  p.anonymization_ratio = ratio;
  return p;
}

std::shared_ptr<gateway::Backend> mock(const std::string& name) {
  return harness::load_mock({fixture("mocks/" + name + ".json")});
}

struct Bench {
  gateway::HashingEmbedder embedder;
  memory::ExperiencePool pool{embedder.dimension()};
  memory::HighFreqBuffer buffer;

  RunResult ask(const kg::KnowledgeGraph& g, const std::string& text, const Backends& backends, double ratio = 1.0,
                Limits limits = {}) {
    grounding::Question q{"q", text, {}};
    return run(q, g, policy_at(ratio), pool, buffer, backends, embedder, limits);
  }
};

std::size_t count_events(const gateway::Transcript& t, EventKind kind, std::string_view template_id = {}) {
  std::size_t n = 0;
  for (const auto& e : t.events()) {
    if (e.kind == kind && (template_id.empty() || e.template_id == template_id)) ++n;
  }
  return n;
}

memory::ScoredRecord scored(double hybrid, bool sufficient = true, bool exemplar = false) {
  memory::ScoredRecord s;
  s.record.id = 7;
  s.record.anon_indicator = "TOPIC_1 -- r -- ANS";
  s.record.outcome.sufficient = sufficient;
  s.record.exemplar = exemplar;
  s.hybrid = hybrid;
  s.buffer = hybrid;
  return s;
}

TEST(Gate, EmptyMemoryCallsBrain) {
  const auto d = gate_brain_usage({});
  EXPECT_TRUE(d.call_brain);
  EXPECT_FALSE(d.reuse_memory);
}

TEST(Gate, IdenticalRecordIsReused) {
  const auto d = gate_brain_usage({scored(1.0)});
  EXPECT_FALSE(d.call_brain);
  EXPECT_TRUE(d.reuse_memory);
  ASSERT_TRUE(d.record.has_value());
  EXPECT_EQ(d.record->id, 7u);
}

TEST(Gate, WeakOrUnusableRecordsCallBrain) {
  EXPECT_TRUE(gate_brain_usage({scored(0.5)}).call_brain);
  EXPECT_TRUE(gate_brain_usage({scored(0.849)}).call_brain);
  EXPECT_FALSE(gate_brain_usage({scored(0.85)}).call_brain);
  EXPECT_TRUE(gate_brain_usage({scored(1.0, /*sufficient=*/false)}).call_brain);
  EXPECT_TRUE(gate_brain_usage({scored(1.0, true, /*exemplar=*/true)}).call_brain);
}

TEST(Limits, IterationCapDefaultsToModesTimesDepth) {
  Limits l;
  EXPECT_EQ(l.iteration_cap(), 9u);
  l.d_max = 2;
  EXPECT_EQ(l.iteration_cap(), 6u);
  l.max_iterations = 4;
  EXPECT_EQ(l.iteration_cap(), 4u);
}

class CaseStudies : public ::testing::TestWithParam<std::tuple<int, double>> {};

TEST_P(CaseStudies, AnswersMatchAtEveryRatio) {
  const auto& c = kCases[std::get<0>(GetParam())];
  const double ratio = std::get<1>(GetParam());
  const auto g = kg::KnowledgeGraph::load(fixture(c.graph));
  const auto m = mock(c.id);
  Bench b;
  const auto r = b.ask(g, c.question, {m, m}, ratio);
  ASSERT_EQ(r.answers.size(), 1u) << c.id;
  EXPECT_EQ(r.answers[0], c.answer);
  EXPECT_TRUE(r.sufficient);
  EXPECT_EQ(r.source, AnswerSource::kKgOnly);
  // Every KG-only answer is the label of an evidence entity.
  bool grounded = false;
  for (auto t : r.evidence) {
    const auto& tr = g.triple(t);
    grounded |= g.node(tr.head).label == c.answer || g.node(tr.tail).label == c.answer;
  }
  EXPECT_TRUE(grounded);
  EXPECT_GE(r.reduction_ratio, 0.0);
  EXPECT_LE(r.reduction_ratio, 1.0);
}

INSTANTIATE_TEST_SUITE_P(Fixtures, CaseStudies,
                         ::testing::Combine(::testing::Range(0, 5), ::testing::Values(0.0, 0.3, 0.5, 0.7, 1.0)));

TEST(Run, MascotVerifiedAtTopicDepthTwo) {
  const auto g = kg::KnowledgeGraph::load(fixture("mascot.kg"));
  const auto m = mock("table6");
  Bench b;
  const auto r = b.ask(g, kCases[0].question, {m, m});
  // Two split questions; the first already settles the main question.
  ASSERT_EQ(r.nodes.size(), 2u);
  EXPECT_EQ(r.nodes[0].status, NodeStatus::kVerified);
  EXPECT_EQ(r.nodes[1].status, NodeStatus::kActive);
  ASSERT_EQ(r.nodes[0].trajectory.size(), 1u);
  EXPECT_EQ(memory::to_string(r.nodes[0].trajectory[0]), "Topic@2");
  std::vector<std::string> facts;
  for (auto t : r.evidence) facts.push_back(g.describe(t));
  std::sort(facts.begin(), facts.end());
  EXPECT_EQ(facts, (std::vector<std::string>{
                       "(Lou Seal, sports.mascot.team, San Francisco Giants)",
                       "(San Francisco Giants, sports.sports_team.championships, 2014 World Series)"}));
  EXPECT_EQ(r.indicator, "TOPIC_1 -- mascot_team -- X -- won -- ANS");
  EXPECT_EQ(r.analysis_source, retrieval::IndicatorSource::kBrain);
  EXPECT_TRUE(r.written_record.has_value());
}

TEST(Run, SecondIdenticalRunSkipsBrainAnalysis) {
  const auto g = kg::KnowledgeGraph::load(fixture("mascot.kg"));
  auto brain = std::make_shared<gateway::CountingBackend>(mock("table6"));
  const auto hand = mock("table6");
  Bench b;
  b.pool.ensure_seeded(b.embedder);
  const auto before = b.pool.size();

  const auto r1 = b.ask(g, kCases[0].question, {brain, hand});
  EXPECT_EQ(b.pool.size(), before + 1);
  EXPECT_EQ(r1.brain_analysis_calls, 1u);

  const auto r2 = b.ask(g, kCases[0].question, {brain, hand});
  EXPECT_EQ(r2.answers, r1.answers);
  EXPECT_EQ(r2.brain_analysis_calls, 0u);
  EXPECT_TRUE(r2.memory_reused);
  EXPECT_EQ(r2.analysis_source, retrieval::IndicatorSource::kMemory);
  EXPECT_LE(r2.tally.brain_calls, r1.tally.brain_calls);
  EXPECT_EQ(b.pool.size(), before + 1);
}

TEST(Run, ShallowAnalysisEscalatesOnce) {
  const auto g = kg::KnowledgeGraph::load(fixture("mascot.kg"));
  const auto m = mock("table6_shallow");
  Bench b;
  const auto r = b.ask(g, kCases[0].question, {m, m});
  ASSERT_EQ(r.nodes.size(), 1u);
  EXPECT_EQ(r.nodes[0].status, NodeStatus::kVerified);
  EXPECT_EQ(r.nodes[0].trajectory.size(), 2u);
  EXPECT_EQ(count_events(r.transcript, EventKind::kKgExpansion), 2u);
  EXPECT_EQ(r.tally.kg_expansions, 2u);
  EXPECT_EQ(r.answers, std::vector<std::string>{"2014 World Series"});
}

TEST(Run, DisconnectedAnchorsArePruned) {
  std::istringstream tsv(
      "Alpha Node\tlinks.to\tBeta Node\n"
      "Gamma Node\tlinks.to\tDelta Node\n"
      "Beta Node\tlinks.also\tEpsilon Node\n");
  const auto g = kg::KnowledgeGraph::parse(tsv);
  auto scenario = nlohmann::json::parse(R"({"rules": [
    {"template": "hand.entity_extraction", "reply": {"mentions": ["Alpha Node", "Gamma Node"]}},
    {"template": "brain.question_analysis",
     "reply": "{\"indicator\": \"{topic_1} -- links -- ?x -- links -- {topic_2}\", \"split_questions\": [], \"D_predict\": 2}"}
  ]})");
  std::ifstream in(fixture("mocks/common.json"));
  for (const auto& rule : nlohmann::json::parse(in)["rules"]) scenario["rules"].push_back(rule);
  const auto both = gateway::ScriptedBackend::from_json(scenario);
  Bench b;
  const auto r = b.ask(g, "How is Alpha Node related to Gamma Node?", {both, both});
  ASSERT_FALSE(r.nodes.empty());
  for (const auto& n : r.nodes) {
    EXPECT_EQ(n.status, NodeStatus::kPruned);
    EXPECT_LE(n.trajectory.size(), Limits{}.iteration_cap());
  }
  EXPECT_FALSE(r.sufficient);
  EXPECT_TRUE(r.answers.empty());
  EXPECT_FALSE(r.written_record.has_value());
}

TEST(Run, NoTopicEntitiesThrows) {
  const auto g = kg::KnowledgeGraph::load(fixture("mascot.kg"));
  const auto m = mock("common");
  Bench b;
  EXPECT_THROW(b.ask(g, "What is the airspeed of an unladen swallow?", {m, m}), NoTopicEntities);
}

TEST(Termination, AdversarialHandPrunesEveryFixture) {
  for (const auto& c : kCases) {
    const auto g = kg::KnowledgeGraph::load(fixture(c.graph));
    auto adv = std::make_shared<gateway::AdversarialBackend>(mock(c.id));
    Bench b;
    const auto r = b.ask(g, c.question, {adv, adv});
    ASSERT_FALSE(r.nodes.empty()) << c.id;
    for (const auto& n : r.nodes) {
      EXPECT_EQ(n.status, NodeStatus::kPruned) << c.id;
      EXPECT_GE(n.trajectory.size(), 1u);
      EXPECT_LE(n.trajectory.size(), Limits{}.iteration_cap()) << c.id;
    }
    EXPECT_LE(r.tally.brain_calls, 12u) << c.id;
    EXPECT_FALSE(r.sufficient);
    EXPECT_TRUE(r.answers.empty());
  }
}

TEST(Termination, HallucinatingBrainStillHalts) {
  const auto g = kg::KnowledgeGraph::load(fixture("mascot.kg"));
  auto adv = std::make_shared<gateway::AdversarialBackend>(mock("adversarial"));
  Bench b;
  const auto r = b.ask(g, kCases[0].question, {adv, adv});
  EXPECT_EQ(r.analysis_source, retrieval::IndicatorSource::kFallback);
  for (const auto& n : r.nodes) {
    EXPECT_EQ(n.status, NodeStatus::kPruned);
    EXPECT_LE(n.trajectory.size(), Limits{}.iteration_cap());
  }
  EXPECT_LE(r.tally.brain_calls, 12u);
  EXPECT_TRUE(r.answers.empty());
}

TEST(Termination, BrainBudgetIsEnforced) {
  const auto g = kg::KnowledgeGraph::load(fixture("mascot.kg"));
  auto adv = std::make_shared<gateway::AdversarialBackend>(mock("adversarial"));
  Bench b;
  Limits limits;
  limits.max_brain_calls = 2;
  const auto r = b.ask(g, kCases[0].question, {adv, adv}, 1.0, limits);
  EXPECT_LE(r.tally.brain_calls, 2u);
}

TEST(Boundary, BrainPayloadsAtFullRatioCarryNoRawLabels) {
  for (const auto& c : kCases) {
    const auto g = kg::KnowledgeGraph::load(fixture(c.graph));
    std::vector<std::string> labels;
    for (const auto& n : g.nodes()) labels.push_back(n.label);
    for (const auto& rel : g.relations()) labels.push_back(rel.label);
    const gateway::BoundaryScanner scanner(labels);
    const auto m = mock(c.id);
    Bench b;
    const auto r = b.ask(g, c.question, {m, m}, 1.0);
    const auto payloads = r.transcript.brain_payloads();
    EXPECT_FALSE(payloads.empty()) << c.id;
    EXPECT_EQ(scanner.find(payloads), std::nullopt) << c.id << ": " << *scanner.find(payloads);
  }
}

TEST(Boundary, PlaintextRatioExposesRawLabels) {
  const auto g = kg::KnowledgeGraph::load(fixture("mascot.kg"));
  const auto m = mock("table6");
  Bench b;
  const auto r = b.ask(g, kCases[0].question, {m, m}, 0.0);
  EXPECT_NE(r.transcript.brain_payloads().find("Lou Seal"), std::string::npos);
}

TEST(Accounting, LedgerMatchesInterceptedSends) {
  for (const auto& c : kCases) {
    const auto g = kg::KnowledgeGraph::load(fixture(c.graph));
    auto brain = std::make_shared<gateway::CountingBackend>(mock(c.id));
    auto hand = std::make_shared<gateway::CountingBackend>(mock(c.id));
    Bench b;
    const auto r = b.ask(g, c.question, {brain, hand});
    EXPECT_EQ(r.tally.brain_calls, brain->count()) << c.id;
    EXPECT_EQ(r.tally.hand_calls, hand->count()) << c.id;
    EXPECT_EQ(count_events(r.transcript, EventKind::kBrainCall), brain->count()) << c.id;
    EXPECT_EQ(count_events(r.transcript, EventKind::kKgExpansion), r.tally.kg_expansions) << c.id;
  }
}

TEST(Run, HandOnlyWithoutBrain) {
  const auto g = kg::KnowledgeGraph::load(fixture("mascot.kg"));
  const auto m = mock("table6");
  Bench b;
  const auto r = b.ask(g, kCases[0].question, {nullptr, m});
  EXPECT_EQ(r.tally.brain_calls, 0u);
  EXPECT_EQ(r.analysis_source, retrieval::IndicatorSource::kHand);
  EXPECT_EQ(r.answers, std::vector<std::string>{"2014 World Series"});
}

}  // namespace
}  // namespace privgemo::controller
