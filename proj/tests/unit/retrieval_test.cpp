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

#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "privgemo/errors.hpp"
#include "privgemo/retrieval.hpp"
#include "support/fixtures.hpp"
#include "support/path_oracle.hpp"

namespace privgemo::retrieval {
namespace {

using anon::ViewIndex;

struct Fixture {
  kg::KnowledgeGraph g;
  anon::Session s;
  gateway::HashingEmbedder embedder;

  Fixture(const std::string& file, const std::vector<std::string>& anchors, anon::PrivacyPolicy p = {})
      : g(kg::KnowledgeGraph::load(test::fixture(file))), s(anon::anonymize(test::whole_graph(g, anchors), p)) {}

  ViewIndex node(const std::string& label) const { return *s.view.node_of_raw(*g.find_entity(label)); }
  std::string disp(const std::string& label) const { return s.view.nodes[node(label)].display; }
};

TEST(Indicator, SingleAnchorTwoHops) {
  Fixture f("mascot.kg", {"Lou Seal"});
  auto ind = parse_indicator(f.disp("Lou Seal") + " -- mascot_team -- ?team -- won -- ?ws_event", f.s.view,
                             IndicatorSource::kBrain);
  EXPECT_EQ(ind.d_predict, 2u);
  EXPECT_EQ(ind.answer_slot, 2u);
  EXPECT_TRUE(ind.answer_outside());
  EXPECT_FALSE(ind.answer_first());
  EXPECT_EQ(ind.canonical(), "TOPIC_1 -- mascot_team -- X -- won -- ANS");
  EXPECT_EQ(ind.anchors(), std::vector<ViewIndex>{f.node("Lou Seal")});
}

TEST(Indicator, AdjacentAnswerAndParentheticals) {
  Fixture f("mascot.kg", {"Lou Seal"});
  auto ind = parse_indicator("?team (the club) -- mascot_of -- " + f.disp("Lou Seal"), f.s.view, IndicatorSource::kHand);
  EXPECT_EQ(ind.d_predict, 1u);
  EXPECT_TRUE(ind.answer_first());
  EXPECT_EQ(ind.slots[0].text, "?team");
}

TEST(Indicator, ThreeAnchorsMiddleAnswer) {
  Fixture f("paris.kg", {"Paris", "Mayor", "Dublin"});
  auto ind = parse_indicator(f.disp("Paris") + " -- governing_officials -- " + f.disp("Mayor") +
                                 " -- officeholder -- ?person -- place_of_birth -- " + f.disp("Dublin"),
                             f.s.view, IndicatorSource::kBrain);
  EXPECT_EQ(ind.d_predict, 2u);
  EXPECT_EQ(ind.anchors().size(), 3u);
  EXPECT_FALSE(ind.answer_outside());
}

TEST(Indicator, Malformed) {
  Fixture f("mascot.kg", {"Lou Seal"});
  EXPECT_THROW(parse_indicator("just prose", f.s.view, IndicatorSource::kBrain), MalformedModelOutput);
  EXPECT_THROW(parse_indicator("?a -- r -- ?b", f.s.view, IndicatorSource::kBrain), MalformedModelOutput);
  EXPECT_THROW(parse_indicator(f.disp("Lou Seal") + " -- r -- team", f.s.view, IndicatorSource::kBrain),
               MalformedModelOutput);
  auto fb = fallback_indicator(f.s.view, 3);
  EXPECT_EQ(fb.d_predict, 3u);
  EXPECT_TRUE(fb.answer_outside());
}

TEST(TreeBiBfs, LejreTwoAnchorsDepthOne) {
  Fixture f("lejre.kg", {"Lejre Municipality", "Germany"});
  SearchSpec spec;
  spec.anchors = {f.node("Lejre Municipality"), f.node("Germany")};
  spec.depth = 1;
  auto paths = tree_bibfs(f.s.view, spec, &f.embedder);
  ASSERT_FALSE(paths.empty());
  bool via_denmark = false;
  for (const auto& p : paths) {
    EXPECT_EQ(p.length(), 2u);
    EXPECT_EQ(p.nodes.front(), f.node("Lejre Municipality"));
    EXPECT_EQ(p.nodes.back(), f.node("Germany"));
    if (p.nodes[1] == f.node("Denmark")) via_denmark = true;
  }
  EXPECT_TRUE(via_denmark);
}

TEST(TreeBiBfs, MascotSingleAnchorDepthTwo) {
  Fixture f("mascot.kg", {"Lou Seal"});
  SearchSpec spec;
  spec.anchors = {f.node("Lou Seal")};
  spec.depth = 2;
  auto paths = tree_bibfs(f.s.view, spec, &f.embedder);
  ASSERT_EQ(paths.size(), 1u);
  EXPECT_EQ(paths[0].nodes.back(), f.node("2014 World Series"));
  EXPECT_EQ(chain_text(paths[0], f.s.view).find("Lou Seal"), std::string::npos);
}

TEST(TreeBiBfs, DisconnectedAnchorsGiveNothing) {
  kg::KnowledgeGraph::Builder b;
  b.add("a", "p.q.r", "b");
  b.add("c", "x.y.z", "d");
  auto g = std::move(b).build();
  auto s = anon::anonymize(test::whole_graph(g, {"a", "c"}), {});
  for (std::size_t d = 1; d <= 3; ++d) {
    SearchSpec spec;
    spec.anchors = s.view.anchors;
    spec.depth = d;
    EXPECT_TRUE(tree_bibfs(s.view, spec, nullptr).empty());
  }
}

TEST(TreeBiBfs, MatchesBruteForceOnRandomGraphs) {
  std::mt19937_64 rng(20260415);
  gateway::HashingEmbedder embedder;
  for (int round = 0; round < 60; ++round) {
    auto c = test::random_case(rng, 30, 3);
    auto s = anon::anonymize(test::whole_graph(c.graph, c.anchors), {});
    for (std::size_t d = 1; d <= 3; ++d) {
      for (bool tail : {false, true}) {
        SearchSpec spec;
        spec.anchors = s.view.anchors;
        spec.tail = tail;
        spec.depth = d;
        spec.beam = kUnbounded;
        const auto oracle = test::brute_force_paths(s.view, spec.anchors, tail, d);
        std::set<std::pair<ViewIndex, std::vector<anon::PathStep>>> got;
        for (const auto& p : tree_bibfs(s.view, spec, &embedder)) {
          EXPECT_TRUE(got.insert({p.start, p.steps}).second);
          EXPECT_GT(p.length(), spec.anchors.size() * (d - 1));
          EXPECT_LE(p.length(), spec.anchors.size() * d);
        }
        ASSERT_EQ(got, oracle) << "round " << round << " d=" << d << " tail=" << tail;

        spec.beam = 4;
        spec.relevance = "TOPIC_1 -- r.s -- X -- r.s -- ANS";
        for (const auto& p : tree_bibfs(s.view, spec, &embedder)) {
          EXPECT_TRUE(oracle.count({p.start, p.steps}));
        }
      }
    }
  }
}

std::vector<ReasoningPath> mascot_like_pool(const Fixture& f) {
  std::vector<ReasoningPath> out;
  for (std::size_t d = 1; d <= 2; ++d) {
    SearchSpec spec;
    spec.anchors = f.s.view.anchors;
    spec.depth = d;
    for (auto& p : tree_bibfs(f.s.view, spec, nullptr)) out.push_back(std::move(p));
  }
  return out;
}

TEST(FuzzySelect, AlphaOneIsIndicatorOnly) {
  Fixture f("lejre.kg", {"Germany"});
  auto ind = parse_indicator(f.disp("Germany") + " -- location.location -- ?x", f.s.view, IndicatorSource::kHand);
  auto pool = mascot_like_pool(f);
  ASSERT_GT(pool.size(), 3u);
  auto ranked = fuzzy_select(pool, f.s.view, ind, {}, 1.0, 100, f.embedder);
  ASSERT_EQ(ranked.size(), pool.size());
  for (std::size_t i = 1; i < ranked.size(); ++i) {
    const double a = f.embedder.similarity(canonical_text(ranked[i - 1], f.s.view, ind.anchors()), ind.canonical());
    EXPECT_NEAR(ranked[i - 1].score, a, 1e-12);
    EXPECT_GE(ranked[i - 1].score, ranked[i].score);
  }
  auto with_memory = fuzzy_select(pool, f.s.view, ind, {"unrelated words"}, 1.0, 100, f.embedder);
  for (std::size_t i = 0; i < ranked.size(); ++i) EXPECT_EQ(ranked[i], with_memory[i]);
}

TEST(FuzzySelect, AlphaZeroIdenticalTemplateFirst) {
  Fixture f("lejre.kg", {"Germany"});
  auto ind = parse_indicator(f.disp("Germany") + " -- x -- ?x", f.s.view, IndicatorSource::kHand);
  auto pool = mascot_like_pool(f);
  const auto& target = pool[pool.size() / 2];
  const auto tpl = canonical_text(target, f.s.view, ind.anchors());
  auto ranked = fuzzy_select(pool, f.s.view, ind, {tpl}, 0.0, 3, f.embedder);
  ASSERT_EQ(ranked.size(), 3u);
  EXPECT_NEAR(ranked[0].score, 1.0, 1e-9);
  EXPECT_EQ(canonical_text(ranked[0], f.s.view, ind.anchors()), tpl);
}

TEST(FuzzySelect, IndependentOfInputOrder) {
  Fixture f("lejre.kg", {"Germany"});
  auto ind = parse_indicator(f.disp("Germany") + " -- borders -- ?x", f.s.view, IndicatorSource::kHand);
  auto pool = mascot_like_pool(f);
  auto a = fuzzy_select(pool, f.s.view, ind, {}, 0.6, 5, f.embedder);
  std::reverse(pool.begin(), pool.end());
  auto b = fuzzy_select(pool, f.s.view, ind, {}, 0.6, 5, f.embedder);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

std::shared_ptr<gateway::Backend> scripted(nlohmann::json rules) {
  return gateway::ScriptedBackend::from_json({{"name", "test"}, {"rules", std::move(rules)}});
}

TEST(BrainSelect, RankingParsedAndFilled) {
  Fixture f("lejre.kg", {"Germany"});
  auto ind = parse_indicator(f.disp("Germany") + " -- borders -- ?x", f.s.view, IndicatorSource::kHand);
  auto pool = mascot_like_pool(f);
  auto brain = scripted(nlohmann::json::array(
      {{{"template", "brain.path_selection"},
        {"reply", {{"top_paths", {{{"rank", 1}, {"path_id", "P4"}}, {{"rank", 2}, {"path_id", "P99"}}}}}}}}));
  gateway::Gateway gw(brain, nullptr);
  auto out = brain_select(pool, f.s.view, "q", ind, "sq", 3, gw);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0], pool[3]);
  EXPECT_EQ(out[1], pool[0]);
  EXPECT_EQ(out[2], pool[1]);
  EXPECT_EQ(gw.tally().brain_calls, 1u);
}

TEST(BrainSelect, FallbacksKeepIncomingOrder) {
  Fixture f("lejre.kg", {"Germany"});
  auto ind = parse_indicator(f.disp("Germany") + " -- borders -- ?x", f.s.view, IndicatorSource::kHand);
  auto pool = mascot_like_pool(f);
  gateway::GatewayOptions off;
  off.brain_enabled = false;
  gateway::Gateway disabled(nullptr, nullptr, off);
  auto out = brain_select(pool, f.s.view, "q", ind, "sq", 3, disabled);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0], pool[0]);
  EXPECT_EQ(disabled.tally().brain_calls, 0u);

  gateway::Gateway garbled(scripted(nlohmann::json::array({{{"template", "brain.path_selection"}, {"reply", "no idea"}}})),
                           nullptr);
  out = brain_select(pool, f.s.view, "q", ind, "sq", 3, garbled);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[2], pool[2]);
  EXPECT_EQ(garbled.tally().brain_calls, 1u);
}

TEST(BrainSelect, PayloadCarriesNoRawLabels) {
  Fixture f("lejre.kg", {"Germany"});
  auto ind = parse_indicator(f.disp("Germany") + " -- borders -- ?x", f.s.view, IndicatorSource::kHand);
  auto counting = std::make_shared<gateway::CountingBackend>(
      scripted(nlohmann::json::array({{{"template", "brain.path_selection"}, {"reply", {{"top_paths", {"P1"}}}}}})));
  gateway::Gateway gw(counting, nullptr);
  gw.set_boundary(gateway::BoundaryScanner(f.s.dictionary));
  brain_select(mascot_like_pool(f), f.s.view, "q", ind, "sq", 3, gw);
  gateway::BoundaryScanner scan(f.s.dictionary);
  EXPECT_FALSE(scan.find(gw.transcript().brain_payloads()));
  EXPECT_EQ(counting->count(), 1u);
}

struct PhaseFixture : Fixture {
  Indicator ind;
  std::shared_ptr<gateway::Gateway> gw;
  ExplorationContext ctx;

  PhaseFixture(const std::string& file, const std::vector<std::string>& anchors, const std::string& indicator_tpl,
               nlohmann::json brain_rules, nlohmann::json hand_rules)
      : Fixture(file, anchors) {
    std::string text = indicator_tpl;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      const std::string key = "TE" + std::to_string(i + 1);
      text.replace(text.find(key), key.size(), disp(anchors[i]));
    }
    ind = parse_indicator(text, s.view, IndicatorSource::kBrain);
    gw = std::make_shared<gateway::Gateway>(brain_rules.empty() ? nullptr : scripted(brain_rules),
                                            hand_rules.empty() ? nullptr : scripted(hand_rules));
    gw->set_boundary(gateway::BoundaryScanner(s.dictionary));
    ctx.session = &s;
    ctx.graph = &g;
    ctx.embedder = &embedder;
    ctx.gateway = gw.get();
    ctx.indicator = &ind;
    ctx.question = "raw question";
    ctx.question_anon = "anon question";
  }
};

TEST(ExploreTopic, MascotPoolHoldsChampionshipChain) {
  PhaseFixture f("mascot.kg", {"Lou Seal"}, "TE1 -- mascot_team -- ?team -- won -- ?ws_event", {}, {});
  auto pool = explore_topic(f.ctx, 2);
  EXPECT_EQ(pool.phase, Mode::kTopic);
  ASSERT_EQ(pool.paths.size(), 1u);
  EXPECT_EQ(pool.paths[0].nodes.back(), f.node("2014 World Series"));
  EXPECT_EQ(f.gw->tally().kg_expansions, 1u);
  EXPECT_EQ(f.gw->tally().expansion_triples, 4u);
}

TEST(ExploreTopic, ShallowBudgetMissesAnswer) {
  PhaseFixture f("mascot.kg", {"Lou Seal"}, "TE1 -- mascot_team -- ?team", {}, {});
  auto pool = explore_topic(f.ctx, 1);
  ASSERT_EQ(pool.paths.size(), 1u);
  EXPECT_EQ(pool.paths[0].nodes.back(), f.node("San Francisco Giants"));
}

TEST(ExploreTopic, SelectionCapsPool) {
  auto brain = nlohmann::json::array({{{"template", "brain.path_selection"}, {"reply", {{"top_paths", {"P2"}}}}}});
  PhaseFixture f("lejre.kg", {"Germany"}, "TE1 -- borders -- ?x", brain, {});
  auto pool = explore_topic(f.ctx, 1);
  EXPECT_EQ(pool.paths.size(), 3u);
  EXPECT_TRUE(pool.brain_selected);
  EXPECT_EQ(f.gw->tally().brain_calls, 1u);
}

TEST(ExploreRefine, FollowUpFindsBorderHop) {
  auto hand = nlohmann::json::array(
      {{{"template", "hand.follow_up"},
        {"reply", "Missing: neighbours\nQuery: Which countries does Germany share a border with?\nReasoning: hop"}},
       {{"template", "hand.entity_extraction"}, {"when", {"share a border"}}, {"reply", {{"mentions", {"Germany"}}}}}});
  auto brain = nlohmann::json::array({{{"template", "brain.path_selection"}, {"reply", {{"top_paths", {"P1"}}}}}});
  PhaseFixture f("lejre.kg", {"Lejre Municipality"}, "TE1 -- country -- ?country", brain, hand);
  CandidatePool previous = explore_topic(f.ctx, 1);
  auto pool = explore_refine(f.ctx, previous, 1);
  EXPECT_EQ(pool.phase, Mode::kRefine);
  ASSERT_FALSE(pool.paths.empty());
  for (const auto& p : pool.paths) EXPECT_EQ(p.start, f.node("Germany"));
}

TEST(ExploreRefine, UnalignableFollowUpIsEmpty) {
  auto hand = nlohmann::json::array(
      {{{"template", "hand.follow_up"}, {"reply", "Missing: x\nQuery: zzzz qqqq\nReasoning: none"}},
       {{"template", "hand.entity_extraction"}, {"reply", {{"mentions", {"zzzz qqqq"}}}}}});
  PhaseFixture f("lejre.kg", {"Lejre Municipality"}, "TE1 -- country -- ?country", {}, hand);
  auto pool = explore_refine(f.ctx, {}, 1);
  EXPECT_TRUE(pool.paths.empty());
}

TEST(ExplorePredict, BridgeTargetAndHallucinations) {
  auto brain = nlohmann::json::array(
      {{{"template", "brain.predict"},
        {"reply", R"({"predictions": [{"target": "ent_deadbeef"}, {"target": "{ent_of:x}"}]})"}}});
  PhaseFixture f("mascot.kg", {"Lou Seal"}, "TE1 -- mascot_team -- ?team -- won -- ?ws_event", brain, {});
  // Point the scripted reply at the championship supernode token.
  const auto ws = f.disp("2014 World Series");
  auto rules = nlohmann::json::array(
      {{{"template", "brain.predict"},
        {"reply", nlohmann::json{{"predictions", {{{"target", "ent_deadbeef"}}, {{"target", "{" + ws + "}"}}}}}}}});
  f.gw = std::make_shared<gateway::Gateway>(scripted(rules), nullptr);
  f.ctx.gateway = f.gw.get();
  auto pool = explore_predict(f.ctx, {}, 1);
  EXPECT_EQ(pool.dropped_predictions, 1u);
  ASSERT_EQ(pool.predicted.size(), 1u);
  ASSERT_EQ(pool.paths.size(), 1u);
  EXPECT_EQ(pool.paths[0].nodes.back(), f.node("2014 World Series"));
  EXPECT_FALSE(pool.paths[0].has_tail);
}

TEST(ExplorePredict, AnchorPredictionLeavesSetUnchanged) {
  PhaseFixture f("mascot.kg", {"Lou Seal"}, "TE1 -- mascot_team -- ?team -- won -- ?ws_event", {}, {});
  auto rules = nlohmann::json::array(
      {{{"template", "brain.predict"},
        {"reply", nlohmann::json{{"predictions", {f.disp("Lou Seal")}}}}}});
  f.gw = std::make_shared<gateway::Gateway>(scripted(rules), nullptr);
  f.ctx.gateway = f.gw.get();
  auto pool = explore_predict(f.ctx, {}, 2);
  EXPECT_TRUE(pool.predicted.empty());
  ASSERT_EQ(pool.paths.size(), 2u);  // depth 1 and depth 2 tails
}

TEST(RawPaths, NumberedExpansion) {
  Fixture f("mascot.kg", {"Lou Seal"});
  SearchSpec spec;
  spec.anchors = f.s.view.anchors;
  spec.depth = 2;
  auto text = numbered_raw_paths(tree_bibfs(f.s.view, spec, nullptr), f.s.view, f.g);
  EXPECT_NE(text.find("[P1] (Lou Seal, sports.mascot.team, San Francisco Giants); (San Francisco Giants, "
                      "sports.sports_team.championships, 2014 World Series)"),
            std::string::npos);
  EXPECT_NE(text.find("[P3]"), std::string::npos);
}

}  // namespace
}  // namespace privgemo::retrieval
