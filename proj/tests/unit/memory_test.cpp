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

#include "privgemo/memory.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "privgemo/errors.hpp"

namespace privgemo::memory {
namespace {

using retrieval::Mode;

// Looks texts up in a table; everything else goes through the hashing
// encoder, so tests can pin exact cosines.
class TableEmbedder final : public gateway::Embedder {
 public:
  explicit TableEmbedder(std::size_t dim) : dim_(dim), fallback_(dim) {}
  void set(const std::string& text, gateway::Vector v) { table_[text] = std::move(v); }
  std::size_t dimension() const noexcept override { return dim_; }
  gateway::Vector embed(std::string_view text) const override {
    auto it = table_.find(std::string(text));
    return it != table_.end() ? it->second : fallback_.embed(text);
  }
  std::string name() const override { return "table"; }

 private:
  std::size_t dim_;
  gateway::HashingEmbedder fallback_;
  std::map<std::string, gateway::Vector> table_;
};

anon::PrivacyPolicy privacy_policy(double ratio = 1.0) {
  anon::PrivacyPolicy p;
  p.anonymization_ratio = ratio;
  return p;
}

ExperienceRecord record(const gateway::Vector& q, const gateway::Vector& i, std::string tag = "privacy|1.00") {
  ExperienceRecord r;
  r.anon_indicator = "TOPIC_1 -- r -- ANS";
  r.outcome.sufficient = true;
  r.q_embedding = q;
  r.i_embedding = i;
  r.policy_tag = std::move(tag);
  return r;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("privgemo_mem_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  return dir;
}

crypto::SecretBytes key(std::uint8_t fill) { return crypto::SecretBytes(crypto::Bytes(32, fill)); }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TEST(Steps, RoundTrip) {
  EXPECT_EQ(to_string(Step{Mode::kRefine, 3}), "Refine@3");
  EXPECT_EQ(step_from_string("Predict@2"), (Step{Mode::kPredict, 2}));
  EXPECT_FALSE(step_from_string("Topic"));
  EXPECT_FALSE(step_from_string("Sideways@1"));
  EXPECT_FALSE(step_from_string("Topic@x"));
}

TEST(PolicyTags, Compatibility) {
  EXPECT_TRUE(policy_compatible("*", privacy_policy(0.0)));
  EXPECT_TRUE(policy_compatible("privacy|1.00", privacy_policy(0.8)));
  EXPECT_FALSE(policy_compatible("privacy|1.00", privacy_policy(0.7)));
  EXPECT_FALSE(policy_compatible("utility|1.00", privacy_policy(1.0)));
  EXPECT_FALSE(policy_compatible("garbage", privacy_policy(1.0)));
}

TEST(GetExp, EmptyPoolGivesDefaultHints) {
  gateway::HashingEmbedder emb;
  ExperiencePool pool(emb.dimension());
  HighFreqBuffer buffer;
  auto res = get_exp(pool, buffer, {"who?", std::string("TOPIC_1 -- r -- ANS"), 2, 3}, privacy_policy(), 5, emb);
  EXPECT_TRUE(res.records.empty());
  EXPECT_TRUE(res.hints.call_brain);
  EXPECT_EQ(res.hints.mode, Mode::kTopic);
  EXPECT_EQ(res.hints.depth, 2u);
  EXPECT_THROW(get_exp(pool, buffer, {"who?"}, privacy_policy(), 0, emb), InvalidArgument);
}

TEST(GetExp, IdenticalRecordScoresOne) {
  gateway::HashingEmbedder emb;
  ExperiencePool pool(emb.dimension());
  HighFreqBuffer buffer;
  const std::string q = "What did the mascot's team win?";
  const std::string ind = "TOPIC_1 -- mascot_team -- X -- won -- ANS";
  pool.add(record(emb.embed("Where is Lejre?"), emb.embed("TOPIC_1 -- in -- ANS")));
  const auto id = pool.add(record(emb.embed(q), emb.embed(ind)));
  auto res = get_exp(pool, buffer, {q, ind, 2, 3}, privacy_policy(), 5, emb);
  ASSERT_EQ(res.records.size(), 2u);
  EXPECT_EQ(res.records[0].record.id, id);
  EXPECT_NEAR(res.records[0].hybrid, 1.0, 1e-9);
  EXPECT_EQ(pool.find(id)->hit_count, 1u);
  EXPECT_TRUE(buffer.contains(id));
}

TEST(GetExp, HybridArithmetic) {
  TableEmbedder emb(2);
  emb.set("q", {1.0, 0.0});
  emb.set("i", {1.0, 0.0});
  const gateway::Vector c09{0.9, std::sqrt(1 - 0.81)};
  const gateway::Vector c01{0.1, std::sqrt(1 - 0.01)};
  ExperiencePool pool(2);
  HighFreqBuffer buffer;
  const auto a = pool.add(record(c09, c09));
  const auto b = pool.add(record(c09, c01));
  EXPECT_NEAR(hybrid_score(*pool.find(a), emb.embed("q"), emb.embed("i")), 0.9, 1e-12);
  EXPECT_NEAR(hybrid_score(*pool.find(b), emb.embed("q"), emb.embed("i")), 0.5, 1e-12);
  auto res = get_exp(pool, buffer, {"q", std::string("i"), 2, 3}, privacy_policy(), 5, emb);
  ASSERT_EQ(res.records.size(), 2u);
  EXPECT_EQ(res.records[0].record.id, a);
  EXPECT_NEAR(res.records[0].buffer, 0.7 * 0.9, 1e-12);
}

TEST(GetExp, FiltersIncompatiblePolicies) {
  gateway::HashingEmbedder emb;
  ExperiencePool pool(emb.dimension());
  HighFreqBuffer buffer;
  pool.add(record(emb.embed("q"), emb.embed("i"), "utility|1.00"));
  const auto ok = pool.add(record(emb.embed("q"), emb.embed("i"), "*"));
  auto res = get_exp(pool, buffer, {"q", std::string("i")}, privacy_policy(), 5, emb);
  ASSERT_EQ(res.records.size(), 1u);
  EXPECT_EQ(res.records[0].record.id, ok);
}

TEST(GetExp, MatchesExhaustiveScan) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> normal;
  const std::size_t dim = 6;
  auto random_vec = [&] {
    gateway::Vector v(dim);
    double n = 0;
    for (auto& x : v) n += (x = normal(rng)) * x;
    for (auto& x : v) x /= std::sqrt(n);
    return v;
  };
  const char* tags[] = {"privacy|1.00", "privacy|0.50", "utility|1.00", "*"};
  for (int round = 0; round < 20; ++round) {
    TableEmbedder emb(dim);
    emb.set("q", random_vec());
    emb.set("i", random_vec());
    ExperiencePool pool(dim);
    HighFreqBuffer buffer;
    const std::size_t n = std::uniform_int_distribution<std::size_t>(0, 500)(rng);
    for (std::size_t k = 0; k < n; ++k) {
      auto r = record(random_vec(), random_vec(), tags[rng() % 4]);
      r.hit_count = rng() % 6;
      pool.add(std::move(r));
    }
    const std::size_t w = 1 + rng() % 8;
    const auto before = pool.snapshot();
    auto res = get_exp(pool, buffer, {"q", std::string("i")}, privacy_policy(), w, emb);

    std::vector<std::pair<double, std::uint64_t>> oracle;
    for (const auto& r : before) {
      if (!policy_compatible(r.policy_tag, privacy_policy())) continue;
      double qc = 0, ic = 0;
      for (std::size_t d = 0; d < dim; ++d) {
        qc += r.q_embedding[d] * emb.embed("q")[d];
        ic += r.i_embedding[d] * emb.embed("i")[d];
      }
      const double h = static_cast<double>(r.hit_count);
      oracle.emplace_back(-(0.7 * (0.5 * qc + 0.5 * ic) + 0.3 * h / (h + 1)), r.id);
    }
    std::sort(oracle.begin(), oracle.end());
    oracle.resize(std::min(oracle.size(), w));
    ASSERT_EQ(res.records.size(), oracle.size());
    for (std::size_t k = 0; k < oracle.size(); ++k) {
      EXPECT_EQ(res.records[k].record.id, oracle[k].second) << "round " << round << " rank " << k;
    }
  }
}

TEST(Buffer, PromotionIsMonotone) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::vector<std::pair<double, std::uint64_t>> state(20);
  for (auto& s : state) s.first = unit(rng);
  for (int k = 0; k < 1000; ++k) {
    auto& s = state[rng() % state.size()];
    const double before = buffer_score(s.first, s.second);
    ++s.second;
    EXPECT_GE(buffer_score(s.first, s.second), before);
  }
}

TEST(Buffer, EvictsLowestScore) {
  HighFreqBuffer buffer(3);
  buffer.touch(1, 0.5, 1);
  buffer.touch(2, 0.1, 2);
  buffer.touch(3, 0.9, 3);
  buffer.touch(4, 0.3, 4);
  EXPECT_EQ(buffer.size(), 3u);
  EXPECT_FALSE(buffer.contains(2));
  EXPECT_EQ(buffer.ids(), (std::vector<std::uint64_t>{1, 3, 4}));
}

ScoredRecord scored(std::vector<Step> trajectory, double hybrid = 0.95, std::vector<std::string> warnings = {}) {
  ScoredRecord s;
  s.record.trajectory = std::move(trajectory);
  s.record.outcome.sufficient = warnings.empty();
  s.record.outcome.warnings = std::move(warnings);
  s.hybrid = hybrid;
  return s;
}

TEST(InitPolicy, DefaultsAndReplay) {
  EXPECT_EQ(init_policy({}, 2, 3), (Step{Mode::kTopic, 2}));
  EXPECT_EQ(init_policy({scored({{Mode::kRefine, 3}})}, 2, 3), (Step{Mode::kRefine, 3}));
  EXPECT_EQ(init_policy({scored({{Mode::kPredict, 5}})}, 2, 3), (Step{Mode::kPredict, 3}));
  // Weak matches do not steer.
  EXPECT_EQ(init_policy({scored({{Mode::kRefine, 3}}, 0.3)}, 2, 3), (Step{Mode::kTopic, 2}));
  EXPECT_THROW(init_policy({}, 0, 3), InvalidArgument);
}

TEST(NextStep, DefaultLadder) {
  EXPECT_EQ(next_step({}, {{Mode::kTopic, 1}, 2, 3}).next, (Step{Mode::kTopic, 2}));
  EXPECT_EQ(next_step({}, {{Mode::kTopic, 2}, 2, 3}).next, (Step{Mode::kRefine, 3}));
  EXPECT_EQ(next_step({}, {{Mode::kRefine, 3}, 2, 3}).next, (Step{Mode::kPredict, 3}));
  EXPECT_EQ(next_step({}, {{Mode::kPredict, 2}, 1, 3}).next, (Step{Mode::kPredict, 3}));
  EXPECT_TRUE(next_step({}, {{Mode::kPredict, 3}, 2, 3}).prune);
}

TEST(NextStep, LadderTerminatesWithinBound) {
  for (std::size_t dp = 1; dp <= 3; ++dp) {
    Step at{Mode::kTopic, std::min<std::size_t>(dp, 3)};
    std::size_t iterations = 1;
    while (true) {
      auto s = next_step({}, {at, dp, 3});
      if (s.prune) break;
      at = s.next;
      ++iterations;
    }
    EXPECT_LE(iterations, 9u);
  }
}

TEST(NextStep, ReplaysTrajectoryAndHonoursWarnings) {
  auto s = next_step({scored({{Mode::kTopic, 2}, {Mode::kRefine, 3}})}, {{Mode::kTopic, 2}, 2, 3});
  EXPECT_EQ(s.next, (Step{Mode::kRefine, 3}));
  EXPECT_FALSE(s.prune);
  auto w = next_step({scored({}, 0.9, {"Topic@2: pruned, no path"})}, {{Mode::kTopic, 2}, 2, 3});
  EXPECT_TRUE(w.prune);
  auto other = next_step({scored({}, 0.9, {"Refine@3: pruned"})}, {{Mode::kTopic, 2}, 2, 3});
  EXPECT_FALSE(other.prune);
}

Artifacts mascot_artifacts(bool sufficient = true) {
  Artifacts a;
  a.question = "Lou Seal is the mascot for the team that last won the World Series when?";
  a.anon_indicator = "TOPIC_1 -- mascot_team -- X -- won -- ANS";
  a.d_predict = 2;
  a.trajectory = {{Mode::kTopic, 2}};
  a.templates = {"TOPIC_1 -- sports.mascot.team -- X -- sports.sports_team.championships -- ANS"};
  a.outcome.sufficient = sufficient;
  return a;
}

TEST(WriteBack, OnlySuccessWritesAndMerges) {
  gateway::HashingEmbedder emb;
  ExperiencePool pool(emb.dimension());
  HighFreqBuffer buffer;
  gateway::BoundaryScanner guard({"Lou Seal", "San Francisco Giants"});
  EXPECT_FALSE(write_back_if_success(pool, buffer, mascot_artifacts(false), privacy_policy(), guard, emb));
  EXPECT_EQ(pool.size(), 0u);
  auto id = write_back_if_success(pool, buffer, mascot_artifacts(), privacy_policy(), guard, emb);
  ASSERT_TRUE(id);
  EXPECT_EQ(pool.size(), 1u);
  EXPECT_EQ(pool.find(*id)->policy_tag, "privacy|1.00");
  auto again = mascot_artifacts();
  again.templates.push_back("TOPIC_1 -- r -- ANS");
  again.templates.push_back("TOPIC_1 -- r -- ANS");
  EXPECT_EQ(write_back_if_success(pool, buffer, again, privacy_policy(), guard, emb), id);
  EXPECT_EQ(pool.size(), 1u);
  EXPECT_EQ(pool.find(*id)->path_templates.size(), 2u);
  EXPECT_EQ(pool.find(*id)->hit_count, 1u);
}

TEST(WriteBack, GuardRefusesRawLabels) {
  gateway::HashingEmbedder emb;
  ExperiencePool pool(emb.dimension());
  HighFreqBuffer buffer;
  gateway::BoundaryScanner guard({"Lou Seal", "San Francisco Giants"});
  auto a = mascot_artifacts();
  a.templates = {"TOPIC_1 -- team -- San Francisco Giants -- won -- ANS"};
  EXPECT_THROW(write_back_if_success(pool, buffer, a, privacy_policy(), guard, emb), LeakageGuardError);
  EXPECT_EQ(pool.size(), 0u);
}

TEST(Pool, PrunesLowValueBeyondCap) {
  ExperiencePool pool(2, 3);
  const gateway::Vector v{1.0, 0.0};
  auto ex = record(v, v);
  ex.exemplar = true;
  ex.last_used = 1;
  pool.add(ex);
  auto hot = record(v, v);
  hot.hit_count = 5;
  const auto hot_id = pool.add(hot);
  const auto cold = pool.add(record(v, v));
  const auto fresh = pool.add(record(v, v));
  EXPECT_EQ(pool.size(), 3u);
  EXPECT_FALSE(pool.find(cold));
  EXPECT_TRUE(pool.find(hot_id));
  EXPECT_TRUE(pool.find(fresh));
  EXPECT_THROW(pool.add(record({1.0}, {1.0})), InvalidArgument);
}

TEST(Store, FreshStoreSeedsExemplarsAndPersists) {
  gateway::HashingEmbedder emb;
  const auto dir = scratch_dir("persist");
  HighFreqBuffer buffer;
  std::uint64_t id = 0;
  {
    auto pool = ExperiencePool::open(dir, key(1), emb);
    EXPECT_EQ(pool.size(), 5u);
    for (const auto& r : pool.snapshot()) {
      EXPECT_TRUE(r.exemplar);
      EXPECT_EQ(r.policy_tag, "*");
    }
    gateway::BoundaryScanner guard({"Lou Seal"});
    id = *write_back_if_success(pool, buffer, mascot_artifacts(), privacy_policy(), guard, emb);
    pool.record_hits({id});
  }
  auto pool = ExperiencePool::open(dir, key(1), emb);
  EXPECT_EQ(pool.size(), 6u);
  auto r = pool.find(id);
  ASSERT_TRUE(r);
  EXPECT_EQ(r->path_templates, mascot_artifacts().templates);
  EXPECT_EQ(r->trajectory, mascot_artifacts().trajectory);
  EXPECT_EQ(r->hit_count, 1u);
  EXPECT_EQ(r->q_embedding, emb.embed(mascot_artifacts().question));
  EXPECT_TRUE(r->payload_sealed);

  // Encrypted at rest: no template or indicator text in the files.
  const auto log = slurp(dir / "records.log") + slurp(dir / "vectors.bin");
  for (const auto& rec : pool.snapshot()) {
    for (const auto& t : rec.path_templates) EXPECT_EQ(log.find(t), std::string::npos) << t;
    EXPECT_EQ(log.find(rec.anon_indicator), std::string::npos);
  }
  EXPECT_EQ(log.find("mascot"), std::string::npos);

  EXPECT_THROW(ExperiencePool::open(dir, key(2), emb), StoreError);
  pool.clear();
  EXPECT_EQ(ExperiencePool::open(dir, key(1), emb).size(), 0u);
  std::filesystem::remove_all(dir);
}

TEST(Store, CorruptLogIsReported) {
  gateway::HashingEmbedder emb;
  const auto dir = scratch_dir("corrupt");
  { auto pool = ExperiencePool::open(dir, key(3), emb); }
  std::ofstream(dir / "records.log", std::ios::app) << "{not json\n";
  EXPECT_THROW(ExperiencePool::open(dir, key(3), emb), StoreError);
  std::filesystem::remove_all(dir);
}

TEST(Store, ExportImportRoundTrip) {
  gateway::HashingEmbedder emb;
  const auto a_dir = scratch_dir("export_a");
  const auto b_dir = scratch_dir("export_b");
  auto a = ExperiencePool::open(a_dir, key(4), emb);
  HighFreqBuffer buffer;
  write_back_if_success(a, buffer, mascot_artifacts(), privacy_policy(), gateway::BoundaryScanner(), emb);
  const auto bundle = a.export_bundle();
  EXPECT_EQ(bundle.dump().find("mascot"), std::string::npos);

  auto b = ExperiencePool::open(b_dir, key(4), emb);
  b.clear();
  EXPECT_EQ(b.import_bundle(bundle), 6u);
  auto sa = a.snapshot(), sb = b.snapshot();
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t k = 0; k < sa.size(); ++k) {
    EXPECT_EQ(sa[k].anon_indicator, sb[k].anon_indicator);
    EXPECT_EQ(sa[k].path_templates, sb[k].path_templates);
    EXPECT_EQ(sa[k].q_embedding, sb[k].q_embedding);
    EXPECT_EQ(sa[k].exemplar, sb[k].exemplar);
  }
  EXPECT_EQ(ExperiencePool::open(b_dir, key(4), emb).size(), 6u);

  auto c_dir = scratch_dir("export_c");
  auto c = ExperiencePool::open(c_dir, key(5), emb);
  EXPECT_THROW(c.import_bundle(bundle), StoreError);
  for (const auto& d : {a_dir, b_dir, c_dir}) std::filesystem::remove_all(d);
}

TEST(KeyFiles, CreateLoadAndReject) {
  const auto dir = scratch_dir("keys");
  std::filesystem::create_directories(dir);
  create_key_file(dir / "k");
  EXPECT_EQ(load_key_file(dir / "k").view().size(), 32u);
  EXPECT_THROW(create_key_file(dir / "k"), KeyFileError);
  std::ofstream(dir / "bad") << "short";
  EXPECT_THROW(load_key_file(dir / "bad"), KeyFileError);
  EXPECT_THROW(load_key_file(dir / "missing"), KeyFileError);
  EXPECT_THROW(load_key_file(""), KeyFileError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace privgemo::memory
