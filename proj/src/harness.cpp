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

#include "privgemo/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "privgemo/errors.hpp"

namespace privgemo::harness {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> gold_list(const json& j) {
  if (j.is_string()) return {j.get<std::string>()};
  if (j.is_array()) return j.get<std::vector<std::string>>();
  throw InvalidArgument("gold must be a string or an array of strings");
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (const auto& s : items) {
    if (!out.empty()) out += sep;
    out += s;
  }
  return out;
}

}  // namespace

std::vector<QuestionRecord> load_questions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open questions file " + path.string());
  const fs::path base = path.parent_path();
  std::vector<QuestionRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      QuestionRecord r;
      r.id = j.contains("id") ? (j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump())
                              : std::to_string(out.size() + 1);
      r.text = j.at("text").get<std::string>();
      if (j.contains("gold")) {
        r.gold = gold_list(j["gold"]);
      } else if (j.contains("answers")) {
        r.gold = gold_list(j["answers"]);
      }
      if (j.contains("graph")) r.graph = base / j["graph"].get<std::string>();
      if (j.contains("mock")) r.mock = base / j["mock"].get<std::string>();
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw InvalidArgument(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::string normalize_answer(std::string_view text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (unsigned char c : text) {
    cleaned.push_back(std::ispunct(c) ? ' ' : static_cast<char>(std::tolower(c)));
  }
  std::istringstream words(cleaned);
  std::string word;
  std::string out;
  while (words >> word) {
    if (word == "a" || word == "an" || word == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += word;
  }
  return out;
}

bool hits_at_1(const std::vector<std::string>& answers, const std::vector<std::string>& gold) {
  if (answers.empty()) return false;
  const std::string top = normalize_answer(answers.front());
  if (top.empty()) return false;
  return std::any_of(gold.begin(), gold.end(), [&](const std::string& g) { return normalize_answer(g) == top; });
}

fs::path resolve_mock(std::string_view name, const fs::path& dir) {
  fs::path p(name);
  if (fs::exists(p)) return p;
  if (p.extension() != ".json") p += ".json";
  return dir / p;
}

std::shared_ptr<gateway::ScriptedBackend> load_mock(const std::vector<fs::path>& files) {
  json rules = json::array();
  std::vector<fs::path> includes;
  std::set<fs::path> seen;
  std::string name;
  auto read = [](const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw InvalidArgument("cannot open mock scenario " + p.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw InvalidArgument("mock scenario is not a JSON object: " + p.string());
    return j;
  };
  for (const auto& f : files) {
    const json j = read(f);
    seen.insert(fs::weakly_canonical(f));
    for (const auto& r : j.value("rules", json::array())) rules.push_back(r);
    for (const auto& inc : j.value("include", json::array())) includes.push_back(f.parent_path() / inc.get<std::string>());
    if (!name.empty()) name += "+";
    name += j.value("name", f.stem().string());
  }
  for (std::size_t i = 0; i < includes.size(); ++i) {
    const fs::path canon = fs::weakly_canonical(includes[i]);
    if (!seen.insert(canon).second) continue;
    const json j = read(includes[i]);
    for (const auto& r : j.value("rules", json::array())) rules.push_back(r);
    for (const auto& inc : j.value("include", json::array())) {
      includes.push_back(includes[i].parent_path() / inc.get<std::string>());
    }
  }
  return gateway::ScriptedBackend::from_json(json{{"name", name.empty() ? "scripted" : name}, {"rules", rules}});
}

std::optional<double> EvalReport::hits() const {
  if (questions.empty()) return std::nullopt;
  return static_cast<double>(matched) / static_cast<double>(questions.size());
}

namespace {

template <typename F>
double mean_of(const std::vector<QuestionReport>& qs, F f) {
  if (qs.empty()) return 0.0;
  double s = 0.0;
  for (const auto& q : qs) s += f(q);
  return s / static_cast<double>(qs.size());
}

}  // namespace

double EvalReport::mean_brain_calls() const {
  return mean_of(questions, [](const QuestionReport& q) { return static_cast<double>(q.brain_calls); });
}
double EvalReport::mean_hand_calls() const {
  return mean_of(questions, [](const QuestionReport& q) { return static_cast<double>(q.hand_calls); });
}
double EvalReport::mean_reduction() const {
  return mean_of(questions, [](const QuestionReport& q) { return q.reduction_ratio; });
}

std::string format_hits(std::optional<double> hits) { return hits ? fixed(*hits, 3) : "n/a"; }

EvalReport evaluate(const std::vector<QuestionRecord>& questions, const EvalOptions& options) {
  EvalReport report;
  report.ratio = options.policy.anonymization_ratio;
  report.questions.resize(questions.size());

  std::shared_ptr<const gateway::Embedder> embedder = options.embedder;
  if (!embedder) embedder = std::make_shared<gateway::HashingEmbedder>();
  std::optional<memory::ExperiencePool> own_pool;
  memory::ExperiencePool* pool = options.pool;
  if (!pool) pool = &own_pool.emplace(embedder->dimension());
  memory::HighFreqBuffer buffer;

  // Graphs and mocks are loaded once, before any worker starts.
  std::map<fs::path, std::shared_ptr<const kg::KnowledgeGraph>> graphs;
  std::map<fs::path, std::string> graph_errors;
  std::map<fs::path, std::shared_ptr<gateway::Backend>> mocks;
  std::map<fs::path, std::string> mock_errors;
  for (const auto& q : questions) {
    const fs::path gp = q.graph.empty() ? options.default_graph : q.graph;
    if (!graphs.count(gp) && !graph_errors.count(gp)) {
      try {
        if (gp.empty()) throw InvalidArgument("no graph given");
        graphs[gp] = std::make_shared<const kg::KnowledgeGraph>(kg::KnowledgeGraph::load(gp));
      } catch (const std::exception& e) {
        graph_errors[gp] = e.what();
      }
    }
    if (!q.mock.empty() && !mocks.count(q.mock) && !mock_errors.count(q.mock)) {
      try {
        mocks[q.mock] = load_mock({q.mock});
      } catch (const std::exception& e) {
        mock_errors[q.mock] = e.what();
      }
    }
  }

  auto run_one = [&](std::size_t i) {
    const auto& q = questions[i];
    QuestionReport& r = report.questions[i];
    r.id = q.id;
    r.question = q.text;
    r.gold = q.gold;
    const fs::path gp = q.graph.empty() ? options.default_graph : q.graph;
    try {
      if (auto it = graph_errors.find(gp); it != graph_errors.end()) throw InvalidArgument(it->second);
      if (auto it = mock_errors.find(q.mock); it != mock_errors.end()) throw InvalidArgument(it->second);
      controller::Backends backends = options.backends;
      if (!q.mock.empty()) backends = {mocks.at(q.mock), mocks.at(q.mock)};
      if (!backends.hand) throw InvalidArgument("no Hand backend configured");
      grounding::Question gq{q.id, q.text, q.gold};
      const auto result =
          controller::run(gq, *graphs.at(gp), options.policy, *pool, buffer, backends, *embedder, options.limits);
      r.answers = result.answers;
      r.sufficient = result.sufficient;
      r.source = controller::to_string(result.source);
      r.brain_calls = result.tally.brain_calls;
      r.hand_calls = result.tally.hand_calls;
      r.exposure_events = result.tally.brain_calls + result.tally.kg_expansions;
      r.reduction_ratio = result.reduction_ratio;
      r.match = hits_at_1(result.answers, q.gold);
    } catch (const std::exception& e) {
      r.error = e.what();
      r.match = false;
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, questions.size()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < questions.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) {
      threads.emplace_back([&] {
        for (std::size_t i = next++; i < questions.size(); i = next++) run_one(i);
      });
    }
    for (auto& t : threads) t.join();
  }
  report.matched = static_cast<std::size_t>(
      std::count_if(report.questions.begin(), report.questions.end(), [](const auto& q) { return q.match; }));
  return report;
}

std::vector<SweepRow> sweep(const std::vector<QuestionRecord>& questions, const std::vector<double>& ratios,
                            EvalOptions options) {
  std::vector<SweepRow> rows;
  options.pool = nullptr;
  for (double ratio : ratios) {
    options.policy.anonymization_ratio = ratio;
    options.policy.validate();
    rows.push_back({ratio, evaluate(questions, options)});
  }
  return rows;
}

json to_json(const EvalReport& report) {
  json qs = json::array();
  for (const auto& q : report.questions) {
    json j{{"id", q.id},
           {"question", q.question},
           {"answers", q.answers},
           {"gold", q.gold},
           {"match", q.match},
           {"sufficient", q.sufficient},
           {"source", q.source},
           {"brain_calls", q.brain_calls},
           {"hand_calls", q.hand_calls},
           {"exposure_events", q.exposure_events},
           {"reduction_ratio", q.reduction_ratio}};
    if (!q.error.empty()) j["error"] = q.error;
    qs.push_back(std::move(j));
  }
  const auto hits = report.hits();
  return json{{"ratio", report.ratio},
              {"questions", report.questions.size()},
              {"matched", report.matched},
              {"hits_at_1", hits ? json(*hits) : json("n/a")},
              {"mean_brain_calls", report.mean_brain_calls()},
              {"mean_hand_calls", report.mean_hand_calls()},
              {"mean_reduction", report.mean_reduction()},
              {"results", std::move(qs)}};
}

json to_json(const std::vector<SweepRow>& rows) {
  json out = json::array();
  for (const auto& row : rows) out.push_back(to_json(row.report));
  return out;
}

std::string render_table(const EvalReport& report) {
  std::ostringstream os;
  os << "id\tmatch\tbrain\thand\texposure\treduction\tanswer\n";
  for (const auto& q : report.questions) {
    os << q.id << '\t' << (q.match ? "yes" : "no") << '\t' << q.brain_calls << '\t' << q.hand_calls << '\t'
       << q.exposure_events << '\t' << fixed(q.reduction_ratio, 3) << '\t';
    if (!q.error.empty()) {
      os << "error: " << q.error;
    } else {
      os << (q.answers.empty() ? "-" : join(q.answers, "; "));
    }
    os << '\n';
  }
  os << "Hits@1 " << format_hits(report.hits()) << " (" << report.matched << "/" << report.questions.size()
     << ")  mean brain calls " << fixed(report.mean_brain_calls(), 2) << "  mean hand calls "
     << fixed(report.mean_hand_calls(), 2) << "  mean reduction " << fixed(report.mean_reduction(), 3) << '\n';
  return os.str();
}

std::string render_table(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "ratio\tHits@1\tbrain\treduction\n";
  for (const auto& row : rows) {
    os << fixed(row.ratio, 2) << '\t' << format_hits(row.report.hits()) << '\t'
       << fixed(row.report.mean_brain_calls(), 2) << '\t' << fixed(row.report.mean_reduction(), 3) << '\n';
  }
  return os.str();
}

json to_json(const controller::RunResult& r) {
  json nodes = json::array();
  for (const auto& n : r.nodes) {
    json traj = json::array();
    for (const auto& s : n.trajectory) traj.push_back(memory::to_string(s));
    nodes.push_back({{"split_question", n.split_question},
                     {"status", controller::to_string(n.status)},
                     {"trajectory", traj},
                     {"reason", n.reason}});
  }
  json out{{"question", r.question},
           {"answers", r.answers},
           {"sufficient", r.sufficient},
           {"source", controller::to_string(r.source)},
           {"evidence", r.evidence_text},
           {"explanation", r.explanation},
           {"topic_entities", r.topic_entities},
           {"indicator", r.indicator},
           {"analysis_source", retrieval::to_string(r.analysis_source)},
           {"memory_reused", r.memory_reused},
           {"nodes", nodes},
           {"exposure",
            {{"brain_calls", r.tally.brain_calls},
             {"hand_calls", r.tally.hand_calls},
             {"kg_expansions", r.tally.kg_expansions},
             {"expansion_triples", r.tally.expansion_triples},
             {"brain_payload_tokens", r.tally.brain_payload_tokens},
             {"hand_payload_tokens", r.tally.hand_payload_tokens}}},
           {"entities", {{"raw", r.raw_entities}, {"view", r.view_entities}, {"reduction", r.reduction_ratio}}}};
  if (r.written_record) out["written_record"] = *r.written_record;
  return out;
}

std::string render(const controller::RunResult& r) {
  std::ostringstream os;
  os << "answer: " << (r.answers.empty() ? "(none)" : join(r.answers, "; ")) << '\n';
  os << "sufficient: " << (r.sufficient ? "yes" : "no") << "  source: " << controller::to_string(r.source) << '\n';
  if (!r.evidence_text.empty()) {
    os << "evidence:\n";
    for (const auto& e : r.evidence_text) os << "  " << e << '\n';
  }
  if (!r.explanation.empty()) os << "explanation: " << r.explanation << '\n';
  os << "indicator: " << r.indicator << " (" << retrieval::to_string(r.analysis_source)
     << (r.memory_reused ? ", from memory" : "") << ")\n";
  for (std::size_t i = 0; i < r.nodes.size(); ++i) {
    const auto& n = r.nodes[i];
    std::vector<std::string> steps;
    for (const auto& s : n.trajectory) steps.push_back(memory::to_string(s));
    os << "node " << i + 1 << " [" << controller::to_string(n.status) << "] " << n.split_question << "  "
       << join(steps, " > ");
    if (!n.reason.empty()) os << "  (" << n.reason << ")";
    os << '\n';
  }
  os << "exposure: brain " << r.tally.brain_calls << ", hand " << r.tally.hand_calls << ", kg expansions "
     << r.tally.kg_expansions << " (" << r.tally.expansion_triples << " triples)\n";
  os << "entities: " << r.raw_entities << " raw, " << r.view_entities << " exposed, reduction "
     << fixed(r.reduction_ratio, 3) << '\n';
  return os.str();
}

}  // namespace privgemo::harness
