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

// privgemo command-line front end.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 graph missing or
// unreadable, 3 memory key missing or store unusable, 4 question could not
// be grounded, 5 model backend failure or privacy boundary violation.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "privgemo/controller.hpp"
#include "privgemo/errors.hpp"
#include "privgemo/harness.hpp"

namespace {

using namespace privgemo;
namespace fs = std::filesystem;
using json = nlohmann::json;

enum ExitCode {
  kOk = 0,
  kUsage = 1,
  kGraph = 2,
  kMemoryKey = 3,
  kNoTopic = 4,
  kBackend = 5,
};

struct ExitError {
  int code;
  std::string message;
};

// INI sections become dotted option names: "[privacy] ratio" is --privacy.ratio.
class DottedIni : public CLI::ConfigINI {
 public:
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    std::vector<CLI::ConfigItem> out;
    for (auto item : CLI::ConfigINI::from_config(input)) {
      if (item.name == "++" || item.name == "--") continue;
      std::string prefix;
      for (const auto& p : item.parents) prefix += p + ".";
      item.name = prefix + item.name;
      item.parents.clear();
      out.push_back(std::move(item));
    }
    return out;
  }
};

struct Settings {
  std::string relation_mode = "privacy";
  double ratio = 1.0;
  std::size_t node_budget = 200;
  std::size_t cluster_min_size = 2;
  std::string date_granularity = "year";
  double number_bucket_width = 10.0;

  std::string brain_endpoint;
  std::string brain_model;
  std::string brain_key_env = "PRIVGEMO_BRAIN_KEY";
  std::string hand_endpoint;
  std::string hand_model;
  int timeout_seconds = 60;
  std::string embedder_backend = "hashing";

  std::string memory_dir;
  std::string memory_key_file;

  std::size_t d_max = retrieval::kMaxDepth;
  std::size_t beam = retrieval::kBeamWidth;
  std::size_t max_brain_calls = 12;

  std::vector<std::string> mocks;
  std::string mock_dir = "fixtures/mocks";
  std::string log_level = "warn";
};

anon::PrivacyPolicy policy_of(const Settings& s) {
  anon::PrivacyPolicy p;
  try {
    p.relation_mode = anon::relation_mode_from_string(s.relation_mode);
    p.date_granularity = anon::date_granularity_from_string(s.date_granularity);
    p.anonymization_ratio = s.ratio;
    p.node_budget = s.node_budget;
    p.cluster_min_size = s.cluster_min_size;
    p.number_bucket_width = s.number_bucket_width;
    p.validate();
  } catch (const Error& e) {
    throw ExitError{kUsage, e.what()};
  }
  return p;
}

controller::Limits limits_of(const Settings& s) {
  controller::Limits l;
  l.d_max = s.d_max;
  l.beam = s.beam;
  l.max_brain_calls = s.max_brain_calls;
  if (l.d_max < 1 || l.beam < 1) throw ExitError{kUsage, "limits.d_max and limits.beam must be at least 1"};
  return l;
}

controller::Backends backends_of(const Settings& s) {
  if (!s.mocks.empty()) {
    std::vector<fs::path> files;
    for (const auto& m : s.mocks) files.push_back(harness::resolve_mock(m, s.mock_dir));
    try {
      auto mock = harness::load_mock(files);
      return {mock, mock};
    } catch (const Error& e) {
      throw ExitError{kUsage, e.what()};
    }
  }
  if (s.hand_endpoint.empty()) throw ExitError{kUsage, "no backend: set hand.endpoint or pass --mock"};
  controller::Backends b;
  b.hand = std::make_shared<gateway::HttpChatBackend>(
      gateway::HttpEndpoint{s.hand_endpoint, s.hand_model, "", s.timeout_seconds});
  if (!s.brain_endpoint.empty()) {
    b.brain = std::make_shared<gateway::HttpChatBackend>(
        gateway::HttpEndpoint{s.brain_endpoint, s.brain_model, s.brain_key_env, s.timeout_seconds});
  }
  return b;
}

kg::KnowledgeGraph load_graph(const std::string& path, const std::string& format = "tsv") {
  if (!fs::exists(path)) throw ExitError{kGraph, "graph file not found: " + path};
  try {
    return kg::KnowledgeGraph::load(path, format == "nt" ? kg::GraphFormat::kNTriples : kg::GraphFormat::kTsv);
  } catch (const Error& e) {
    throw ExitError{kGraph, e.what()};
  }
}

crypto::SecretBytes memory_key(const Settings& s) {
  const fs::path key_path = memory::resolve_key_path(s.memory_key_file);
  if (key_path.empty()) {
    throw ExitError{kMemoryKey, "no memory key: set memory.key_file or PRIVGEMO_MEMORY_KEY"};
  }
  if (!fs::exists(key_path)) throw ExitError{kMemoryKey, "memory key file not found: " + key_path.string()};
  try {
    return memory::load_key_file(key_path);
  } catch (const Error& e) {
    throw ExitError{kMemoryKey, e.what()};
  }
}

std::optional<memory::ExperiencePool> open_store(const Settings& s, const gateway::Embedder& embedder) {
  if (s.memory_dir.empty()) return std::nullopt;
  auto key = memory_key(s);
  try {
    return memory::ExperiencePool::open(s.memory_dir, std::move(key), embedder);
  } catch (const Error& e) {
    throw ExitError{kMemoryKey, e.what()};
  }
}

memory::ExperiencePool require_store(const Settings& s, const gateway::Embedder& embedder) {
  if (s.memory_dir.empty()) throw ExitError{kUsage, "memory.dir is not configured"};
  return std::move(*open_store(s, embedder));
}

int cmd_ingest(const std::string& graph, const std::string& format) {
  const auto g = load_graph(graph, format);
  std::cout << json{{"graph", graph},
                    {"nodes", g.node_count()},
                    {"entities", g.entity_count()},
                    {"literals", g.literal_count()},
                    {"relations", g.relation_count()},
                    {"triples", g.triple_count()},
                    {"duplicates", g.duplicate_warnings()}}
                   .dump(2)
            << '\n';
  return kOk;
}

int cmd_ask(const Settings& s, const std::string& graph, const std::string& question, const std::string& transcript,
            bool as_json) {
  const auto policy = policy_of(s);
  const auto limits = limits_of(s);
  const auto g = load_graph(graph);
  const auto backends = backends_of(s);
  const auto embedder = gateway::make_embedder(s.embedder_backend);
  auto store = open_store(s, *embedder);
  memory::ExperiencePool scratch(embedder->dimension());
  memory::ExperiencePool& pool = store ? *store : scratch;
  memory::HighFreqBuffer buffer;

  controller::RunResult result;
  try {
    result = controller::run(grounding::Question{"ask", question, {}}, g, policy, pool, buffer, backends, *embedder,
                             limits);
  } catch (const NoTopicEntities& e) {
    throw ExitError{kNoTopic, e.what()};
  } catch (const InvalidArgument& e) {
    throw ExitError{kUsage, e.what()};
  } catch (const BoundaryViolation& e) {
    throw ExitError{kBackend, e.what()};
  } catch (const GatewayError& e) {
    throw ExitError{kBackend, e.what()};
  } catch (const MalformedModelOutput& e) {
    throw ExitError{kBackend, e.what()};
  }
  if (!transcript.empty()) result.transcript.write(transcript);
  if (as_json) {
    std::cout << harness::to_json(result).dump(2) << '\n';
  } else {
    std::cout << harness::render(result);
  }
  return kOk;
}

std::vector<double> parse_ratios(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string piece;
  while (std::getline(in, piece, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(piece, &used));
      if (piece.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(piece);
    } catch (const std::exception&) {
      throw ExitError{kUsage, "bad ratio list: " + text};
    }
  }
  if (out.empty()) throw ExitError{kUsage, "empty ratio list"};
  return out;
}

int cmd_eval(const Settings& s, const std::string& graph, const std::string& questions, const std::string& report,
             const std::string& sweep, std::size_t workers) {
  harness::EvalOptions opts;
  opts.policy = policy_of(s);
  opts.limits = limits_of(s);
  opts.workers = workers;
  if (graph != "-") {
    if (!fs::exists(graph)) throw ExitError{kGraph, "graph file not found: " + graph};
    opts.default_graph = graph;
  }
  std::vector<harness::QuestionRecord> records;
  try {
    records = harness::load_questions(questions);
  } catch (const Error& e) {
    throw ExitError{kUsage, e.what()};
  }
  bool every_record_has_mock = true;
  for (const auto& r : records) every_record_has_mock &= !r.mock.empty();
  if (!s.mocks.empty() || !every_record_has_mock) opts.backends = backends_of(s);
  std::shared_ptr<gateway::Embedder> embedder = gateway::make_embedder(s.embedder_backend);
  opts.embedder = embedder;
  auto store = open_store(s, *embedder);
  if (store) opts.pool = &*store;

  json out;
  if (!sweep.empty()) {
    const auto rows = harness::sweep(records, parse_ratios(sweep), opts);
    std::cout << harness::render_table(rows);
    out = harness::to_json(rows);
  } else {
    const auto rep = harness::evaluate(records, opts);
    std::cout << harness::render_table(rep);
    out = harness::to_json(rep);
  }
  if (!report.empty()) {
    std::ofstream f(report);
    if (!f) throw ExitError{kUsage, "cannot write report " + report};
    f << out.dump(2) << '\n';
  }
  return kOk;
}

int cmd_memory_inspect(const Settings& s) {
  const auto embedder = gateway::make_embedder(s.embedder_backend);
  auto pool = require_store(s, *embedder);
  auto records = pool.snapshot();
  std::size_t exemplars = 0, hits = 0, touched = 0;
  for (const auto& r : records) {
    exemplars += r.exemplar;
    hits += r.hit_count;
    touched += r.hit_count > 0;
  }
  std::cout << "records: " << records.size() << " (" << exemplars << " exemplars, " << records.size() - exemplars
            << " learned)\n";
  std::cout << "hits: " << hits << " total, " << touched << " records hit at least once\n";
  std::cout << "buffer: capacity " << memory::kBufferCapacity << ", rebuilt from hit counts on each run\n";
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
    return a.hit_count != b.hit_count ? a.hit_count > b.hit_count : a.id < b.id;
  });
  std::size_t shown = 0;
  for (const auto& r : records) {
    if (shown++ == 5) break;
    std::cout << "#" << r.id << " hits=" << r.hit_count << " tag=" << r.policy_tag << (r.exemplar ? " exemplar" : "")
              << "\n  indicator: " << r.anon_indicator << '\n';
    for (const auto& t : r.path_templates) std::cout << "  template: " << t << '\n';
  }
  return kOk;
}

int cmd_memory_export(const Settings& s, const std::string& file) {
  const auto embedder = gateway::make_embedder(s.embedder_backend);
  auto pool = require_store(s, *embedder);
  std::ofstream out(file);
  if (!out) throw ExitError{kUsage, "cannot write " + file};
  out << pool.export_bundle().dump() << '\n';
  std::cout << "exported " << pool.size() << " records\n";
  return kOk;
}

int cmd_memory_import(const Settings& s, const std::string& file) {
  const auto embedder = gateway::make_embedder(s.embedder_backend);
  auto pool = require_store(s, *embedder);
  std::ifstream in(file);
  if (!in) throw ExitError{kUsage, "cannot read " + file};
  const json bundle = json::parse(in, nullptr, false);
  if (bundle.is_discarded()) throw ExitError{kUsage, "bundle is not valid JSON: " + file};
  try {
    const auto n = pool.import_bundle(bundle);
    std::cout << "imported " << n << " records; store now holds " << pool.size() << '\n';
  } catch (const StoreError& e) {
    throw ExitError{kMemoryKey, e.what()};
  }
  return kOk;
}

int cmd_memory_clear(const Settings& s) {
  const auto embedder = gateway::make_embedder(s.embedder_backend);
  auto pool = require_store(s, *embedder);
  pool.clear();
  std::cout << "records: " << pool.size() << '\n';
  return kOk;
}

int cmd_memory_keygen(const Settings& s) {
  if (s.memory_key_file.empty()) throw ExitError{kUsage, "memory.key_file is not configured"};
  try {
    memory::create_key_file(s.memory_key_file);
  } catch (const Error& e) {
    throw ExitError{kMemoryKey, e.what()};
  }
  std::cout << "wrote " << s.memory_key_file << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("privgemo"));

  CLI::App app{"Privacy-preserving question answering over a local knowledge graph"};
  app.require_subcommand(1);
  app.fallthrough();
  app.config_formatter(std::make_shared<DottedIni>());
  app.set_config("--config", "", "INI file; [section] key = value sets --section.key");

  Settings s;
  app.add_option("--privacy.relation_mode", s.relation_mode, "privacy or utility")->capture_default_str();
  app.add_option("--privacy.ratio", s.ratio, "share of entities replaced by tokens")->capture_default_str();
  app.add_option("--privacy.node_budget", s.node_budget)->capture_default_str();
  app.add_option("--privacy.cluster_min_size", s.cluster_min_size)->capture_default_str();
  app.add_option("--privacy.date_granularity", s.date_granularity, "year, month or full")->capture_default_str();
  app.add_option("--privacy.number_bucket_width", s.number_bucket_width)->capture_default_str();
  app.add_option("--brain.endpoint", s.brain_endpoint, "chat-completions base URL of the remote model");
  app.add_option("--brain.model", s.brain_model);
  app.add_option("--brain.key_env", s.brain_key_env, "environment variable holding the bearer token")
      ->capture_default_str();
  app.add_option("--hand.endpoint", s.hand_endpoint, "chat-completions base URL of the local model");
  app.add_option("--hand.model", s.hand_model);
  app.add_option("--hand.timeout", s.timeout_seconds, "seconds, both channels")->capture_default_str();
  app.add_option("--embedder.backend", s.embedder_backend)->capture_default_str();
  app.add_option("--memory.dir", s.memory_dir, "experience store directory");
  app.add_option("--memory.key_file", s.memory_key_file, "32-byte key; PRIVGEMO_MEMORY_KEY overrides");
  app.add_option("--limits.d_max", s.d_max)->capture_default_str();
  app.add_option("--limits.beam", s.beam)->capture_default_str();
  app.add_option("--limits.max_brain_calls", s.max_brain_calls)->capture_default_str();
  app.add_option("--mock", s.mocks, "scripted scenario name or file; repeatable");
  app.add_option("--mock_dir", s.mock_dir, "where bare scenario names are looked up")->capture_default_str();
  app.add_option("--log_level", s.log_level, "trace, debug, info, warn, error or off")->capture_default_str();

  std::string graph, question, transcript, questions, report, sweep, format = "tsv", file;
  bool as_json = false;
  std::size_t workers = 1;

  auto* ingest = app.add_subcommand("ingest", "Load and validate a graph, print its statistics");
  ingest->add_option("graph", graph)->required();
  ingest->add_option("--format", format, "tsv or nt")->check(CLI::IsMember({"tsv", "nt"}))->capture_default_str();

  auto* ask = app.add_subcommand("ask", "Answer one question");
  ask->add_option("graph", graph)->required();
  ask->add_option("question", question)->required();
  ask->add_option("--transcript", transcript, "write the run transcript (NDJSON)");
  ask->add_flag("--json", as_json, "print the result as JSON");

  auto* eval = app.add_subcommand("eval", "Evaluate a questions file (Hits@1)");
  eval->add_option("graph", graph, "default graph, or - when every record names one")->required();
  eval->add_option("questions", questions)->required();
  eval->add_option("--report", report, "write the report as JSON");
  eval->add_option("--sweep", sweep, "comma-separated anonymization ratios");
  eval->add_option("--workers", workers)->capture_default_str();

  auto* mem = app.add_subcommand("memory", "Inspect or maintain the experience store");
  mem->require_subcommand(1);
  auto* inspect = mem->add_subcommand("inspect", "Record count, top templates, hit statistics");
  auto* exp = mem->add_subcommand("export", "Write a sealed bundle");
  exp->add_option("file", file)->required();
  auto* imp = mem->add_subcommand("import", "Merge a bundle sealed with the same key");
  imp->add_option("file", file)->required();
  auto* clear = mem->add_subcommand("clear", "Drop every record");
  auto* keygen = mem->add_subcommand("keygen", "Create a fresh key at memory.key_file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }
  spdlog::set_level(spdlog::level::from_str(s.log_level));

  try {
    if (*ingest) return cmd_ingest(graph, format);
    if (*ask) return cmd_ask(s, graph, question, transcript, as_json);
    if (*eval) return cmd_eval(s, graph, questions, report, sweep, workers);
    if (*inspect) return cmd_memory_inspect(s);
    if (*exp) return cmd_memory_export(s, file);
    if (*imp) return cmd_memory_import(s, file);
    if (*clear) return cmd_memory_clear(s);
    if (*keygen) return cmd_memory_keygen(s);
  } catch (const ExitError& e) {
    std::cerr << "privgemo: " << e.message << '\n';
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "privgemo: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
