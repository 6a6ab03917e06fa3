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

#include "privgemo/gateway.hpp"

#include <algorithm>
#include <cctype>
#include <ctime>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "privgemo/crypto.hpp"
#include "privgemo/errors.hpp"

namespace privgemo::gateway {

using nlohmann::json;

const char* to_string(Channel c) { return c == Channel::kBrain ? "brain" : "hand"; }

const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::kBrainCall: return "brain_call";
    case EventKind::kHandCall: return "hand_call";
    case EventKind::kKgExpansion: return "kg_expansion";
    case EventKind::kNote: return "note";
  }
  return "note";
}

std::string_view field(const Fields& fields, std::string_view name) {
  for (const auto& [k, v] : fields) {
    if (k == name) return v;
  }
  return {};
}

std::string flatten(const Fields& fields) {
  std::string out;
  for (const auto& [k, v] : fields) {
    out += k;
    out += ": ";
    out += v;
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Templates

namespace {

constexpr double kExplore = 0.4;
constexpr double kAnswer = 0.0;

std::vector<TemplateSpec> build_templates() {
  std::vector<TemplateSpec> t;
  t.push_back({"hand.entity_extraction", Channel::kHand, {"question"}, kAnswer,
               "You will receive a question. Extract a short list of entity mentions that are "
               "explicitly present in the question text. Return only the mention strings.\n"
               "Output format (JSON): {\"mentions\": [\"...\"]}\n\nQ: {question}\n"});
  t.push_back({"hand.analysis_delegation", Channel::kHand,
               {"question", "mentions", "topic_entities", "heuristics"}, kAnswer,
               "You are the local Hand. Decide whether question analysis runs on the remote "
               "Brain (anonymized) or locally (raw), minimizing exposure.\n"
               "Return format (strict JSON): {\"analysis_mode\": \"HAND\" | \"BRAIN\", "
               "\"complexity\": \"low\", \"privacy_risk\": \"low\", \"reason\": \"...\"}\n\n"
               "Q: {question}\nMentions: {mentions}\nTopic Entities: {topic_entities}\n"
               "Heuristics: {heuristics}\nA:"});
  t.push_back({"hand.question_analysis", Channel::kHand, {"question", "topic_entities"}, kExplore,
               "You will receive a question and its topic entities (raw form). Produce a compact "
               "indicator, split sub-questions, and a predicted hop depth.\n"
               "Output format (JSON): {\"indicator\": \"...\", \"split_questions\": [\"...\"], "
               "\"D_predict\": 1}\n\nQ: {question}\nTopic Entities: {topic_entities}\n"});
  t.push_back({"hand.next_step", Channel::kHand,
               {"question", "indicator", "exploration_summary", "budgets"}, kExplore,
               "You are the local Hand. Choose exactly one action: STOP, EXPAND_NEXT_DEPTH or "
               "SWITCH_METHOD.\nReturn format (strict JSON): {\"decision\": \"...\", "
               "\"selected_method\": \"Topic\", \"next_depth\": 0}\n\nQ: {question}\n"
               "Indicator: {indicator}\nExploration Summary: {exploration_summary}\n"
               "Budgets: {budgets}\nA:"});
  t.push_back({"hand.follow_up", Channel::kHand,
               {"question", "topic_entities", "indicator", "split_question", "paths"}, kExplore,
               "Some retrieved paths may be incomplete. Identify the missing evidence, propose one "
               "retrieval query, and one reasoning sketch.\nReturn format (strict):\n"
               "Missing: <short description>\nQuery: <retrieval query>\nReasoning: <sketch>\n\n"
               "Q: {question}\nTopic Entities: {topic_entities}\nIndicator: {indicator}\n"
               "Split Question: {split_question}\nExisting Knowledge Paths:\n{paths}\nA:"});
  t.push_back({"hand.path_refine", Channel::kHand, {"question", "split_question", "paths"}, kAnswer,
               "You are the local Hand with access to the raw KG. Verify each hop of the selected "
               "paths, drop unsupported edges, keep only the minimal facts needed.\n"
               "Return format (strict JSON): {\"verified_facts\": [\"(h, r, t)\"], "
               "\"split_answer\": [\"...\"], \"is_sufficient\": true, \"missing\": \"\", "
               "\"anon_feedback\": \"\"}\n\nQ: {question}\nSplit Question: {split_question}\n"
               "Selected Paths:\n{paths}\nA:"});
  t.push_back({"hand.sufficiency", Channel::kHand,
               {"question", "indicator", "split_question", "evidence"}, kAnswer,
               "You are the local Hand with access to the raw KG. Decide whether the evidence is "
               "sufficient to answer the split question and, optionally, the main question.\n"
               "Return format (strict JSON): {\"sufficient_split\": true, \"split_answer\": "
               "[\"...\"], \"evidence\": [\"(h, r, t)\"], \"sufficient_main\": true, "
               "\"main_answer\": [\"...\"], \"anon_feedback\": \"\"}\n\nQ: {question}\n"
               "Indicator: {indicator}\nSplit Question: {split_question}\nEvidence:\n{evidence}\nA:"});
  t.push_back({"hand.final_answer", Channel::kHand, {"question", "evidence"}, kAnswer,
               "Given the main question and the verified raw evidence, generate the final answer. "
               "The answer must be directly supported by the evidence; if several entities are "
               "valid, output all of them.\nReturn format (strict JSON): {\"answer\": [\"...\"], "
               "\"explanation\": \"...\"}\n\nQ: {question}\nVerified Evidence:\n{evidence}\nA:"});
  t.push_back({"hand.experience_summary", Channel::kHand,
               {"question", "indicator", "trajectory", "evidence"}, kAnswer,
               "Produce a reusable, privacy-safe experience summary using role placeholders such "
               "as TOPIC_1 and ANS.\nOutput format (JSON): {\"tpl_path\": \"TOPIC_1 -- r1 -- X -- "
               "r2 -- ANS\", \"constraints\": [], \"trajectory\": [], \"warnings\": []}\n\n"
               "Q: {question}\nIndicator: {indicator}\nTrajectory: {trajectory}\n"
               "Verified Facts:\n{evidence}\n"});
  t.push_back({"brain.question_analysis", Channel::kBrain, {"question", "topic_entities"}, kExplore,
               "You will receive an anonymized question and a list of anonymized topic entities. "
               "Produce a compact indicator describing the reasoning goal as a typed multi-hop "
               "chain, split sub-questions using each topic entity at most once, a predicted hop "
               "depth, and optional warnings. Do not guess real entity names.\n"
               "Output format (JSON): {\"indicator\": \"...\", \"split_questions\": [\"...\"], "
               "\"D_predict\": 1, \"warnings\": []}\n\nAnonymized Q: {question}\n"
               "Anon Topic Entities: {topic_entities}\n"});
  t.push_back({"brain.predict", Channel::kBrain,
               {"question", "topic_entities", "indicator", "split_question", "paths"}, kExplore,
               "You operate on an anonymized KG view. Propose up to three plausible targets "
               "(answers or bridge nodes) that could complete the reasoning. Use anonymized symbols "
               "only.\nReturn format (strict JSON): {\"predictions\": [{\"target\": \"...\", "
               "\"path_pattern\": [\"...\"], \"reason\": \"...\"}]}\n\nQ_anon: {question}\n"
               "Topic Entities_anon: {topic_entities}\nSkyline Indicator_anon: {indicator}\n"
               "Split Question_anon: {split_question}\nExisting Knowledge Paths_anon:\n{paths}\nA:"});
  t.push_back({"brain.path_selection", Channel::kBrain,
               {"question", "indicator", "split_question", "paths"}, kExplore,
               "You operate on an anonymized KG view. Rank the candidate paths by how well they "
               "support answering the split question (indicator match, type consistency, "
               "minimality).\nReturn format (strict JSON): {\"top_paths\": [{\"rank\": 1, "
               "\"path_id\": \"...\", \"score\": 0.0, \"reason\": \"...\"}]}\n\nQ_anon: {question}\n"
               "Skyline Indicator_anon: {indicator}\nSplit Question_anon: {split_question}\n"
               "Candidate Paths_anon:\n{paths}\nA:"});
  return t;
}

}  // namespace

const std::vector<TemplateSpec>& registered_templates() {
  static const std::vector<TemplateSpec> templates = build_templates();
  return templates;
}

const TemplateSpec& find_template(std::string_view id) {
  for (const auto& spec : registered_templates()) {
    if (spec.id == id) return spec;
  }
  throw InvalidArgument("unregistered template '" + std::string(id) + "'");
}

std::string render(const TemplateSpec& spec, const Fields& fields) {
  std::string out = spec.body;
  for (const auto& name : spec.fields) {
    const std::string key = "{" + name + "}";
    const std::string value(field(fields, name));
    for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + value.size())) {
      out.replace(pos, key.size(), value);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Boundary

bool is_word_char(char c) noexcept {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
}

std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

namespace {

bool word_match_lowered(std::string_view hay, std::string_view needle) {
  if (needle.empty()) return false;
  const bool left_word = is_word_char(needle.front());
  const bool right_word = is_word_char(needle.back());
  for (auto pos = hay.find(needle); pos != std::string_view::npos; pos = hay.find(needle, pos + 1)) {
    const bool left_ok = !left_word || pos == 0 || !is_word_char(hay[pos - 1]);
    const auto end = pos + needle.size();
    const bool right_ok = !right_word || end == hay.size() || !is_word_char(hay[end]);
    if (left_ok && right_ok) return true;
  }
  return false;
}

}  // namespace

bool contains_word(std::string_view haystack, std::string_view needle) {
  return word_match_lowered(to_lower(haystack), to_lower(needle));
}

BoundaryScanner::BoundaryScanner(const std::vector<std::string>& raw_labels) {
  for (const auto& label : raw_labels) {
    if (label.size() < kMinLabelLength) {
      exempt_.push_back(label);
      continue;
    }
    labels_.push_back(to_lower(label));
  }
  std::sort(labels_.begin(), labels_.end(), [](const std::string& a, const std::string& b) {
    return a.size() != b.size() ? a.size() > b.size() : a < b;
  });
  labels_.erase(std::unique(labels_.begin(), labels_.end()), labels_.end());
  if (!exempt_.empty()) {
    spdlog::warn("boundary scan: {} label(s) shorter than {} characters are exempt", exempt_.size(),
                 kMinLabelLength);
  }
}

std::optional<std::string> BoundaryScanner::find(std::string_view text) const {
  if (labels_.empty()) return std::nullopt;
  const std::string lowered = to_lower(text);
  for (const auto& label : labels_) {
    if (word_match_lowered(lowered, label)) return label;
  }
  return std::nullopt;
}

void BoundaryScanner::check(const Fields& fields) const {
  for (const auto& [name, value] : fields) {
    if (auto hit = find(value)) throw BoundaryViolation(*hit, name);
  }
}

// ---------------------------------------------------------------------------
// Transcript

std::size_t approx_tokens(std::string_view text) {
  std::size_t n = 0;
  bool in_word = false;
  for (char c : text) {
    const bool space = std::isspace(static_cast<unsigned char>(c));
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

void Transcript::append(TranscriptEvent event) {
  event.seq = events_.size();
  events_.push_back(std::move(event));
}

std::string Transcript::to_ndjson(bool include_timestamps) const {
  std::string out;
  for (const auto& e : events_) {
    json j;
    j["seq"] = e.seq;
    if (include_timestamps) j["ts"] = e.timestamp;
    j["kind"] = to_string(e.kind);
    if (!e.channel.empty()) j["channel"] = e.channel;
    if (!e.template_id.empty()) j["template"] = e.template_id;
    j["payload_size"] = e.payload_size;
    if (!e.payload_digest.empty()) j["payload_digest"] = e.payload_digest;
    j["payload"] = e.payload;
    if (!e.reply.empty()) j["reply"] = e.reply;
    if (e.node_id) j["node_id"] = *e.node_id;
    j["tally"] = {{"brain_calls", e.tally.brain_calls},
                  {"hand_calls", e.tally.hand_calls},
                  {"kg_expansions", e.tally.kg_expansions}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

void Transcript::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write transcript to " + path.string());
  out << to_ndjson();
}

std::string Transcript::brain_payloads() const {
  std::string out;
  for (const auto& e : events_) {
    if (e.kind == EventKind::kBrainCall) {
      out += e.payload;
      out += '\n';
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gateway

namespace {

std::string now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

Gateway::Gateway(std::shared_ptr<Backend> brain, std::shared_ptr<Backend> hand, GatewayOptions options)
    : brain_(std::move(brain)), hand_(std::move(hand)), options_(options) {}

bool Gateway::brain_available() const noexcept {
  return options_.brain_enabled && brain_ && tally_.brain_calls < options_.max_brain_calls;
}

std::string Gateway::brain_call(std::string_view template_id, const Fields& fields) {
  return call(Channel::kBrain, template_id, fields);
}

std::string Gateway::hand_call(std::string_view template_id, const Fields& fields) {
  return call(Channel::kHand, template_id, fields);
}

std::string Gateway::call(Channel channel, std::string_view template_id, const Fields& fields) {
  const TemplateSpec& spec = find_template(template_id);
  if (spec.channel != channel) {
    throw InvalidArgument("template '" + spec.id + "' belongs to the " + to_string(spec.channel) +
                          " channel");
  }
  Backend* backend = channel == Channel::kBrain ? brain_.get() : hand_.get();
  if (channel == Channel::kBrain) {
    if (!options_.brain_enabled || !brain_) throw GatewayError("brain channel disabled");
    if (tally_.brain_calls >= options_.max_brain_calls) {
      throw GatewayError("brain call budget exhausted");
    }
    scanner_.check(fields);
  } else if (!hand_) {
    throw GatewayError("hand backend not configured");
  }

  Request request;
  request.channel = channel;
  request.template_id = spec.id;
  request.fields = fields;
  request.prompt = render(spec, fields);
  request.temperature = spec.temperature;
  request.max_tokens = options_.max_tokens;

  const std::string payload = flatten(fields);
  const std::size_t tokens = approx_tokens(payload);
  if (channel == Channel::kBrain) {
    ++tally_.brain_calls;
    tally_.brain_payload_tokens += tokens;
  } else {
    ++tally_.hand_calls;
    tally_.hand_payload_tokens += tokens;
  }

  TranscriptEvent event;
  event.kind = channel == Channel::kBrain ? EventKind::kBrainCall : EventKind::kHandCall;
  event.channel = to_string(channel);
  event.template_id = spec.id;
  event.payload = payload;
  event.payload_digest = crypto::sha256_hex(request.prompt);
  event.payload_size = tokens;

  std::string reply;
  try {
    reply = backend->complete(request);
  } catch (const GatewayError& e) {
    event.reply = std::string("<error: ") + e.what() + ">";
    push(std::move(event));
    throw;
  } catch (const std::exception& e) {
    event.reply = std::string("<error: ") + e.what() + ">";
    push(std::move(event));
    throw GatewayError(std::string(to_string(channel)) + " backend failed: " + e.what());
  }
  event.reply = reply;
  push(std::move(event));
  return reply;
}

void Gateway::record_kg_expansion(std::size_t triples, std::optional<std::size_t> node_id) {
  ++tally_.kg_expansions;
  tally_.expansion_triples += triples;
  TranscriptEvent event;
  event.kind = EventKind::kKgExpansion;
  event.payload_size = triples;
  event.node_id = node_id;
  push(std::move(event));
}

void Gateway::note(std::string text) {
  TranscriptEvent event;
  event.kind = EventKind::kNote;
  event.payload = std::move(text);
  push(std::move(event));
}

void Gateway::push(TranscriptEvent event) {
  event.timestamp = now_iso8601();
  event.tally = tally_;
  transcript_.append(std::move(event));
}

// ---------------------------------------------------------------------------
// Reply parsing

json parse_json_reply(std::string_view text) {
  auto attempt = [](std::string_view s) -> std::optional<json> {
    json j = json::parse(s.begin(), s.end(), nullptr, false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;
    return j;
  };
  if (auto j = attempt(text)) return *j;
  const auto open = text.find('{');
  const auto close = text.rfind('}');
  if (open != std::string_view::npos && close != std::string_view::npos && close > open) {
    if (auto j = attempt(text.substr(open, close - open + 1))) return *j;
  }
  throw MalformedModelOutput("reply is not a JSON object");
}

FollowUp parse_follow_up(std::string_view text) {
  FollowUp out;
  bool have_query = false;
  std::istringstream in{std::string(text)};
  std::string line;
  auto strip = [](std::string s) {
    auto b = s.find_first_not_of(" \t\r");
    auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    line = strip(line);
    if (line.rfind("Missing:", 0) == 0) {
      out.missing = strip(line.substr(8));
    } else if (line.rfind("Query:", 0) == 0) {
      out.query = strip(line.substr(6));
      have_query = !out.query.empty();
    } else if (line.rfind("Reasoning:", 0) == 0) {
      out.reasoning = strip(line.substr(10));
    }
  }
  if (!have_query) throw MalformedModelOutput("follow-up reply has no Query line");
  return out;
}

}  // namespace privgemo::gateway
