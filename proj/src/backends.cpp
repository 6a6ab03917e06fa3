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

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>

#include <nlohmann/json.hpp>

#include "privgemo/errors.hpp"
#include "privgemo/gateway.hpp"

namespace privgemo::gateway {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Scripted mock

namespace {

std::string json_escape(std::string_view s) {
  std::string quoted = json(std::string(s)).dump();
  return quoted.substr(1, quoted.size() - 2);
}

std::string regex_escape(std::string_view s) {
  static const std::string kSpecial = R"(\^$.|?*+()[]{}/)";
  std::string out;
  for (char c : s) {
    if (kSpecial.find(c) != std::string::npos) out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

std::vector<std::string> topic_list(const Fields& fields) {
  const std::string_view raw = field(fields, "topic_entities");
  std::vector<std::string> out;
  json j = json::parse(raw.begin(), raw.end(), nullptr, false);
  if (!j.is_discarded() && j.is_array()) {
    for (const auto& item : j) {
      if (item.is_string()) out.push_back(item.get<std::string>());
    }
    return out;
  }
  std::string s(raw);
  std::size_t start = 0;
  while (start <= s.size()) {
    auto comma = s.find(", ", start);
    auto piece = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!piece.empty()) out.push_back(piece);
    if (comma == std::string::npos) break;
    start = comma + 2;
  }
  return out;
}

struct PathLine {
  std::string id;
  std::string body;
};

// "[P3] body" lines of the `paths` field.
std::vector<PathLine> path_lines(const Fields& fields) {
  std::vector<PathLine> out;
  std::istringstream in{std::string(field(fields, "paths"))};
  std::string line;
  while (std::getline(in, line)) {
    if (line.size() < 3 || line[0] != '[') continue;
    auto close = line.find(']');
    if (close == std::string::npos) continue;
    PathLine p;
    p.id = line.substr(1, close - 1);
    p.body = close + 2 <= line.size() ? line.substr(close + 2) : std::string();
    out.push_back(std::move(p));
  }
  return out;
}

// Entity slots "{name}" or "{name:types}" of an anonymized chain.
std::vector<std::string> chain_entities(const std::string& body) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while ((pos = body.find('{', pos)) != std::string::npos) {
    auto close = body.find('}', pos);
    if (close == std::string::npos) break;
    std::string inner = body.substr(pos + 1, close - pos - 1);
    if (auto colon = inner.rfind(':'); colon != std::string::npos) inner = inner.substr(0, colon);
    out.push_back(inner);
    pos = close + 1;
  }
  return out;
}

std::vector<std::string> fact_lines(const Fields& fields) {
  std::vector<std::string> out;
  auto add = [&](const std::string& f) {
    if (!f.empty() && std::find(out.begin(), out.end(), f) == out.end()) out.push_back(f);
  };
  for (const char* name : {"paths", "evidence"}) {
    std::istringstream in{std::string(field(fields, name))};
    std::string line;
    while (std::getline(in, line)) {
      if (line.rfind("[P", 0) == 0) {
        auto close = line.find(']');
        std::string rest = close == std::string::npos ? "" : line.substr(close + 1);
        std::size_t start = rest.find('(');
        while (start != std::string::npos) {
          auto sep = rest.find("; (", start);
          add(rest.substr(start, sep == std::string::npos ? std::string::npos : sep - start));
          start = sep == std::string::npos ? sep : sep + 2;
        }
      } else if (!line.empty() && line[0] == '(') {
        add(line);
      }
    }
  }
  return out;
}

std::string substitute_topics(std::string pattern, const Fields& fields) {
  const auto topics = topic_list(fields);
  for (std::size_t k = topics.size(); k >= 1; --k) {
    const std::string key = "TOPIC_" + std::to_string(k);
    const std::string value = regex_escape(topics[k - 1]);
    for (auto pos = pattern.find(key); pos != std::string::npos; pos = pattern.find(key, pos + value.size())) {
      pattern.replace(pos, key.size(), value);
    }
  }
  return pattern;
}

std::optional<std::string> resolve(const std::string& var, const Fields& fields) {
  auto starts = [&](std::string_view p) { return var.rfind(p, 0) == 0; };
  try {
    if (starts("field:")) {
      const std::string name = var.substr(6);
      for (const auto& [k, v] : fields) {
        if (k == name) return json_escape(v);
      }
      return std::nullopt;
    }
    if (starts("topic_")) {
      const auto topics = topic_list(fields);
      const std::size_t k = std::stoul(var.substr(6));
      if (k == 0 || k > topics.size()) return std::nullopt;
      return json_escape(topics[k - 1]);
    }
    if (starts("path_id_")) {
      const auto paths = path_lines(fields);
      const std::size_t k = std::stoul(var.substr(8));
      if (k == 0 || k > paths.size()) return std::nullopt;
      return json_escape(paths[k - 1].id);
    }
    if (starts("path_matching:")) {
      const auto rest = var.substr(14);
      const auto colon = rest.find(':');
      if (colon == std::string::npos) return std::nullopt;
      const std::size_t n = std::stoul(rest.substr(0, colon));
      const std::regex re(substitute_topics(rest.substr(colon + 1), fields));
      std::size_t seen = 0;
      for (const auto& p : path_lines(fields)) {
        if (std::regex_search(p.body, re) && ++seen == n) return json_escape(p.id);
      }
      return std::nullopt;
    }
    if (starts("entity_of_path:")) {
      const auto rest = var.substr(15);
      const auto colon = rest.find(':');
      if (colon == std::string::npos) return std::nullopt;
      const std::size_t k = std::stoul(rest.substr(0, colon));
      const std::size_t j = std::stoul(rest.substr(colon + 1));
      const auto paths = path_lines(fields);
      if (k == 0 || k > paths.size()) return std::nullopt;
      const auto entities = chain_entities(paths[k - 1].body);
      if (j >= entities.size()) return std::nullopt;
      return json_escape(entities[j]);
    }
    if (starts("facts_matching:")) {
      const std::regex re(substitute_topics(var.substr(15), fields));
      std::string out;
      for (const auto& f : fact_lines(fields)) {
        if (!std::regex_search(f, re)) continue;
        if (!out.empty()) out += ", ";
        out += json(f).dump();
      }
      if (out.empty()) return std::nullopt;
      return out;
    }
  } catch (const std::exception&) {
    return std::nullopt;
  }
  return std::nullopt;
}

bool is_variable_start(std::string_view s) {
  for (std::string_view p : {"field:", "topic_", "path_id_", "path_matching:", "entity_of_path:",
                             "facts_matching:"}) {
    if (s.substr(0, p.size()) == p) return true;
  }
  return false;
}

}  // namespace

std::optional<std::string> ScriptedBackend::expand(std::string_view reply, const Fields& fields) {
  std::string out;
  std::size_t i = 0;
  while (i < reply.size()) {
    if (reply[i] == '{' && is_variable_start(reply.substr(i + 1))) {
      // Find the matching close brace; backslash escapes the next character.
      std::size_t j = i + 1;
      int depth = 1;
      for (; j < reply.size(); ++j) {
        if (reply[j] == '\\') {
          ++j;
          continue;
        }
        if (reply[j] == '{') ++depth;
        if (reply[j] == '}' && --depth == 0) break;
      }
      if (j >= reply.size()) return std::nullopt;
      auto value = resolve(std::string(reply.substr(i + 1, j - i - 1)), fields);
      if (!value) return std::nullopt;
      out += *value;
      i = j + 1;
      continue;
    }
    out.push_back(reply[i++]);
  }
  return out;
}

ScriptedBackend::ScriptedBackend(std::vector<Rule> rules, std::string name)
    : rules_(std::move(rules)), name_(std::move(name)) {}

std::shared_ptr<ScriptedBackend> ScriptedBackend::from_json(const json& scenario) {
  if (!scenario.is_object() || !scenario.contains("rules") || !scenario["rules"].is_array()) {
    throw InvalidArgument("scenario must be an object with a 'rules' array");
  }
  std::vector<Rule> rules;
  for (const auto& r : scenario["rules"]) {
    Rule rule;
    rule.template_id = r.at("template").get<std::string>();
    find_template(rule.template_id);
    if (r.contains("when")) rule.when = r["when"].get<std::vector<std::string>>();
    if (r.contains("unless")) rule.unless = r["unless"].get<std::vector<std::string>>();
    const auto& reply = r.at("reply");
    rule.reply = reply.is_string() ? reply.get<std::string>() : reply.dump();
    rules.push_back(std::move(rule));
  }
  return std::make_shared<ScriptedBackend>(std::move(rules), scenario.value("name", "scripted"));
}

std::shared_ptr<ScriptedBackend> ScriptedBackend::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open mock scenario " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw InvalidArgument("mock scenario is not valid JSON: " + path.string());
  return from_json(j);
}

std::string ScriptedBackend::complete(const Request& request) {
  const std::string flat = flatten(request.fields);
  for (const auto& rule : rules_) {
    if (rule.template_id != request.template_id) continue;
    bool ok = true;
    for (const auto& pattern : rule.when) {
      if (!std::regex_search(flat, std::regex(substitute_topics(pattern, request.fields)))) {
        ok = false;
        break;
      }
    }
    for (const auto& pattern : rule.unless) {
      if (!ok) break;
      if (std::regex_search(flat, std::regex(substitute_topics(pattern, request.fields)))) ok = false;
    }
    if (!ok) continue;
    if (auto reply = expand(rule.reply, request.fields)) return *reply;
  }
  throw GatewayError("scripted backend '" + name_ + "' has no rule for " + request.template_id);
}

// ---------------------------------------------------------------------------
// Wrappers

std::string AdversarialBackend::complete(const Request& request) {
  if (request.template_id == "hand.sufficiency") {
    return R"({"sufficient_split": false, "split_answer": [], "evidence": [], )"
           R"("sufficient_main": false, "main_answer": [], "anon_feedback": "evidence insufficient"})";
  }
  if (request.template_id == "hand.path_refine") {
    return R"({"verified_facts": [], "split_answer": [], "is_sufficient": false, )"
           R"("missing": "everything", "anon_feedback": ""})";
  }
  return inner_->complete(request);
}

std::string CountingBackend::complete(const Request& request) {
  ++count_;
  {
    std::lock_guard lock(mu_);
    requests_.push_back(request);
  }
  return inner_->complete(request);
}

std::vector<Request> CountingBackend::requests() const {
  std::lock_guard lock(mu_);
  return requests_;
}

void CountingBackend::reset() {
  std::lock_guard lock(mu_);
  requests_.clear();
  count_ = 0;
}

// ---------------------------------------------------------------------------
// HTTP

HttpChatBackend::HttpChatBackend(HttpEndpoint endpoint) : endpoint_(std::move(endpoint)) {
  if (endpoint_.base_url.empty()) throw InvalidArgument("HTTP backend needs a base URL");
}

std::string HttpChatBackend::complete(const Request& request) {
  // Split "scheme://host[:port]" from the path prefix.
  const std::string& url = endpoint_.base_url;
  const auto scheme_end = url.find("://");
  const auto path_start = url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
  const std::string origin = url.substr(0, path_start);
  std::string prefix = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();

  json body = {{"model", endpoint_.model},
               {"messages", json::array({{{"role", "user"}, {"content", request.prompt}}})},
               {"temperature", request.temperature},
               {"max_tokens", request.max_tokens}};
  httplib::Headers headers;
  if (!endpoint_.api_key_env.empty()) {
    if (const char* key = std::getenv(endpoint_.api_key_env.c_str()); key && *key) {
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
  }

  std::lock_guard lock(mu_);
  httplib::Client client(origin);
  client.set_connection_timeout(endpoint_.timeout_seconds);
  client.set_read_timeout(endpoint_.timeout_seconds);
  auto res = client.Post(prefix + "/chat/completions", headers, body.dump(), "application/json");
  if (!res) {
    throw GatewayError("HTTP request to " + origin + " failed: " + httplib::to_string(res.error()));
  }
  if (res->status != 200) {
    throw GatewayError("HTTP " + std::to_string(res->status) + " from " + origin);
  }
  json reply = json::parse(res->body, nullptr, false);
  if (reply.is_discarded()) throw GatewayError("chat endpoint returned non-JSON body");
  try {
    return reply.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception&) {
    throw GatewayError("chat endpoint reply lacks choices[0].message.content");
  }
}

}  // namespace privgemo::gateway
