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

#include <atomic>
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace privgemo::gateway {

enum class Channel { kBrain, kHand };
const char* to_string(Channel c);

/// Ordered (name, value) pairs; order is preserved in rendered prompts and
/// transcripts.
using Fields = std::vector<std::pair<std::string, std::string>>;

std::string_view field(const Fields& fields, std::string_view name);
/// "name: value" lines, the canonical payload form for scanning and digests.
std::string flatten(const Fields& fields);

struct TemplateSpec {
  std::string id;
  Channel channel;
  std::vector<std::string> fields;
  double temperature;
  std::string body;  // "{name}" placeholders
};

const std::vector<TemplateSpec>& registered_templates();
/// Throws InvalidArgument for an id that is not registered.
const TemplateSpec& find_template(std::string_view id);
std::string render(const TemplateSpec& spec, const Fields& fields);

struct Request {
  Channel channel = Channel::kHand;
  std::string template_id;
  Fields fields;
  std::string prompt;
  double temperature = 0.0;
  int max_tokens = 256;
};

/// A model endpoint. complete() returns raw reply text or throws GatewayError.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string complete(const Request& request) = 0;
  virtual std::string name() const = 0;
};

// ---------------------------------------------------------------------------
// Boundary enforcement

/// Word-bounded, case-insensitive search for raw labels. Labels shorter than
/// the minimum length are exempt (and reported via exempt_labels()).
class BoundaryScanner {
 public:
  static constexpr std::size_t kMinLabelLength = 4;

  BoundaryScanner() = default;
  explicit BoundaryScanner(const std::vector<std::string>& raw_labels);

  /// First raw label found in `text`, if any.
  std::optional<std::string> find(std::string_view text) const;
  /// Throws BoundaryViolation naming the field.
  void check(const Fields& fields) const;

  std::size_t size() const noexcept { return labels_.size(); }
  const std::vector<std::string>& exempt_labels() const noexcept { return exempt_; }

 private:
  std::vector<std::string> labels_;  // lower-cased, longest first
  std::vector<std::string> exempt_;
};

bool is_word_char(char c) noexcept;
/// Case-insensitive whole-word occurrence of `needle` in `haystack`.
bool contains_word(std::string_view haystack, std::string_view needle);
std::string to_lower(std::string_view s);

// ---------------------------------------------------------------------------
// Transcript and exposure ledger

enum class EventKind { kBrainCall, kHandCall, kKgExpansion, kNote };
const char* to_string(EventKind k);

struct ExposureTally {
  std::size_t brain_calls = 0;
  std::size_t hand_calls = 0;
  std::size_t kg_expansions = 0;
  std::size_t brain_payload_tokens = 0;
  std::size_t hand_payload_tokens = 0;
  std::size_t expansion_triples = 0;
};

struct TranscriptEvent {
  std::size_t seq = 0;
  std::string timestamp;
  EventKind kind = EventKind::kNote;
  std::string channel;
  std::string template_id;
  std::string payload;
  std::string payload_digest;
  std::string reply;
  std::size_t payload_size = 0;
  std::optional<std::size_t> node_id;
  ExposureTally tally;
};

/// Append-only event log of one run.
class Transcript {
 public:
  void append(TranscriptEvent event);
  const std::vector<TranscriptEvent>& events() const noexcept { return events_; }
  std::string to_ndjson(bool include_timestamps = true) const;
  void write(const std::filesystem::path& path) const;
  /// Concatenated payloads of every brain_call event.
  std::string brain_payloads() const;

 private:
  std::vector<TranscriptEvent> events_;
};

std::size_t approx_tokens(std::string_view text);

// ---------------------------------------------------------------------------
// Per-run gateway

struct GatewayOptions {
  bool brain_enabled = true;
  std::size_t max_brain_calls = 12;
  int max_tokens = 256;
};

/// Routes template calls to the Brain or Hand backend, applies the boundary
/// scan to every Brain payload, and records every exchange in the transcript.
/// One instance per run; backends may be shared between runs.
class Gateway {
 public:
  Gateway(std::shared_ptr<Backend> brain, std::shared_ptr<Backend> hand, GatewayOptions options = {});

  void set_boundary(BoundaryScanner scanner) { scanner_ = std::move(scanner); }
  const BoundaryScanner& boundary() const noexcept { return scanner_; }

  /// Throws BoundaryViolation before anything is sent; GatewayError when the
  /// Brain is disabled, over budget, or the backend fails.
  std::string brain_call(std::string_view template_id, const Fields& fields);
  std::string hand_call(std::string_view template_id, const Fields& fields);

  bool brain_available() const noexcept;
  void record_kg_expansion(std::size_t triples, std::optional<std::size_t> node_id = std::nullopt);
  void note(std::string text);

  const ExposureTally& tally() const noexcept { return tally_; }
  const Transcript& transcript() const noexcept { return transcript_; }
  const GatewayOptions& options() const noexcept { return options_; }

 private:
  std::string call(Channel channel, std::string_view template_id, const Fields& fields);
  void push(TranscriptEvent event);

  std::shared_ptr<Backend> brain_;
  std::shared_ptr<Backend> hand_;
  GatewayOptions options_;
  BoundaryScanner scanner_;
  ExposureTally tally_;
  Transcript transcript_;
};

// ---------------------------------------------------------------------------
// Reply parsing

/// Parses a JSON object reply. On failure strips prose around the outermost
/// braces and tries once more; then throws MalformedModelOutput.
nlohmann::json parse_json_reply(std::string_view text);

struct FollowUp {
  std::string missing;
  std::string query;
  std::string reasoning;
};
/// "Missing: / Query: / Reasoning:" reply; Query is mandatory.
FollowUp parse_follow_up(std::string_view text);

// ---------------------------------------------------------------------------
// Backends

/// Rule-driven mock loaded from a JSON scenario. Rules are tried in order;
/// the first whose template matches, whose `when` patterns all match and
/// whose `unless` patterns all miss the flattened fields, and whose reply
/// variables all resolve, produces the reply.
class ScriptedBackend final : public Backend {
 public:
  struct Rule {
    std::string template_id;
    std::vector<std::string> when;
    std::vector<std::string> unless;
    std::string reply;
  };

  explicit ScriptedBackend(std::vector<Rule> rules, std::string name = "scripted");
  static std::shared_ptr<ScriptedBackend> from_file(const std::filesystem::path& path);
  static std::shared_ptr<ScriptedBackend> from_json(const nlohmann::json& scenario);

  std::string complete(const Request& request) override;
  std::string name() const override { return name_; }

  /// Variable expansion, exposed for tests. Returns nullopt when any
  /// variable cannot be resolved.
  static std::optional<std::string> expand(std::string_view reply, const Fields& fields);

 private:
  std::vector<Rule> rules_;
  std::string name_;
};

/// Delegates to an inner backend but always reports evidence as
/// insufficient.
class AdversarialBackend final : public Backend {
 public:
  explicit AdversarialBackend(std::shared_ptr<Backend> inner) : inner_(std::move(inner)) {}
  std::string complete(const Request& request) override;
  std::string name() const override { return "adversarial(" + inner_->name() + ")"; }

 private:
  std::shared_ptr<Backend> inner_;
};

/// Counts and records every request that reaches it.
class CountingBackend final : public Backend {
 public:
  explicit CountingBackend(std::shared_ptr<Backend> inner) : inner_(std::move(inner)) {}
  std::string complete(const Request& request) override;
  std::string name() const override { return inner_->name(); }

  std::size_t count() const noexcept { return count_.load(); }
  std::vector<Request> requests() const;
  void reset();

 private:
  std::shared_ptr<Backend> inner_;
  std::atomic<std::size_t> count_{0};
  mutable std::mutex mu_;
  std::vector<Request> requests_;
};

struct HttpEndpoint {
  std::string base_url;  // e.g. https://api.example.com/v1
  std::string model;
  std::string api_key_env;  // environment variable holding the bearer token
  int timeout_seconds = 60;
};

/// Minimal chat-completions client (POST {base_url}/chat/completions).
class HttpChatBackend final : public Backend {
 public:
  explicit HttpChatBackend(HttpEndpoint endpoint);
  std::string complete(const Request& request) override;
  std::string name() const override { return "http(" + endpoint_.model + ")"; }

 private:
  HttpEndpoint endpoint_;
  std::mutex mu_;
};

}  // namespace privgemo::gateway
