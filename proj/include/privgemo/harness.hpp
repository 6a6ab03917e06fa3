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
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "privgemo/controller.hpp"

namespace privgemo::harness {

struct QuestionRecord {
  std::string id;
  std::string text;
  std::vector<std::string> gold;
  std::filesystem::path graph;  // empty: use the default graph
  std::filesystem::path mock;   // empty: use the default backends
};

/// One JSON object per line with "id", "text" and "gold" (a string or an
/// array); optional "graph" and "mock" are resolved against the file's
/// directory. Blank lines are skipped. Throws InvalidArgument on a bad line.
std::vector<QuestionRecord> load_questions(const std::filesystem::path& path);

/// Lower-case, punctuation to spaces, articles dropped, whitespace collapsed.
std::string normalize_answer(std::string_view text);
/// Top answer against any gold answer, after normalization.
bool hits_at_1(const std::vector<std::string>& answers, const std::vector<std::string>& gold);

/// Scenario file, or `<dir>/<name>.json` for a bare name.
std::filesystem::path resolve_mock(std::string_view name, const std::filesystem::path& dir);
/// Concatenates the rules of `files` in order, then the rules of every file
/// they name under "include" (relative paths, each file once).
std::shared_ptr<gateway::ScriptedBackend> load_mock(const std::vector<std::filesystem::path>& files);

struct QuestionReport {
  std::string id;
  std::string question;
  std::vector<std::string> answers;
  std::vector<std::string> gold;
  bool match = false;
  bool sufficient = false;
  std::string source;
  std::size_t brain_calls = 0;
  std::size_t hand_calls = 0;
  std::size_t exposure_events = 0;  // brain calls plus KG expansions
  double reduction_ratio = 0.0;
  std::string error;  // set when the question failed
};

struct EvalReport {
  double ratio = 1.0;
  std::vector<QuestionReport> questions;
  std::size_t matched = 0;

  /// nullopt for an empty suite.
  std::optional<double> hits() const;
  double mean_brain_calls() const;
  double mean_hand_calls() const;
  double mean_reduction() const;
};

/// "n/a" for an undefined value, else three decimals.
std::string format_hits(std::optional<double> hits);

struct EvalOptions {
  anon::PrivacyPolicy policy;
  controller::Limits limits;
  std::filesystem::path default_graph;
  controller::Backends backends;  // used when a record names no mock
  std::shared_ptr<const gateway::Embedder> embedder;
  /// Shared across the suite; a fresh in-memory pool when null.
  memory::ExperiencePool* pool = nullptr;
  std::size_t workers = 1;
};

/// Runs every record. A failing question is a miss with its error recorded.
EvalReport evaluate(const std::vector<QuestionRecord>& questions, const EvalOptions& options);

struct SweepRow {
  double ratio = 0.0;
  EvalReport report;
};
/// One evaluation per anonymization ratio, each with a fresh memory pool.
std::vector<SweepRow> sweep(const std::vector<QuestionRecord>& questions, const std::vector<double>& ratios,
                            EvalOptions options);

nlohmann::json to_json(const EvalReport& report);
nlohmann::json to_json(const std::vector<SweepRow>& rows);
std::string render_table(const EvalReport& report);
std::string render_table(const std::vector<SweepRow>& rows);

/// Printable result of one run.
nlohmann::json to_json(const controller::RunResult& result);
std::string render(const controller::RunResult& result);

}  // namespace privgemo::harness
