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

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "privgemo/errors.hpp"

namespace privgemo::memory {

using json = nlohmann::json;
using retrieval::Mode;

std::string to_string(const Step& s) { return std::string(retrieval::to_string(s.mode)) + "@" + std::to_string(s.depth); }

std::optional<Step> step_from_string(std::string_view s) {
  const auto at = s.find('@');
  if (at == std::string_view::npos) return std::nullopt;
  auto mode = retrieval::mode_from_string(s.substr(0, at));
  if (!mode) return std::nullopt;
  const std::string digits(s.substr(at + 1));
  if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) return std::nullopt;
  return Step{*mode, static_cast<std::size_t>(std::stoul(digits))};
}

bool policy_compatible(std::string_view tag, const anon::PrivacyPolicy& policy) {
  if (tag == kAnyPolicy) return true;
  const auto bar = tag.find('|');
  if (bar == std::string_view::npos) return false;
  if (tag.substr(0, bar) != anon::to_string(policy.relation_mode)) return false;
  try {
    const double ratio = std::stod(std::string(tag.substr(bar + 1)));
    return std::fabs(ratio - policy.anonymization_ratio) <= kPolicyRatioTolerance + 1e-12;
  } catch (const std::exception&) {
    return false;
  }
}

// ---------------------------------------------------------------------------
// Key files

crypto::SecretBytes load_key_file(const std::filesystem::path& path) {
  if (path.empty()) throw KeyFileError("no memory key file configured (set PRIVGEMO_MEMORY_KEY)");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw KeyFileError("cannot read memory key file " + path.string());
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (content.size() == 32) return crypto::SecretBytes(crypto::Bytes(content.begin(), content.end()));
  while (!content.empty() && std::isspace(static_cast<unsigned char>(content.back()))) content.pop_back();
  auto bytes = content.size() == 64 ? crypto::from_hex(content) : std::nullopt;
  crypto::secure_zero(std::span(reinterpret_cast<std::uint8_t*>(content.data()), content.size()));
  if (!bytes) throw KeyFileError("memory key file must hold 32 raw bytes or 64 hex characters");
  return crypto::SecretBytes(std::move(*bytes));
}

void create_key_file(const std::filesystem::path& path) {
  if (std::filesystem::exists(path)) throw KeyFileError("refusing to overwrite " + path.string());
  auto key = crypto::random_bytes(32);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw KeyFileError("cannot write " + path.string());
    out << crypto::to_hex(key) << '\n';
  }
  crypto::secure_zero(key);
  std::filesystem::permissions(path, std::filesystem::perms::owner_read | std::filesystem::perms::owner_write,
                               std::filesystem::perm_options::replace);
}

std::filesystem::path resolve_key_path(const std::filesystem::path& configured) {
  if (const char* env = std::getenv("PRIVGEMO_MEMORY_KEY"); env && *env) return env;
  return configured;
}

// ---------------------------------------------------------------------------
// On-disk store

namespace {

constexpr char kVectorMagic[] = "PGVEC1";
constexpr char kKeyCheck[] = "privgemo-memory";

json payload_json(const ExperienceRecord& r) {
  std::vector<std::string> steps;
  for (const auto& s : r.trajectory) steps.push_back(to_string(s));
  return {{"indicator", r.anon_indicator}, {"d_predict", r.d_predict},
          {"trajectory", steps},           {"templates", r.path_templates},
          {"sufficient", r.outcome.sufficient}, {"warnings", r.outcome.warnings}};
}

void apply_payload(ExperienceRecord& r, const json& p) {
  r.anon_indicator = p.at("indicator").get<std::string>();
  r.d_predict = p.at("d_predict").get<std::size_t>();
  r.trajectory.clear();
  for (const auto& s : p.at("trajectory")) {
    auto step = step_from_string(s.get<std::string>());
    if (!step) throw StoreError("bad trajectory step in stored record");
    r.trajectory.push_back(*step);
  }
  r.path_templates = p.at("templates").get<std::vector<std::string>>();
  r.outcome.sufficient = p.at("sufficient").get<bool>();
  r.outcome.warnings = p.at("warnings").get<std::vector<std::string>>();
}

}  // namespace

struct ExperiencePool::Store {
  std::filesystem::path dir;
  crypto::SecretBytes key;
  std::ofstream log;
  std::ofstream vectors;

  std::filesystem::path log_path() const { return dir / "records.log"; }
  std::filesystem::path vector_path() const { return dir / "vectors.bin"; }

  std::string seal(const ExperienceRecord& r) const {
    return crypto::to_hex(crypto::seal_aes_gcm(key.view(), payload_json(r).dump()));
  }
  json open_payload(const std::string& hex) const {
    auto bytes = crypto::from_hex(hex);
    if (!bytes) throw StoreError("stored payload is not hex");
    return json::parse(crypto::open_aes_gcm(key.view(), *bytes));
  }

  void write_line(const json& j) {
    log << j.dump() << '\n';
    log.flush();
    if (!log) throw StoreError("cannot append to " + log_path().string());
  }
  void write_vectors(const ExperienceRecord& r) {
    const std::uint64_t id = r.id;
    vectors.write(reinterpret_cast<const char*>(&id), sizeof id);
    vectors.write(reinterpret_cast<const char*>(r.q_embedding.data()),
                  static_cast<std::streamsize>(r.q_embedding.size() * sizeof(double)));
    vectors.write(reinterpret_cast<const char*>(r.i_embedding.data()),
                  static_cast<std::streamsize>(r.i_embedding.size() * sizeof(double)));
    vectors.flush();
    if (!vectors) throw StoreError("cannot append to " + vector_path().string());
  }
};

ExperiencePool::ExperiencePool(std::size_t dimension, std::size_t capacity)
    : dimension_(dimension), capacity_(capacity) {
  if (dimension == 0) throw InvalidArgument("embedding dimension must be positive");
}

ExperiencePool::~ExperiencePool() = default;
ExperiencePool::ExperiencePool(ExperiencePool&& o) noexcept
    : dimension_(o.dimension_),
      capacity_(o.capacity_),
      records_(std::move(o.records_)),
      next_id_(o.next_id_),
      clock_(o.clock_),
      store_(std::move(o.store_)) {}
ExperiencePool& ExperiencePool::operator=(ExperiencePool&& o) noexcept {
  if (this != &o) {
    dimension_ = o.dimension_;
    capacity_ = o.capacity_;
    records_ = std::move(o.records_);
    next_id_ = o.next_id_;
    clock_ = o.clock_;
    store_ = std::move(o.store_);
  }
  return *this;
}

ExperiencePool ExperiencePool::open(const std::filesystem::path& dir, crypto::SecretBytes key,
                                    const gateway::Embedder& embedder, std::size_t capacity) {
  ExperiencePool pool(embedder.dimension(), capacity);
  auto store = std::make_unique<Store>();
  store->dir = dir;
  store->key = std::move(key);
  std::filesystem::create_directories(dir);
  const bool fresh = !std::filesystem::exists(store->log_path());
  const std::size_t dim = pool.dimension_;

  if (!fresh) {
    // Sidecar vectors first, keyed by record id.
    std::unordered_map<std::uint64_t, std::pair<gateway::Vector, gateway::Vector>> vectors;
    std::ifstream vin(store->vector_path(), std::ios::binary);
    if (!vin) throw StoreError("missing vector sidecar in " + dir.string());
    char magic[sizeof kVectorMagic - 1];
    std::uint32_t file_dim = 0;
    vin.read(magic, sizeof magic);
    vin.read(reinterpret_cast<char*>(&file_dim), sizeof file_dim);
    if (!vin || std::memcmp(magic, kVectorMagic, sizeof magic) != 0) throw StoreError("bad vector sidecar header");
    if (file_dim != dim) throw StoreError("vector sidecar dimension does not match the embedder");
    while (true) {
      std::uint64_t id = 0;
      if (!vin.read(reinterpret_cast<char*>(&id), sizeof id)) break;
      gateway::Vector q(dim), i(dim);
      vin.read(reinterpret_cast<char*>(q.data()), static_cast<std::streamsize>(dim * sizeof(double)));
      vin.read(reinterpret_cast<char*>(i.data()), static_cast<std::streamsize>(dim * sizeof(double)));
      if (!vin) throw StoreError("truncated vector sidecar");
      vectors[id] = {std::move(q), std::move(i)};
    }

    std::ifstream lin(store->log_path());
    std::string line;
    std::size_t line_no = 0;
    bool checked = false;
    while (std::getline(lin, line)) {
      ++line_no;
      if (line.empty()) continue;
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("op")) {
        throw StoreError("corrupt memory log at line " + std::to_string(line_no));
      }
      const auto op = j["op"].get<std::string>();
      if (op == "init") {
        try {
          auto check = crypto::from_hex(j.at("check").get<std::string>());
          if (!check || crypto::open_aes_gcm(store->key.view(), *check) != kKeyCheck) throw StoreError("check");
        } catch (const StoreError&) {
          throw StoreError("memory key does not open this store");
        }
        checked = true;
      } else if (op == "put") {
        ExperienceRecord r;
        r.id = j.at("id").get<std::uint64_t>();
        r.policy_tag = j.at("tag").get<std::string>();
        r.hit_count = j.at("hits").get<std::uint64_t>();
        r.last_used = j.at("last").get<std::uint64_t>();
        r.exemplar = j.value("exemplar", false);
        apply_payload(r, store->open_payload(j.at("payload").get<std::string>()));
        r.payload_sealed = true;
        auto v = vectors.find(r.id);
        if (v == vectors.end()) throw StoreError("record " + std::to_string(r.id) + " has no vectors");
        r.q_embedding = v->second.first;
        r.i_embedding = v->second.second;
        pool.next_id_ = std::max(pool.next_id_, r.id + 1);
        pool.clock_ = std::max(pool.clock_, r.last_used);
        pool.records_.push_back(std::move(r));
      } else if (op == "hits" || op == "merge" || op == "del") {
        const auto id = j.at("id").get<std::uint64_t>();
        auto it = std::find_if(pool.records_.begin(), pool.records_.end(),
                               [&](const ExperienceRecord& r) { return r.id == id; });
        if (it == pool.records_.end()) continue;
        if (op == "del") {
          pool.records_.erase(it);
        } else {
          if (j.contains("hits")) it->hit_count = j["hits"].get<std::uint64_t>();
          if (j.contains("last")) it->last_used = j["last"].get<std::uint64_t>();
          if (j.contains("payload")) apply_payload(*it, store->open_payload(j["payload"].get<std::string>()));
          pool.clock_ = std::max(pool.clock_, it->last_used);
        }
      } else if (op == "clear") {
        pool.records_.clear();
      } else {
        throw StoreError("unknown memory log op '" + op + "'");
      }
    }
    if (!checked) throw StoreError("memory log lacks its key check");
  }

  store->log.open(store->log_path(), std::ios::app);
  store->vectors.open(store->vector_path(), std::ios::binary | std::ios::app);
  if (!store->log || !store->vectors) throw StoreError("cannot open memory store in " + dir.string());
  if (fresh) {
    store->vectors.write(kVectorMagic, sizeof kVectorMagic - 1);
    const auto d32 = static_cast<std::uint32_t>(dim);
    store->vectors.write(reinterpret_cast<const char*>(&d32), sizeof d32);
    store->vectors.flush();
    store->write_line({{"op", "init"},
                       {"dim", dim},
                       {"check", crypto::to_hex(crypto::seal_aes_gcm(store->key.view(), kKeyCheck))}});
  }
  pool.store_ = std::move(store);
  if (fresh) pool.ensure_seeded(embedder);
  return pool;
}

std::size_t ExperiencePool::size() const {
  std::shared_lock lock(mutex_);
  return records_.size();
}

bool ExperiencePool::persistent() const noexcept { return store_ != nullptr; }

std::vector<ExperienceRecord> ExperiencePool::snapshot() const {
  std::shared_lock lock(mutex_);
  return records_;
}

std::optional<ExperienceRecord> ExperiencePool::find(std::uint64_t id) const {
  std::shared_lock lock(mutex_);
  for (const auto& r : records_) {
    if (r.id == id) return r;
  }
  return std::nullopt;
}

std::uint64_t ExperiencePool::tick() {
  std::unique_lock lock(mutex_);
  return ++clock_;
}

void ExperiencePool::append_locked(const ExperienceRecord& r) {
  if (!store_) return;
  store_->write_vectors(r);
  store_->write_line({{"op", "put"},
                      {"id", r.id},
                      {"tag", r.policy_tag},
                      {"hits", r.hit_count},
                      {"last", r.last_used},
                      {"exemplar", r.exemplar},
                      {"payload", store_->seal(r)}});
}

std::uint64_t ExperiencePool::add(ExperienceRecord record) {
  if (record.q_embedding.size() != dimension_ || record.i_embedding.size() != dimension_) {
    throw InvalidArgument("experience embeddings must have dimension " + std::to_string(dimension_));
  }
  std::unique_lock lock(mutex_);
  record.id = next_id_++;
  if (record.last_used == 0) record.last_used = ++clock_;
  record.payload_sealed = store_ != nullptr;
  append_locked(record);
  records_.push_back(std::move(record));
  const auto id = records_.back().id;
  prune_locked();
  return id;
}

void ExperiencePool::merge(std::uint64_t id, const std::vector<std::string>& templates) {
  std::unique_lock lock(mutex_);
  auto it = std::find_if(records_.begin(), records_.end(), [&](const ExperienceRecord& r) { return r.id == id; });
  if (it == records_.end()) throw InvalidArgument("no experience record " + std::to_string(id));
  for (const auto& t : templates) {
    if (std::find(it->path_templates.begin(), it->path_templates.end(), t) == it->path_templates.end()) {
      it->path_templates.push_back(t);
    }
  }
  ++it->hit_count;
  it->last_used = ++clock_;
  if (store_) {
    store_->write_line(
        {{"op", "merge"}, {"id", id}, {"hits", it->hit_count}, {"last", it->last_used}, {"payload", store_->seal(*it)}});
  }
}

void ExperiencePool::record_hits(const std::vector<std::uint64_t>& ids) {
  std::unique_lock lock(mutex_);
  for (auto id : ids) {
    for (auto& r : records_) {
      if (r.id != id) continue;
      ++r.hit_count;
      r.last_used = ++clock_;
      if (store_) store_->write_line({{"op", "hits"}, {"id", id}, {"hits", r.hit_count}, {"last", r.last_used}});
    }
  }
}

void ExperiencePool::clear() {
  std::unique_lock lock(mutex_);
  records_.clear();
  if (store_) store_->write_line({{"op", "clear"}});
}

void ExperiencePool::prune_locked() {
  while (records_.size() > capacity_) {
    auto victim = records_.end();
    for (auto it = records_.begin(); it != records_.end(); ++it) {
      if (it->exemplar) continue;
      if (victim == records_.end() ||
          std::tie(it->hit_count, it->last_used) < std::tie(victim->hit_count, victim->last_used)) {
        victim = it;
      }
    }
    if (victim == records_.end()) break;
    if (store_) store_->write_line({{"op", "del"}, {"id", victim->id}});
    records_.erase(victim);
  }
}

void ExperiencePool::ensure_seeded(const gateway::Embedder& embedder) {
  if (size() > 0) return;
  struct Seed {
    const char* question;
    const char* indicator;
    std::size_t d_predict;
    const char* tpl;
  };
  static const Seed kSeeds[] = {
      {"Which championship did the team of this mascot win?", "TOPIC_1 -- mascot_team -- X -- won -- ANS", 2,
       "TOPIC_1 -- sports.mascot -- X -- sports.sports_team -- ANS"},
      {"Which country contains this place and borders that country?",
       "TOPIC_1 -- contained_by -- ANS -- borders -- TOPIC_2", 1,
       "TOPIC_1 -- location.administrative_division -- X -- location.location -- TOPIC_2"},
      {"Which nation owns this division within that region?", "TOPIC_1 -- owned_by -- ANS -- within -- TOPIC_2", 1,
       "TOPIC_1 -- location.administrative_division -- X -- location.location -- TOPIC_2"},
      {"What is the nationality of this person's spouse?", "TOPIC_1 -- spouse -- X -- nationality -- ANS", 2,
       "TOPIC_1 -- people.person -- X -- people.person -- ANS"},
      {"Who held this office in the city and was born in that city?",
       "TOPIC_1 -- officials -- TOPIC_2 -- officeholder -- ANS -- place_of_birth -- TOPIC_3", 2,
       "TOPIC_1 -- government.governmental_jurisdiction -- X -- government.government_position_held -- TOPIC_2"},
  };
  for (const auto& s : kSeeds) {
    ExperienceRecord r;
    r.anon_indicator = s.indicator;
    r.d_predict = s.d_predict;
    r.path_templates = {s.tpl};
    r.outcome.sufficient = true;
    r.q_embedding = embedder.embed(s.question);
    r.i_embedding = embedder.embed(s.indicator);
    r.policy_tag = kAnyPolicy;
    r.exemplar = true;
    add(std::move(r));
  }
}

json ExperiencePool::export_bundle() const {
  std::shared_lock lock(mutex_);
  json records = json::array();
  for (const auto& r : records_) {
    records.push_back({{"tag", r.policy_tag},
                       {"hits", r.hit_count},
                       {"last", r.last_used},
                       {"exemplar", r.exemplar},
                       {"payload", store_ ? json(store_->seal(r)) : payload_json(r)},
                       {"q", r.q_embedding},
                       {"i", r.i_embedding}});
  }
  return {{"format", "privgemo-memory"}, {"version", 1}, {"dim", dimension_}, {"sealed", store_ != nullptr},
          {"records", records}};
}

std::size_t ExperiencePool::import_bundle(const json& bundle) {
  if (bundle.value("format", "") != "privgemo-memory") throw StoreError("not a memory bundle");
  if (bundle.at("dim").get<std::size_t>() != dimension_) throw StoreError("bundle dimension mismatch");
  const bool sealed = bundle.value("sealed", false);
  if (sealed && !store_) throw StoreError("a sealed bundle needs a keyed store");
  std::vector<ExperienceRecord> incoming;
  for (const auto& j : bundle.at("records")) {
    ExperienceRecord r;
    r.policy_tag = j.at("tag").get<std::string>();
    r.hit_count = j.at("hits").get<std::uint64_t>();
    r.last_used = j.at("last").get<std::uint64_t>();
    r.exemplar = j.value("exemplar", false);
    apply_payload(r, sealed ? store_->open_payload(j.at("payload").get<std::string>()) : j.at("payload"));
    r.q_embedding = j.at("q").get<gateway::Vector>();
    r.i_embedding = j.at("i").get<gateway::Vector>();
    incoming.push_back(std::move(r));
  }
  for (auto& r : incoming) add(std::move(r));
  return incoming.size();
}

// ---------------------------------------------------------------------------
// Buffer

void HighFreqBuffer::touch(std::uint64_t id, double score, std::uint64_t clock) {
  std::lock_guard lock(mutex_);
  entries_[id] = Entry{score, clock};
  while (entries_.size() > capacity_) {
    auto victim = entries_.begin();
    for (auto it = entries_.begin(); it != entries_.end(); ++it) {
      if (std::tie(it->second.score, it->second.last_used, it->first) <
          std::tie(victim->second.score, victim->second.last_used, victim->first)) {
        victim = it;
      }
    }
    entries_.erase(victim);
  }
}

bool HighFreqBuffer::contains(std::uint64_t id) const {
  std::lock_guard lock(mutex_);
  return entries_.count(id) > 0;
}

std::vector<std::uint64_t> HighFreqBuffer::ids() const {
  std::lock_guard lock(mutex_);
  std::vector<std::uint64_t> out;
  for (const auto& [id, e] : entries_) out.push_back(id);
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t HighFreqBuffer::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

// ---------------------------------------------------------------------------
// Retrieval and control hints

double hybrid_score(const ExperienceRecord& r, const gateway::Vector& q, const gateway::Vector& i) {
  return kQuestionWeight * gateway::cosine(q, r.q_embedding) + kIndicatorWeight * gateway::cosine(i, r.i_embedding);
}

double buffer_score(double hybrid, std::uint64_t hit_count) {
  const double h = static_cast<double>(hit_count);
  return kSimilarityWeight * hybrid + kHitWeight * (h / (h + 1.0));
}

namespace {

bool useful(const ScoredRecord& s) { return s.hybrid >= kUsefulScore && s.record.outcome.sufficient; }

std::size_t clamp_depth(std::size_t d, std::size_t d_max) { return std::clamp<std::size_t>(d, 1, std::max<std::size_t>(1, d_max)); }

}  // namespace

ExperienceResult get_exp(ExperiencePool& pool, HighFreqBuffer& buffer, const ExperienceQuery& query,
                         const anon::PrivacyPolicy& policy, std::size_t w_exp, const gateway::Embedder& embedder) {
  if (w_exp == 0) throw InvalidArgument("w_exp must be at least 1");
  ExperienceResult out;
  out.hints.depth = clamp_depth(std::min(query.d_predict, query.d_max), query.d_max);

  const auto q = embedder.embed(query.question);
  const bool have_indicator = query.indicator && !query.indicator->empty();
  const auto i = have_indicator ? embedder.embed(*query.indicator) : gateway::Vector{};

  // Buffer entries are pool records, so the union is the pool itself.
  std::vector<ScoredRecord> scored;
  for (auto& r : pool.snapshot()) {
    if (!policy_compatible(r.policy_tag, policy)) continue;
    ScoredRecord s;
    s.hybrid = have_indicator ? hybrid_score(r, q, i)
                              : (kQuestionWeight + kIndicatorWeight) * gateway::cosine(q, r.q_embedding);
    s.buffer = buffer_score(s.hybrid, r.hit_count);
    s.record = std::move(r);
    scored.push_back(std::move(s));
  }
  std::sort(scored.begin(), scored.end(), [](const ScoredRecord& a, const ScoredRecord& b) {
    if (a.buffer != b.buffer) return a.buffer > b.buffer;
    return a.record.id < b.record.id;
  });
  if (scored.size() > w_exp) scored.resize(w_exp);

  std::vector<std::uint64_t> ids;
  for (const auto& s : scored) ids.push_back(s.record.id);
  pool.record_hits(ids);
  for (const auto& s : scored) buffer.touch(s.record.id, s.buffer, pool.tick());

  const auto first = init_policy(scored, query.d_predict, query.d_max);
  out.hints.mode = first.mode;
  out.hints.depth = first.depth;
  for (const auto& s : scored) {
    if (!useful(s)) continue;
    for (const auto& w : s.record.outcome.warnings) out.hints.warnings.push_back(w);
    for (const auto& t : s.record.path_templates) {
      if (std::find(out.hints.templates.begin(), out.hints.templates.end(), t) == out.hints.templates.end()) {
        out.hints.templates.push_back(t);
      }
    }
  }
  out.records = std::move(scored);
  return out;
}

Step init_policy(const std::vector<ScoredRecord>& records, std::size_t d_predict, std::size_t d_max) {
  if (d_predict == 0) throw InvalidArgument("d_predict must be at least 1");
  Step step{Mode::kTopic, clamp_depth(std::min(d_predict, d_max), d_max)};
  for (const auto& s : records) {
    if (!useful(s) || s.record.trajectory.empty()) continue;
    step = s.record.trajectory.front();
    step.depth = clamp_depth(step.depth, d_max);
    break;
  }
  return step;
}

Suggestion next_step(const std::vector<ScoredRecord>& records, const NodeProgress& node) {
  const auto here = to_string(node.at);
  for (const auto& s : records) {
    if (s.hybrid < kUsefulScore) continue;
    for (const auto& w : s.record.outcome.warnings) {
      if (w.rfind(here + ":", 0) == 0) return {node.at, true, "warning: " + w};
    }
  }
  for (const auto& s : records) {
    if (!useful(s)) continue;
    const auto& t = s.record.trajectory;
    for (std::size_t j = 0; j + 1 < t.size(); ++j) {
      if (t[j] == node.at) {
        return {Step{t[j + 1].mode, clamp_depth(t[j + 1].depth, node.d_max)}, false, "experience"};
      }
    }
  }
  const std::size_t target = std::min(node.d_predict, node.d_max);
  const auto d = node.at.depth;
  if (d < target) return {Step{node.at.mode, d + 1}, false, "deepen"};
  if (node.at.mode != Mode::kPredict) {
    const Mode next = node.at.mode == Mode::kTopic ? Mode::kRefine : Mode::kPredict;
    return {Step{next, std::min(d + 1, node.d_max)}, false, "switch mode"};
  }
  if (d < node.d_max) return {Step{Mode::kPredict, d + 1}, false, "deepen"};
  return {node.at, true, "all modes exhausted"};
}

std::optional<std::uint64_t> write_back_if_success(ExperiencePool& pool, HighFreqBuffer& buffer,
                                                   const Artifacts& artifacts, const anon::PrivacyPolicy& policy,
                                                   const gateway::BoundaryScanner& guard,
                                                   const gateway::Embedder& embedder) {
  if (!artifacts.outcome.sufficient) return std::nullopt;
  std::vector<std::string> templates;
  for (const auto& t : artifacts.templates) {
    if (auto leak = guard.find(t)) throw LeakageGuardError("template carries raw label '" + *leak + "'");
    if (std::find(templates.begin(), templates.end(), t) == templates.end()) templates.push_back(t);
  }
  if (auto leak = guard.find(artifacts.anon_indicator)) {
    throw LeakageGuardError("indicator carries raw label '" + *leak + "'");
  }
  for (const auto& w : artifacts.outcome.warnings) {
    if (auto leak = guard.find(w)) throw LeakageGuardError("warning carries raw label '" + *leak + "'");
  }

  auto q = embedder.embed(artifacts.question);
  auto i = embedder.embed(artifacts.anon_indicator.empty() ? std::string("ANS") : artifacts.anon_indicator);
  const auto tag = policy.fingerprint();
  for (const auto& r : pool.snapshot()) {
    if (r.exemplar || r.policy_tag != tag || r.anon_indicator != artifacts.anon_indicator) continue;
    if (gateway::cosine(q, r.q_embedding) >= 1.0 - 1e-9) {
      pool.merge(r.id, templates);
      buffer.touch(r.id, buffer_score(1.0, r.hit_count + 1), pool.tick());
      return r.id;
    }
  }
  ExperienceRecord r;
  r.anon_indicator = artifacts.anon_indicator;
  r.d_predict = artifacts.d_predict;
  r.trajectory = artifacts.trajectory;
  r.path_templates = std::move(templates);
  r.outcome = artifacts.outcome;
  r.q_embedding = std::move(q);
  r.i_embedding = std::move(i);
  r.policy_tag = tag;
  const auto id = pool.add(std::move(r));
  buffer.touch(id, buffer_score(1.0, 0), pool.tick());
  return id;
}

}  // namespace privgemo::memory
