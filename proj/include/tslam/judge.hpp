#pragma once

// LLM-as-judge evaluation: rubric rendering, chat-completions and scripted
// mock endpoints, verdict parsing, bounded-concurrency scoring and
// per-category aggregation.

#include <array>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "tslam/datapipe.hpp"
#include "tslam/error.hpp"
#include "tslam/fetch.hpp"
#include "tslam/model.hpp"

namespace tslam {

inline constexpr std::array<std::string_view, 3> kCriteria = {"instruction_following", "linguistic_quality",
                                                             "technical_accuracy_relevance"};

struct RubricCriterion {
  std::string name;
  std::string description;
};

struct Rubric {
  std::string version = "1";
  std::vector<RubricCriterion> criteria;
  int scale_min = 0;
  int scale_max = 10;
  std::string system_prompt_template;
};

inline Rubric parse_rubric(const nlohmann::json& j) {
  static const std::set<std::string> allowed = {"version", "criteria", "scale_min", "scale_max",
                                                "system_prompt_template"};
  if (!j.is_object()) throw ConfigError("rubric must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in rubric");
  Rubric r;
  r.version = j.value("version", r.version);
  r.scale_min = j.value("scale_min", 0);
  r.scale_max = j.value("scale_max", 10);
  r.system_prompt_template = j.at("system_prompt_template").get<std::string>();
  for (const auto& c : j.at("criteria"))
    r.criteria.push_back({c.at("name").get<std::string>(), c.at("description").get<std::string>()});
  if (r.scale_min != 0 || r.scale_max != 10) throw ConfigError("rubric scale must be 0 to 10");
  if (r.criteria.size() != kCriteria.size()) throw ConfigError("rubric needs exactly three criteria");
  for (std::size_t i = 0; i < kCriteria.size(); ++i)
    if (r.criteria[i].name != kCriteria[i])
      throw ConfigError("rubric criterion " + std::to_string(i) + " must be " + std::string(kCriteria[i]));
  return r;
}

inline Rubric load_rubric(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open rubric: " + path);
  try {
    return parse_rubric(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("rubric " + path + ": " + e.what());
  }
}

/// Fills {scale_min}, {scale_max}, {criteria} and {verdict_example}.
inline std::string render_system_prompt(const Rubric& r) {
  std::string criteria;
  for (const auto& c : r.criteria) criteria += "- " + c.name + ": " + c.description + "\n";
  nlohmann::ordered_json example;
  for (const auto& c : r.criteria) example[c.name] = r.scale_min;
  example["rationale"] = "...";
  std::string s = r.system_prompt_template;
  s = replace_all(s, "{scale_min}", std::to_string(r.scale_min));
  s = replace_all(s, "{scale_max}", std::to_string(r.scale_max));
  s = replace_all(s, "{criteria}", criteria);
  s = replace_all(s, "{verdict_example}", example.dump());
  return s;
}

struct ChatMessage {
  std::string role;
  std::string content;

  bool operator==(const ChatMessage&) const = default;
};

namespace detail {

inline std::string fenced(std::string_view label, std::string_view body) {
  std::size_t run = 0, longest = 0;
  for (char c : body) {
    run = c == '`' ? run + 1 : 0;
    longest = std::max(longest, run);
  }
  const std::string fence(std::max<std::size_t>(3, longest + 1), '`');
  std::string s = "### ";
  s += label;
  s += "\n" + fence + "text\n";
  s += body;
  s += "\n" + fence + "\n";
  return s;
}

}  // namespace detail

/// System message with the rubric, user message with labeled fenced blocks.
/// An empty reference omits its block and says so.
inline std::vector<ChatMessage> build_judge_request(std::string_view prompt, std::string_view candidate,
                                                    std::string_view reference, const Rubric& rubric) {
  std::string user = "Evaluate the candidate response to the prompt below.\n\n";
  user += detail::fenced("Prompt", prompt) + "\n";
  user += detail::fenced("Candidate response", candidate) + "\n";
  if (reference.empty()) {
    user += "No reference response is available; judge the candidate on its own merits.\n";
  } else {
    user += detail::fenced("Reference response", reference);
  }
  return {{"system", render_system_prompt(rubric)}, {"user", user}};
}

// ---------------------------------------------------------------------------
// Verdicts

struct JudgeVerdict {
  std::map<std::string, int> scores;
  std::string rationale;
  std::string raw_response;
};

class VerdictError : public DataError {
 public:
  using DataError::DataError;
};

namespace detail {

// Balanced {...} starting at `open`, respecting JSON strings.
inline std::optional<std::size_t> object_end(std::string_view s, std::size_t open) {
  int depth = 0;
  bool in_str = false, esc = false;
  for (std::size_t i = open; i < s.size(); ++i) {
    const char c = s[i];
    if (in_str) {
      if (esc) {
        esc = false;
      } else if (c == '\\') {
        esc = true;
      } else if (c == '"') {
        in_str = false;
      }
      continue;
    }
    if (c == '"') in_str = true;
    if (c == '{') ++depth;
    if (c == '}' && --depth == 0) return i;
  }
  return std::nullopt;
}

}  // namespace detail

/// First parseable JSON object in the text, validated against the rubric criteria.
inline JudgeVerdict parse_verdict(std::string_view text) {
  std::optional<nlohmann::json> obj;
  for (auto open = text.find('{'); open != std::string_view::npos; open = text.find('{', open + 1)) {
    const auto end = detail::object_end(text, open);
    if (!end) continue;
    try {
      obj = nlohmann::json::parse(text.substr(open, *end - open + 1));
      break;
    } catch (const nlohmann::json::exception&) {
    }
  }
  if (!obj || !obj->is_object()) throw VerdictError("unparseable verdict");
  JudgeVerdict v;
  v.raw_response = std::string(text);
  for (auto name : kCriteria) {
    const std::string key(name);
    if (!obj->contains(key)) throw VerdictError("incomplete verdict: missing " + key);
    const auto& s = (*obj)[key];
    if (!s.is_number_integer()) {
      if (s.is_number_float() && s.get<double>() == std::floor(s.get<double>()) && std::abs(s.get<double>()) < 1e6) {
        v.scores[key] = static_cast<int>(s.get<double>());
      } else {
        throw VerdictError("unparseable verdict: " + key + " is not an integer");
      }
    } else {
      const auto x = s.get<long long>();
      if (x < 0 || x > 10) throw VerdictError("out-of-range score: " + key + " = " + std::to_string(x));
      v.scores[key] = static_cast<int>(x);
    }
    if (v.scores[key] < 0 || v.scores[key] > 10)
      throw VerdictError("out-of-range score: " + key + " = " + std::to_string(v.scores[key]));
  }
  if (obj->contains("rationale") && (*obj)["rationale"].is_string()) v.rationale = (*obj)["rationale"].get<std::string>();
  return v;
}

// ---------------------------------------------------------------------------
// Endpoints

/// Chat-style model endpoint. Transport problems raise TransportError.
class ChatEndpoint {
 public:
  virtual ~ChatEndpoint() = default;
  virtual std::string complete(const std::vector<ChatMessage>& messages, std::size_t sample_index) = 0;
};

struct HttpEndpointConfig {
  std::string url;  // scheme://host[:port][/prefix]
  std::string model = "judge";
  double temperature = 0.0;
  int timeout_s = 60;
  std::string api_key_env = "JUDGE_API_KEY";
};

/// POST {url}/v1/chat/completions, reads choices[0].message.content.
class HttpChatEndpoint : public ChatEndpoint {
 public:
  explicit HttpChatEndpoint(HttpEndpointConfig cfg) : cfg_(std::move(cfg)), url_(parse_base_url(cfg_.url)) {
    if (const char* key = std::getenv(cfg_.api_key_env.c_str())) api_key_ = key;
  }

  std::string complete(const std::vector<ChatMessage>& messages, std::size_t) override {
    nlohmann::ordered_json body;
    body["model"] = cfg_.model;
    body["messages"] = nlohmann::ordered_json::array();
    for (const auto& m : messages) body["messages"].push_back({{"role", m.role}, {"content", m.content}});
    body["temperature"] = cfg_.temperature;

    httplib::Client cli(url_.origin);
    cli.set_connection_timeout(cfg_.timeout_s, 0);
    cli.set_read_timeout(cfg_.timeout_s, 0);
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
    auto res = cli.Post(url_.path + "/v1/chat/completions", headers,
                        body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace), "application/json");
    if (!res) throw TransportError("request failed (" + httplib::to_string(res.error()) + ")");
    if (res->status == 429 || res->status >= 500) throw TransportError("HTTP " + std::to_string(res->status));
    if (res->status != 200) throw DataError("endpoint returned HTTP " + std::to_string(res->status));
    try {
      const auto j = nlohmann::json::parse(res->body);
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed completion response: ") + e.what());
    }
  }

 private:
  HttpEndpointConfig cfg_;
  ParsedUrl url_;
  std::string api_key_;
};

/// Scripted judge. Each JSONL line is {"index": i, "responses": [...]} where an
/// entry is the verdict text or {"transport_error": "msg"}. Successive calls for
/// the same index walk the list; the last entry repeats. Index "*" is the
/// fallback for indices without a line.
class MockJudge : public ChatEndpoint {
 public:
  struct Entry {
    bool transport_error = false;
    std::string text;
  };

  explicit MockJudge(std::istream& in) { load(in); }
  explicit MockJudge(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open mock judge script: " + path);
    load(in);
  }
  /// Every index answers with the same text.
  static MockJudge constant(std::string text) {
    std::istringstream empty;
    MockJudge m(empty);
    m.fallback_ = {{false, std::move(text)}};
    return m;
  }

  MockJudge(const MockJudge& o) : script_(o.script_), fallback_(o.fallback_) {}

  std::string complete(const std::vector<ChatMessage>&, std::size_t sample_index) override {
    const std::vector<Entry>* list = nullptr;
    std::size_t call = 0;
    {
      std::lock_guard lock(mu_);
      auto it = script_.find(sample_index);
      list = it != script_.end() ? &it->second : (fallback_.empty() ? nullptr : &fallback_);
      call = calls_[sample_index]++;
    }
    if (!list) throw TransportError("no scripted verdict for sample " + std::to_string(sample_index));
    const auto& e = (*list)[std::min(call, list->size() - 1)];
    if (e.transport_error) throw TransportError(e.text);
    return e.text;
  }

 private:
  void load(std::istream& in) {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (detail::is_blank(line)) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        std::vector<Entry> entries;
        for (const auto& r : j.at("responses")) {
          if (r.is_string()) {
            entries.push_back({false, r.get<std::string>()});
          } else {
            entries.push_back({true, r.at("transport_error").get<std::string>()});
          }
        }
        if (entries.empty()) throw DataError("empty responses");
        if (j.at("index").is_string() && j["index"] == "*") {
          fallback_ = std::move(entries);
        } else {
          script_[j.at("index").get<std::size_t>()] = std::move(entries);
        }
      } catch (const std::exception& e) {
        throw DataError("mock judge line " + std::to_string(line_no) + ": " + e.what());
      }
    }
  }

  std::map<std::size_t, std::vector<Entry>> script_;
  std::vector<Entry> fallback_;
  std::mutex mu_;
  std::map<std::size_t, std::size_t> calls_;
};

// ---------------------------------------------------------------------------
// Candidate sources

class CandidateSource {
 public:
  virtual ~CandidateSource() = default;
  virtual std::string respond(const ChatSample& sample, std::size_t index) = 0;
};

struct GenerationConfig {
  double temperature = 0.7;
  double top_p = 0.9;
  int max_new = 128;
  std::uint64_t seed = 0;
};

/// Text of the assistant turn, up to the first end marker.
inline std::string strip_assistant_tail(std::string s) {
  if (auto p = s.find(kEndMarker); p != std::string::npos) s.resize(p);
  return s;
}

/// Replaces malformed UTF-8 sequences with U+FFFD.
inline std::string sanitize_utf8(std::string_view in) {
  std::string out;
  out.reserve(in.size());
  std::size_t i = 0;
  while (i < in.size()) {
    const auto c = static_cast<unsigned char>(in[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 0;
    bool ok = len > 0 && i + len <= in.size() && !(len == 2 && c < 0xC2);
    for (std::size_t k = 1; ok && k < len; ++k) ok = (static_cast<unsigned char>(in[i + k]) & 0xC0) == 0x80;
    if (ok && len == 3) {
      const auto c1 = static_cast<unsigned char>(in[i + 1]);
      ok = !(c == 0xE0 && c1 < 0xA0) && !(c == 0xED && c1 >= 0xA0);
    }
    if (ok && len == 4) {
      const auto c1 = static_cast<unsigned char>(in[i + 1]);
      ok = !(c == 0xF0 && c1 < 0x90) && !(c == 0xF4 && c1 >= 0x90) && c <= 0xF4;
    }
    if (ok) {
      out.append(in.substr(i, len));
      i += len;
    } else {
      out += "\xEF\xBF\xBD";
      ++i;
    }
  }
  return out;
}

/// In-process candidate: the NF4-based model with its adapters.
template <class Real>
class ModelCandidate : public CandidateSource {
 public:
  ModelCandidate(const Model<Real>& model, GenerationConfig gen) : model_(model), gen_(gen) {}

  std::string respond(const ChatSample& sample, std::size_t index) override {
    const auto prompt = tokenize(chat_prompt_prefix(sample.input));
    const auto ids = generate(model_, prompt, gen_.temperature, gen_.top_p, gen_.max_new, mix_seed(gen_.seed, index));
    return sanitize_utf8(strip_assistant_tail(detokenize(ids)));
  }

 private:
  const Model<Real>& model_;
  GenerationConfig gen_;
};

/// Remote candidate model behind a chat endpoint.
class EndpointCandidate : public CandidateSource {
 public:
  explicit EndpointCandidate(ChatEndpoint& ep) : ep_(ep) {}
  std::string respond(const ChatSample& sample, std::size_t index) override {
    return ep_.complete({{"system", std::string(kSystemPrompt)}, {"user", sample.input}}, index);
  }

 private:
  ChatEndpoint& ep_;
};

/// Echoes the reference answer; useful for judge calibration runs.
class ReferenceCandidate : public CandidateSource {
 public:
  std::string respond(const ChatSample& sample, std::size_t) override { return sample.output; }
};

// ---------------------------------------------------------------------------
// Aggregation

struct CriterionSums {
  std::size_t count = 0;
  std::array<long long, 3> sums{};

  void add(const JudgeVerdict& v) {
    ++count;
    for (std::size_t i = 0; i < kCriteria.size(); ++i) sums[i] += v.scores.at(std::string(kCriteria[i]));
  }
  double mean(std::size_t criterion) const {
    return count ? static_cast<double>(sums[criterion]) / static_cast<double>(count) : 0.0;
  }
};

struct EvalFailure {
  std::size_t index;
  std::string category;
  std::string kind;  // "transport" or "verdict"
  std::string message;
};

struct SampleOutcome {
  std::size_t index;
  std::string category;
  std::string candidate;
  std::optional<JudgeVerdict> verdict;
  int attempts = 0;
};

struct EvalReport {
  std::string rubric_version;
  std::size_t total = 0;
  std::map<std::string, CriterionSums> categories;
  CriterionSums overall;
  std::vector<EvalFailure> failures;
  std::vector<SampleOutcome> samples;
  bool aborted = false;

  std::size_t evaluated() const { return overall.count; }
};

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  auto means = [](const CriterionSums& s) {
    nlohmann::ordered_json m;
    for (std::size_t i = 0; i < kCriteria.size(); ++i) m[std::string(kCriteria[i])] = s.mean(i);
    return m;
  };
  auto sums = [](const CriterionSums& s) {
    nlohmann::ordered_json m;
    for (std::size_t i = 0; i < kCriteria.size(); ++i) m[std::string(kCriteria[i])] = s.sums[i];
    return m;
  };
  nlohmann::ordered_json j;
  j["rubric_version"] = r.rubric_version;
  j["aborted"] = r.aborted;
  j["total"] = r.total;
  j["evaluated"] = r.evaluated();
  j["failed"] = r.failures.size();
  j["overall"] = {{"count", r.overall.count}, {"means", means(r.overall)}, {"sums", sums(r.overall)}};
  j["categories"] = nlohmann::ordered_json::object();
  for (const auto& [cat, s] : r.categories)
    j["categories"][cat] = {{"count", s.count}, {"means", means(s)}, {"sums", sums(s)}};
  j["failures"] = nlohmann::ordered_json::array();
  for (const auto& f : r.failures)
    j["failures"].push_back({{"index", f.index}, {"category", f.category}, {"kind", f.kind}, {"message", f.message}});
  j["samples"] = nlohmann::ordered_json::array();
  for (const auto& s : r.samples) {
    nlohmann::ordered_json o;
    o["index"] = s.index;
    o["category"] = s.category;
    o["attempts"] = s.attempts;
    o["candidate"] = s.candidate;
    if (s.verdict) {
      nlohmann::ordered_json sc;
      for (auto c : kCriteria) sc[std::string(c)] = s.verdict->scores.at(std::string(c));
      o["scores"] = sc;
      o["rationale"] = s.verdict->rationale;
    }
    j["samples"].push_back(std::move(o));
  }
  return j;
}

/// Rebuilds the aggregate parts of a report (samples are not restored).
inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.rubric_version = j.at("rubric_version").get<std::string>();
    r.aborted = j.at("aborted").get<bool>();
    r.total = j.at("total").get<std::size_t>();
    auto read_sums = [](const nlohmann::json& o) {
      CriterionSums s;
      s.count = o.at("count").get<std::size_t>();
      for (std::size_t i = 0; i < kCriteria.size(); ++i) s.sums[i] = o.at("sums").at(std::string(kCriteria[i])).get<long long>();
      return s;
    };
    r.overall = read_sums(j.at("overall"));
    for (const auto& [cat, o] : j.at("categories").items()) r.categories[cat] = read_sums(o);
    for (const auto& f : j.at("failures"))
      r.failures.push_back({f.at("index").get<std::size_t>(), f.at("category").get<std::string>(),
                            f.at("kind").get<std::string>(), f.at("message").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
  return r;
}

/// Per-category table of criterion means.
inline std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  std::size_t w = 8;
  for (const auto& [cat, s] : r.categories) w = std::max(w, cat.size());
  os << std::left << std::setw(static_cast<int>(w)) << "category" << "  " << std::right << std::setw(5) << "n"
     << "  instr  lingu  techn\n";
  auto row = [&](const std::string& name, const CriterionSums& s) {
    os << std::left << std::setw(static_cast<int>(w)) << name << "  " << std::right << std::setw(5) << s.count;
    for (std::size_t i = 0; i < kCriteria.size(); ++i) os << "  " << std::setw(5) << s.mean(i);
    os << '\n';
  };
  for (const auto& [cat, s] : r.categories) row(cat, s);
  row("overall", r.overall);
  os << "evaluated " << r.evaluated() << " of " << r.total << ", failures " << r.failures.size();
  if (r.aborted) os << " (aborted)";
  os << '\n';
  for (const auto& f : r.failures) os << "  #" << f.index << " [" << f.kind << "] " << f.message << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Evaluation run

struct EvalConfig {
  int concurrency = 4;
  int max_retries = 3;
  int backoff_ms = 500;  // doubles after each failed attempt
  double abort_fraction = 0.5;
  std::string partial_report_path;  // written when the run aborts
};

class EvalAborted : public Error {
 public:
  EvalAborted(std::string msg, EvalReport r) : Error(std::move(msg)), report(std::move(r)) {}
  EvalReport report;
};

/// Candidates are generated in index order; judge requests run on a bounded
/// worker pool and are aggregated in index order afterwards.
inline EvalReport evaluate_set(const std::vector<ChatSample>& test_set, CandidateSource& candidates, ChatEndpoint& judge,
                               const Rubric& rubric, const EvalConfig& cfg = {}) {
  if (test_set.empty()) throw DataError("empty test set");
  if (cfg.concurrency < 1 || cfg.max_retries < 0) throw ConfigError("invalid evaluation settings");
  const std::size_t n = test_set.size();

  std::vector<SampleOutcome> outcomes(n);
  std::vector<std::optional<EvalFailure>> failure(n);
  for (std::size_t i = 0; i < n; ++i) {
    outcomes[i].index = i;
    outcomes[i].category = test_set[i].category;
    try {
      outcomes[i].candidate = candidates.respond(test_set[i], i);
    } catch (const TransportError& e) {
      failure[i] = EvalFailure{i, test_set[i].category, "transport", std::string("candidate: ") + e.what()};
    }
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      if (failure[i]) continue;
      const auto msgs = build_judge_request(test_set[i].input, outcomes[i].candidate, test_set[i].output, rubric);
      int backoff = cfg.backoff_ms;
      for (int attempt = 0;; ++attempt) {
        outcomes[i].attempts = attempt + 1;
        try {
          const std::string text = judge.complete(msgs, i);
          outcomes[i].verdict = parse_verdict(text);
        } catch (const TransportError& e) {
          if (attempt < cfg.max_retries) {
            if (backoff > 0) std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
            backoff *= 2;
            continue;
          }
          failure[i] = EvalFailure{i, test_set[i].category, "transport", e.what()};
        } catch (const DataError& e) {
          failure[i] = EvalFailure{i, test_set[i].category, "verdict", e.what()};
        }
        break;
      }
    }
  };
  const auto n_threads = static_cast<std::size_t>(std::min<std::size_t>(static_cast<std::size_t>(cfg.concurrency), n));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  EvalReport report;
  report.rubric_version = rubric.version;
  report.total = n;
  std::size_t transport = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (failure[i]) {
      transport += failure[i]->kind == "transport" ? 1 : 0;
      report.failures.push_back(*failure[i]);
    } else if (outcomes[i].verdict) {
      report.categories[outcomes[i].category].add(*outcomes[i].verdict);
      report.overall.add(*outcomes[i].verdict);
    }
    report.samples.push_back(std::move(outcomes[i]));
  }
  if (static_cast<double>(transport) > cfg.abort_fraction * static_cast<double>(n)) {
    report.aborted = true;
    if (!cfg.partial_report_path.empty()) write_file_atomic(cfg.partial_report_path, to_json(report).dump(2) + "\n");
    throw EvalAborted("evaluation aborted: " + std::to_string(transport) + " of " + std::to_string(n) +
                          " samples hit transport failures",
                      std::move(report));
  }
  return report;
}

}  // namespace tslam
