#pragma once

// Instruction-data pipeline: RFC plain-text parsing, keyword categorization
// into the 20 telecom use-cases, rule-templated sample synthesis, the chat
// template, JSONL storage and a stratified train/test split.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "tslam/error.hpp"
#include "tslam/tensor.hpp"
#include "tslam/tokenizer.hpp"

namespace tslam {

// ---------------------------------------------------------------------------
// Chat template

inline constexpr std::string_view kSystemPrompt = "You are a helpful telecom expert assistant.";
inline constexpr std::string_view kEndMarker = "<|end|>";

struct ChatSample {
  std::string input;
  std::string output;
  std::string category;
  std::optional<std::string> text;

  bool operator==(const ChatSample&) const = default;
};

/// Everything up to and including "<|assistant|>\n".
inline std::string chat_prompt_prefix(std::string_view input) {
  std::string s;
  s.reserve(input.size() + 96);
  s += "<|system|>\n";
  s += kSystemPrompt;
  s += "<|end|>\n<|user|>\n";
  s += input;
  s += "<|end|>\n<|assistant|>\n";
  return s;
}

/// system + user + assistant messages followed by the EOS string. Contents are
/// inserted verbatim; nothing is escaped.
inline std::string apply_chat_template(const ChatSample& sample, std::string_view eos_token = kEosToken) {
  std::string s = chat_prompt_prefix(sample.input);
  s += sample.output;
  s += "<|end|>\n";
  s += eos_token;
  return s;
}

inline std::size_t count_occurrences(std::string_view hay, std::string_view needle) {
  if (needle.empty()) return 0;
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string_view::npos; pos = hay.find(needle, pos + needle.size())) ++n;
  return n;
}

/// True when `text` has exactly three end markers, the three role headers in
/// order, and ends with "<|end|>\n" + eos.
inline bool template_invariant_holds(std::string_view text, std::string_view eos_token = kEosToken) {
  if (count_occurrences(text, kEndMarker) != 3) return false;
  const std::string tail = std::string("<|end|>\n") + std::string(eos_token);
  if (text.size() < tail.size() || text.substr(text.size() - tail.size()) != tail) return false;
  const auto sys = text.find("<|system|>\n");
  const auto usr = text.find("<|end|>\n<|user|>\n");
  const auto ast = text.find("<|end|>\n<|assistant|>\n");
  return sys == 0 && usr != std::string_view::npos && ast != std::string_view::npos && usr < ast;
}

/// Tokenized training sequence. Targets are the assistant content and the
/// final EOS; the prompt and the closing "<|end|>\n" are not.
inline EncodedSequence encode_sample(const ChatSample& sample) {
  EncodedSequence e;
  auto append = [&e](const std::vector<int>& ids, bool target) {
    e.ids.insert(e.ids.end(), ids.begin(), ids.end());
    e.mask.insert(e.mask.end(), ids.size(), static_cast<std::uint8_t>(target));
  };
  append(tokenize(chat_prompt_prefix(sample.input)), false);
  append(tokenize(sample.output), true);
  append(tokenize("<|end|>\n"), false);
  append({kEosId}, true);
  if (!e.mask.empty()) e.mask[0] = 0;
  return e;
}

// ---------------------------------------------------------------------------
// Taxonomy and prompt rules

struct UseCaseCategory {
  std::string id;
  std::string display_name;
  std::vector<std::string> keywords;
};

struct PromptRule {
  std::string id;
  std::string instruction;  // placeholders: {heading_text} {heading_number} {number} {title} {category}
};

struct RulesConfig {
  std::string version;
  std::vector<UseCaseCategory> categories;
  std::vector<PromptRule> rules;
  std::size_t max_output_chars = 0;  // 0 = unlimited

  const UseCaseCategory* find(std::string_view id) const {
    for (const auto& c : categories)
      if (c.id == id) return &c;
    return nullptr;
  }
};

inline constexpr std::size_t kTaxonomySize = 20;

inline RulesConfig parse_rules_config(const nlohmann::json& j) {
  static const std::set<std::string> allowed = {"version", "categories", "rules", "max_output_chars"};
  if (!j.is_object()) throw ConfigError("rules config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in rules config");
  RulesConfig rc;
  rc.version = j.value("version", std::string());
  rc.max_output_chars = j.value("max_output_chars", std::size_t{0});
  for (const auto& c : j.at("categories")) {
    UseCaseCategory cat;
    cat.id = c.at("id").get<std::string>();
    cat.display_name = c.at("display_name").get<std::string>();
    for (const auto& kw : c.at("keywords")) {
      std::string k = kw.get<std::string>();
      std::transform(k.begin(), k.end(), k.begin(), [](unsigned char ch) { return std::tolower(ch); });
      cat.keywords.push_back(std::move(k));
    }
    rc.categories.push_back(std::move(cat));
  }
  for (const auto& r : j.at("rules")) rc.rules.push_back({r.at("id").get<std::string>(), r.at("instruction").get<std::string>()});
  if (rc.categories.size() != kTaxonomySize)
    throw ConfigError("taxonomy must contain exactly 20 categories, found " + std::to_string(rc.categories.size()));
  std::set<std::string> ids;
  for (const auto& c : rc.categories)
    if (!ids.insert(c.id).second) throw ConfigError("duplicate category id '" + c.id + "'");
  return rc;
}

inline RulesConfig load_rules_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open rules config: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("rules config " + path + ": " + e.what());
  }
  return parse_rules_config(j);
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return out;
}

/// Occurrences of `keyword` in `lowered` bounded by non-alphanumerics.
inline std::size_t count_keyword(std::string_view lowered, std::string_view keyword) {
  if (keyword.empty()) return 0;
  auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  std::size_t n = 0;
  for (auto pos = lowered.find(keyword); pos != std::string_view::npos; pos = lowered.find(keyword, pos + 1)) {
    const bool left_ok = pos == 0 || !is_word(lowered[pos - 1]) || !is_word(keyword.front());
    const std::size_t end = pos + keyword.size();
    const bool right_ok = end == lowered.size() || !is_word(lowered[end]) || !is_word(keyword.back());
    if (left_ok && right_ok) ++n;
  }
  return n;
}

// ---------------------------------------------------------------------------
// RFC documents

struct RfcSection {
  std::string heading_number;
  std::string heading_text;
  std::string body;

  bool operator==(const RfcSection&) const = default;
};

struct RfcDocument {
  int number = 0;
  std::string title;
  std::vector<RfcSection> sections;
  std::string source_url;
  std::string fetched_at;
};

/// Category with the most keyword hits in heading + body. Ties go to the
/// lexicographically smallest slug; no hits yields nullopt.
inline std::optional<std::string> categorize(const RfcSection& section, const std::vector<UseCaseCategory>& taxonomy) {
  const std::string text = to_lower(section.heading_text + "\n" + section.body);
  std::optional<std::string> best;
  std::size_t best_hits = 0;
  for (const auto& cat : taxonomy) {
    std::size_t hits = 0;
    for (const auto& kw : cat.keywords) hits += count_keyword(text, kw);
    if (hits == 0) continue;
    if (hits > best_hits || (hits == best_hits && best && cat.id < *best)) {
      best = cat.id;
      best_hits = hits;
    }
  }
  return best;
}

class UnstructuredDocument : public DataError {
 public:
  explicit UnstructuredDocument(std::string raw_text)
      : DataError("unstructured document"), raw(std::move(raw_text)) {}
  std::string raw;
};

namespace detail {

inline std::string rtrim(std::string_view s) {
  auto end = s.find_last_not_of(" \t");
  return end == std::string_view::npos ? std::string() : std::string(s.substr(0, end + 1));
}

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

inline bool is_blank(std::string_view s) { return s.find_first_not_of(" \t") == std::string_view::npos; }

inline std::size_t indent_of(std::string_view s) {
  auto p = s.find_first_not_of(' ');
  return p == std::string_view::npos ? s.size() : p;
}

inline const std::regex& footer_regex() {
  static const std::regex re(R"(\[Page\s+\d+\]\s*$)");
  return re;
}

inline const std::regex& running_header_regex() {
  static const std::regex re(R"(^RFC\s+\d+\s{2,}.*\S\s*$)");
  return re;
}

inline const std::regex& heading_regex() {
  static const std::regex re(R"(^(\d{1,2}(?:\.\d{1,3})*)\.?\s+([A-Za-z].*)$)");
  return re;
}

inline const std::regex& dot_leader_regex() {
  static const std::regex re(R"((\.\s?){4,}\s*\d+\s*$)");
  return re;
}

// Figures, tables and code keep their line structure.
inline bool is_preformatted(const std::vector<std::string>& lines) {
  static const std::regex inner_gap(R"(\S\s{3,}\S)");
  for (const auto& l : lines) {
    if (l.find('|') != std::string::npos || l.find("+-") != std::string::npos || l.find("-+") != std::string::npos)
      return true;
    if (std::regex_search(trim(l), inner_gap)) return true;
  }
  return false;
}

inline std::string assemble_paragraph(const std::vector<std::string>& lines) {
  if (is_preformatted(lines)) {
    std::size_t common = std::string::npos;
    for (const auto& l : lines)
      if (!is_blank(l)) common = std::min(common, indent_of(l));
    std::string out;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (i) out += '\n';
      out += rtrim(lines[i].size() > common ? std::string_view(lines[i]).substr(common) : std::string_view());
    }
    return out;
  }
  std::string out;
  for (const auto& l : lines) {
    const std::string t = trim(l);
    if (t.empty()) continue;
    // "host-\nto-host" rejoins without a space.
    const bool hyphen_break = out.size() >= 2 && out.back() == '-' && std::isalpha(static_cast<unsigned char>(out[out.size() - 2]));
    if (!out.empty() && !hyphen_break) out += ' ';
    out += t;
  }
  return out;
}

inline bool ends_sentence(std::string_view s) {
  const std::string t = rtrim(s);
  if (t.empty()) return true;
  const char c = t.back();
  return c == '.' || c == ':' || c == ';' || c == '!' || c == '?';
}

// Page breaks are represented in the line stream by this sentinel.
inline constexpr std::string_view kPageBreak = "\f";

inline std::string assemble_body(const std::vector<std::string>& raw_lines) {
  // Resolve page breaks: drop surrounding blank lines and continue the
  // paragraph unless the text before the break ended a sentence.
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < raw_lines.size(); ++i) {
    if (raw_lines[i] != kPageBreak) {
      lines.push_back(raw_lines[i]);
      continue;
    }
    while (!lines.empty() && is_blank(lines.back())) lines.pop_back();
    std::size_t j = i + 1;
    while (j < raw_lines.size() && (is_blank(raw_lines[j]) || raw_lines[j] == kPageBreak)) ++j;
    const bool join = !lines.empty() && !ends_sentence(lines.back()) && j < raw_lines.size();
    if (!join && !lines.empty()) lines.emplace_back();
    i = j - 1;
  }

  std::vector<std::string> paragraphs;
  std::vector<std::string> current;
  auto flush = [&] {
    if (!current.empty()) paragraphs.push_back(assemble_paragraph(current));
    current.clear();
  };
  for (const auto& l : lines) {
    if (is_blank(l)) {
      flush();
    } else {
      current.push_back(l);
    }
  }
  flush();
  std::string body;
  for (const auto& p : paragraphs) {
    if (p.empty()) continue;
    if (!body.empty()) body += "\n\n";
    body += p;
  }
  return body;
}

}  // namespace detail

/// Parses a plain-text RFC into numbered sections. Page headers/footers and
/// form feeds are removed and paragraphs are reflowed onto single lines.
inline RfcDocument parse_rfc(std::string_view raw, int number_hint = 0) {
  using namespace detail;
  std::string text(raw);
  text.erase(std::remove(text.begin(), text.end(), '\r'), text.end());

  // Split into lines, recording which page each belongs to.
  struct Line {
    std::string s;
    int page;
    bool page_top = false;
  };
  std::vector<Line> lines;
  {
    int page = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
      auto nl = text.find('\n', start);
      std::string l = text.substr(start, nl == std::string::npos ? std::string::npos : nl - start);
      if (auto ff = l.find('\f'); ff != std::string::npos) {
        lines.push_back({std::string(kPageBreak), page});
        ++page;
        l.erase(std::remove(l.begin(), l.end(), '\f'), l.end());
      }
      lines.push_back({rtrim(l), page});
      if (nl == std::string::npos) break;
      start = nl + 1;
    }
  }

  // Running headers: lines repeated among the first three non-blank lines of pages.
  std::map<std::string, int> top_counts;
  {
    int page = -1, seen = 0;
    for (auto& l : lines) {
      if (l.s == kPageBreak) {
        page = l.page + 1;
        seen = 0;
        continue;
      }
      if (page < 1 || l.page != page || is_blank(l.s) || seen >= 3) continue;
      l.page_top = true;
      ++seen;
      ++top_counts[trim(l.s)];
    }
  }

  int number = number_hint;
  std::string title;
  bool in_front = true;
  bool seen_blank = false;
  std::vector<RfcSection> sections;
  std::vector<std::string> body_lines;
  bool in_section = false;
  static const std::regex number_re(R"((?:Request for Comments|RFC):?\s*(\d+))");

  auto close_section = [&] {
    if (in_section) sections.back().body = assemble_body(body_lines);
    body_lines.clear();
  };

  for (const auto& l : lines) {
    if (l.s == kPageBreak) {
      if (in_section) body_lines.emplace_back(kPageBreak);
      continue;
    }
    if (std::regex_search(l.s, footer_regex())) continue;
    if (std::regex_match(l.s, running_header_regex()) && l.s.find("Request for Comments") == std::string::npos &&
        !(in_front && number == 0))
      continue;
    if (l.page_top && top_counts[trim(l.s)] >= 2) continue;

    std::smatch m;
    const bool col0 = !l.s.empty() && l.s[0] != ' ' && l.s[0] != '\t';
    if (col0 && std::regex_match(l.s, m, heading_regex()) && l.s.size() <= 80 &&
        !std::regex_search(l.s, dot_leader_regex())) {
      close_section();
      sections.push_back({m[1].str(), trim(m[2].str()), {}});
      in_section = true;
      in_front = false;
      continue;
    }
    if (in_front) {
      std::smatch nm;
      if (number == 0 && std::regex_search(l.s, nm, number_re)) number = std::stoi(nm[1].str());
      if (is_blank(l.s)) {
        seen_blank = true;
      } else if (title.empty() && seen_blank && indent_of(l.s) >= 5) {
        title = trim(l.s);
      }
      continue;
    }
    if (col0) {
      // Unnumbered column-0 line (e.g. "REFERENCES"): ends the current section.
      close_section();
      in_section = false;
      continue;
    }
    if (in_section) body_lines.push_back(l.s);
  }
  close_section();

  if (sections.empty()) throw UnstructuredDocument(std::string(raw));
  RfcDocument doc;
  doc.number = number;
  doc.title = title;
  doc.sections = std::move(sections);
  return doc;
}

/// Reconstitutes a plain-text rendering (headings at column 0, bodies
/// indented by three spaces). Parsing the result yields the same sections.
inline std::string render_rfc(const RfcDocument& doc) {
  std::ostringstream os;
  os << "Request for Comments: " << doc.number << "\n\n";
  if (!doc.title.empty()) os << "          " << doc.title << "\n\n";
  for (const auto& s : doc.sections) {
    os << s.heading_number << ".  " << s.heading_text << "\n\n";
    std::size_t start = 0;
    while (start <= s.body.size() && !s.body.empty()) {
      auto nl = s.body.find('\n', start);
      std::string_view l = std::string_view(s.body).substr(start, nl == std::string::npos ? std::string::npos : nl - start);
      if (l.empty()) {
        os << '\n';
      } else {
        os << "   " << l << '\n';
      }
      if (nl == std::string::npos) break;
      start = nl + 1;
    }
    os << '\n';
  }
  return os.str();
}

inline nlohmann::ordered_json to_json(const RfcDocument& doc) {
  nlohmann::ordered_json j;
  j["number"] = doc.number;
  j["title"] = doc.title;
  j["source_url"] = doc.source_url;
  j["fetched_at"] = doc.fetched_at;
  j["sections"] = nlohmann::ordered_json::array();
  for (const auto& s : doc.sections)
    j["sections"].push_back({{"heading_number", s.heading_number}, {"heading_text", s.heading_text}, {"body", s.body}});
  return j;
}

// ---------------------------------------------------------------------------
// Samples

inline std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
    s.replace(pos, from.size(), to);
  return s;
}

/// One sample per (categorized section, rule), in section then rule order.
/// The section body becomes the response.
inline std::vector<ChatSample> build_samples(const RfcDocument& doc, const RulesConfig& rules) {
  std::vector<ChatSample> out;
  for (const auto& sec : doc.sections) {
    if (detail::is_blank(sec.body)) continue;
    const auto cat = categorize(sec, rules.categories);
    if (!cat) continue;
    std::string body = sec.body;
    if (rules.max_output_chars > 0 && body.size() > rules.max_output_chars) {
      body.resize(rules.max_output_chars);
      if (auto cut = body.find_last_of(" \n"); cut != std::string::npos && cut > rules.max_output_chars / 2)
        body.resize(cut);
    }
    const auto* c = rules.find(*cat);
    for (const auto& rule : rules.rules) {
      std::string inst = rule.instruction;
      inst = replace_all(inst, "{heading_text}", sec.heading_text);
      inst = replace_all(inst, "{heading_number}", sec.heading_number);
      inst = replace_all(inst, "{number}", std::to_string(doc.number));
      inst = replace_all(inst, "{title}", doc.title);
      inst = replace_all(inst, "{category}", c ? c->display_name : *cat);
      out.push_back({std::move(inst), body, *cat, std::nullopt});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

/// Validates one JSONL object; `line_no` is used in error messages.
inline ChatSample sample_from_json(const nlohmann::json& j, std::size_t line_no, const RulesConfig* taxonomy = nullptr) {
  auto fail = [line_no](const std::string& what) {
    return DataError("line " + std::to_string(line_no) + ": " + what);
  };
  if (!j.is_object()) throw fail("expected a JSON object");
  for (const auto& [k, v] : j.items())
    if (k != "input" && k != "output" && k != "category" && k != "text") throw fail("unknown field '" + k + "'");
  ChatSample s;
  for (const char* key : {"input", "output", "category"}) {
    if (!j.contains(key) || !j[key].is_string()) throw fail(std::string("missing string field '") + key + "'");
    if (j[key].get_ref<const std::string&>().empty()) throw fail(std::string("empty field '") + key + "'");
  }
  s.input = j["input"].get<std::string>();
  s.output = j["output"].get<std::string>();
  s.category = j["category"].get<std::string>();
  if (j.contains("text")) {
    if (!j["text"].is_string()) throw fail("field 'text' must be a string");
    s.text = j["text"].get<std::string>();
  }
  if (taxonomy && !taxonomy->find(s.category)) throw fail("unknown category '" + s.category + "'");
  return s;
}

inline std::vector<ChatSample> read_samples_jsonl(std::istream& in, const RulesConfig* taxonomy = nullptr) {
  std::vector<ChatSample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::is_blank(line)) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("line " + std::to_string(line_no) + ": invalid JSON (" + e.what() + ")");
    }
    out.push_back(sample_from_json(j, line_no, taxonomy));
  }
  return out;
}

inline std::vector<ChatSample> read_samples_jsonl(const std::string& path, const RulesConfig* taxonomy = nullptr) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return read_samples_jsonl(in, taxonomy);
}

inline std::string sample_to_jsonl(const ChatSample& s, bool with_text) {
  nlohmann::ordered_json j;
  j["input"] = s.input;
  j["output"] = s.output;
  j["category"] = s.category;
  if (with_text && s.text) j["text"] = *s.text;
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

inline void write_samples_jsonl(std::ostream& out, const std::vector<ChatSample>& samples, bool with_text) {
  for (const auto& s : samples) out << sample_to_jsonl(s, with_text) << '\n';
}

// ---------------------------------------------------------------------------
// Stratified split

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct DatasetSplit {
  std::vector<ChatSample> train;
  std::vector<ChatSample> test;
};

/// Per category: seeded shuffle, floor(n * test_frac) samples to test.
/// Both halves keep the input order.
inline DatasetSplit split_stratified(const std::vector<ChatSample>& samples, double test_frac, std::uint64_t seed) {
  if (!(test_frac > 0.0 && test_frac < 1.0)) throw ConfigError("test_frac must lie in (0, 1)");
  if (samples.empty()) throw DataError("empty dataset");
  std::map<std::string, std::vector<std::size_t>> by_cat;
  for (std::size_t i = 0; i < samples.size(); ++i) by_cat[samples[i].category].push_back(i);

  std::vector<std::uint8_t> is_test(samples.size(), 0);
  for (auto& [cat, idx] : by_cat) {
    const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(idx.size()) * test_frac));
    if (idx.size() < 2 || n_test == 0) continue;
    Rng rng(mix_seed(seed, fnv1a(cat)));
    for (std::size_t i = idx.size(); i > 1; --i) {
      auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
      std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
    }
    for (std::size_t k = 0; k < n_test; ++k) is_test[idx[k]] = 1;
  }
  DatasetSplit split;
  for (std::size_t i = 0; i < samples.size(); ++i) (is_test[i] ? split.test : split.train).push_back(samples[i]);
  return split;
}

}  // namespace tslam
