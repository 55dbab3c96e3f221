#pragma once

// Retrieval of plain-text RFCs from `{base_url}/rfc{N}.txt`, a local mirror
// directory, or the on-disk cache (keyed by RFC number).

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>

// Eigen must precede httplib: <resolv.h> defines a `_res` macro.
#include "tslam/error.hpp"
#include "tslam/tensor.hpp"

#include <httplib.h>

namespace tslam {

struct SourceConfig {
  std::string base_url = "https://www.rfc-editor.org/rfc";
  std::string mirror_dir;  // checked first when set
  std::string cache_dir;   // empty disables caching
  int delay_ms = 500;      // minimum spacing between network requests
  std::string user_agent = "tslam-ingest/1.0";
  int timeout_s = 30;
  bool offline = false;
  bool refetch = false;  // bypass the cache
};

struct ParsedUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;    // without trailing slash
};

inline ParsedUrl parse_base_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("base URL needs a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  ParsedUrl p;
  p.origin = url.substr(0, path_start);
  p.path = path_start == std::string::npos ? std::string() : url.substr(path_start);
  while (!p.path.empty() && p.path.back() == '/') p.path.pop_back();
  return p;
}

inline std::string rfc_request_path(const std::string& base_url, int number) {
  return parse_base_url(base_url).path + "/rfc" + std::to_string(number) + ".txt";
}

/// Rejects HTML or binary payloads where plain text is expected.
inline bool looks_like_plain_text(const std::string& body, const std::string& content_type) {
  if (content_type.find("text/html") != std::string::npos) return false;
  if (!content_type.empty() && content_type.find("text/") == std::string::npos) return false;
  if (body.find('\0') != std::string::npos) return false;
  const auto first = body.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && body.compare(first, 1, "<") == 0) {
    const std::string head = body.substr(first, 15);
    if (head.rfind("<!DOCTYPE", 0) == 0 || head.rfind("<html", 0) == 0 || head.rfind("<HTML", 0) == 0) return false;
  }
  return true;
}

inline std::optional<std::string> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return std::nullopt;
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Writes via a temporary file and rename so readers never see partial files.
inline void write_file_atomic(const std::filesystem::path& p, const std::string& data) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  auto tmp = p;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw Error("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, p);
}

struct FetchResult {
  std::string text;
  std::string source;  // URL or file path the bytes came from
  bool from_network = false;
};

class RfcFetcher {
 public:
  explicit RfcFetcher(SourceConfig cfg) : cfg_(std::move(cfg)) {}

  FetchResult fetch(int number) {
    if (number <= 0) throw ConfigError("RFC number must be positive");
    const std::string file = "rfc" + std::to_string(number) + ".txt";
    if (!cfg_.mirror_dir.empty()) {
      const auto p = std::filesystem::path(cfg_.mirror_dir) / file;
      if (auto data = read_file(p)) return {validate(std::move(*data), ""), p.string(), false};
    }
    if (!cfg_.cache_dir.empty() && !cfg_.refetch) {
      const auto p = std::filesystem::path(cfg_.cache_dir) / file;
      if (auto data = read_file(p)) return {std::move(*data), p.string(), false};
    }
    if (cfg_.offline) throw DataError("offline and rfc" + std::to_string(number) + " is not cached");

    const auto url = parse_base_url(cfg_.base_url);
    const std::string path = url.path + "/" + file;
    throttle();
    httplib::Client cli(url.origin);
    cli.set_connection_timeout(cfg_.timeout_s, 0);
    cli.set_read_timeout(cfg_.timeout_s, 0);
    cli.set_follow_location(true);
    auto res = cli.Get(path, {{"User-Agent", cfg_.user_agent}});
    if (!res) throw TransportError("fetch failed (" + httplib::to_string(res.error()) + ")");
    if (res->status != 200) throw DataError("fetch failed (" + std::to_string(res->status) + ")");
    std::string text = validate(std::move(res->body), res->get_header_value("Content-Type"));
    if (!cfg_.cache_dir.empty()) write_file_atomic(std::filesystem::path(cfg_.cache_dir) / file, text);
    return {std::move(text), url.origin + path, true};
  }

 private:
  static std::string validate(std::string body, const std::string& content_type) {
    if (!looks_like_plain_text(body, content_type)) throw DataError("unexpected content type");
    if (body.find_first_not_of(" \t\r\n\f") == std::string::npos) throw DataError("empty document");
    return body;
  }

  void throttle() {
    std::lock_guard lock(mu_);
    if (last_request_) {
      const auto next = *last_request_ + std::chrono::milliseconds(cfg_.delay_ms);
      std::this_thread::sleep_until(next);
    }
    last_request_ = std::chrono::steady_clock::now();
  }

  SourceConfig cfg_;
  std::mutex mu_;
  std::optional<std::chrono::steady_clock::time_point> last_request_;
};

inline std::string fetch_rfc(int number, const SourceConfig& source) {
  RfcFetcher f(source);
  return f.fetch(number).text;
}

}  // namespace tslam
