#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <thread>

#include "tslam/fetch.hpp"

using namespace tslam;
namespace fs = std::filesystem;

namespace {

class LocalServer {
 public:
  LocalServer() {
    svr_.Get(R"(/rfc/rfc(\d+)\.txt)", [this](const httplib::Request& req, httplib::Response& res) {
      last_path = req.path;
      user_agent = req.get_header_value("User-Agent");
      ++hits;
      const int n = std::stoi(req.matches[1]);
      if (n == 791) {
        res.set_content("1.  INTRODUCTION\n\n   Text.\n", "text/plain");
      } else if (n == 5) {
        res.set_content("<!DOCTYPE html><html></html>", "text/html");
      } else {
        res.status = 404;
      }
    });
    port_ = svr_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { svr_.listen_after_bind(); });
    svr_.wait_until_ready();
  }
  ~LocalServer() {
    svr_.stop();
    thread_.join();
  }
  std::string base() const { return "http://127.0.0.1:" + std::to_string(port_) + "/rfc"; }

  std::string last_path, user_agent;
  std::atomic<int> hits{0};

 private:
  httplib::Server svr_;
  int port_ = 0;
  std::thread thread_;
};

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("tslam_fetch_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Fetch, RequestPathPattern) {
  EXPECT_EQ(rfc_request_path("https://www.rfc-editor.org/rfc/", 791), "/rfc/rfc791.txt");
  EXPECT_EQ(rfc_request_path("http://host:8080", 791), "/rfc791.txt");
  EXPECT_THROW(parse_base_url("nohost"), ConfigError);
}

TEST(Fetch, DownloadsAndCaches) {
  LocalServer server;
  const auto cache = scratch("cache");
  SourceConfig cfg;
  cfg.base_url = server.base();
  cfg.cache_dir = cache.string();
  cfg.delay_ms = 0;
  RfcFetcher f(cfg);
  const auto r = f.fetch(791);
  EXPECT_TRUE(r.from_network);
  EXPECT_EQ(server.last_path, "/rfc/rfc791.txt");
  EXPECT_EQ(server.user_agent, cfg.user_agent);
  EXPECT_EQ(read_file(cache / "rfc791.txt"), r.text);
  const auto again = f.fetch(791);
  EXPECT_FALSE(again.from_network);
  EXPECT_EQ(server.hits.load(), 1);
  cfg.refetch = true;
  RfcFetcher g(cfg);
  EXPECT_TRUE(g.fetch(791).from_network);
  EXPECT_EQ(server.hits.load(), 2);
  fs::remove_all(cache);
}

TEST(Fetch, NotFoundWritesNothing) {
  LocalServer server;
  const auto cache = scratch("404");
  SourceConfig cfg;
  cfg.base_url = server.base();
  cfg.cache_dir = cache.string();
  cfg.delay_ms = 0;
  try {
    fetch_rfc(404, cfg);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_STREQ(e.what(), "fetch failed (404)");
  }
  EXPECT_TRUE(fs::is_empty(cache));
  fs::remove_all(cache);
}

TEST(Fetch, HtmlRejected) {
  LocalServer server;
  SourceConfig cfg;
  cfg.base_url = server.base();
  cfg.delay_ms = 0;
  try {
    fetch_rfc(5, cfg);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_STREQ(e.what(), "unexpected content type");
  }
}

TEST(Fetch, MirrorReturnsIdenticalBytes) {
  const auto mirror = fs::path(TSLAM_FIXTURES) / "rfc";
  SourceConfig cfg;
  cfg.mirror_dir = mirror.string();
  cfg.offline = true;
  EXPECT_EQ(fetch_rfc(791, cfg), read_file(mirror / "rfc791.txt"));
}

TEST(Fetch, OfflineColdCacheFails) {
  const auto cache = scratch("cold");
  SourceConfig cfg;
  cfg.base_url = "http://127.0.0.1:1/rfc";
  cfg.cache_dir = cache.string();
  cfg.offline = true;
  EXPECT_THROW(fetch_rfc(791, cfg), DataError);
  EXPECT_THROW(fetch_rfc(0, cfg), ConfigError);
  fs::remove_all(cache);
}

TEST(Fetch, InterRequestDelayHonored) {
  LocalServer server;
  SourceConfig cfg;
  cfg.base_url = server.base();
  cfg.delay_ms = 200;
  RfcFetcher f(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  f.fetch(791);
  f.fetch(791);
  EXPECT_GE(std::chrono::steady_clock::now() - t0, std::chrono::milliseconds(200));
}
