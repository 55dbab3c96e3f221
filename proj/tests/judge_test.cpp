#include <gtest/gtest.h>

#include <thread>

#include "tslam/judge.hpp"

using namespace tslam;

namespace {

const std::string kJudgeDir = std::string(TSLAM_FIXTURES) + "/judge/";
const std::string kRubric = std::string(TSLAM_SOURCE_DIR) + "/config/rubric.json";

std::string verdict_json(int a, int b, int c) {
  return R"({"instruction_following":)" + std::to_string(a) + R"(,"linguistic_quality":)" + std::to_string(b) +
         R"(,"technical_accuracy_relevance":)" + std::to_string(c) + R"(,"rationale":"ok"})";
}

std::vector<ChatSample> eval_set() { return read_samples_jsonl(kJudgeDir + "eval2x2.jsonl"); }

EvalConfig fast() {
  EvalConfig c;
  c.backoff_ms = 0;
  return c;
}

void expect_verdict_error(const std::string& text, const std::string& prefix) {
  try {
    parse_verdict(text);
    ADD_FAILURE() << "accepted: " << text;
  } catch (const VerdictError& e) {
    EXPECT_EQ(std::string(e.what()).rfind(prefix, 0), 0u) << e.what();
  }
}

}  // namespace

TEST(Rubric, LoadsAndRendersAllCriteria) {
  const auto r = load_rubric(kRubric);
  ASSERT_EQ(r.criteria.size(), 3u);
  const auto sys = render_system_prompt(r);
  for (auto c : kCriteria) EXPECT_NE(sys.find(c), std::string::npos) << c;
  EXPECT_NE(sys.find("from 0"), std::string::npos);
  EXPECT_NE(sys.find("to 10"), std::string::npos);
  EXPECT_EQ(sys.find('{' + std::string("criteria}")), std::string::npos);
}

TEST(Rubric, RejectsWrongShape) {
  auto j = nlohmann::json::parse(std::ifstream(kRubric));
  auto bad = j;
  bad["scale_max"] = 5;
  EXPECT_THROW(parse_rubric(bad), ConfigError);
  bad = j;
  std::swap(bad["criteria"][0], bad["criteria"][1]);
  EXPECT_THROW(parse_rubric(bad), ConfigError);
  bad = j;
  bad["extra"] = true;
  EXPECT_THROW(parse_rubric(bad), ConfigError);
}

TEST(JudgeRequest, DeterministicWithFencedBlocks) {
  const auto r = load_rubric(kRubric);
  const auto a = build_judge_request("What is BGP?", "A protocol.", "A path-vector protocol.", r);
  const auto b = build_judge_request("What is BGP?", "A protocol.", "A path-vector protocol.", r);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0].role, "system");
  EXPECT_EQ(a[1].role, "user");
  EXPECT_NE(a[1].content.find("### Prompt\n```text\nWhat is BGP?\n```"), std::string::npos);
  EXPECT_NE(a[1].content.find("### Candidate response\n```text\nA protocol.\n```"), std::string::npos);
  EXPECT_NE(a[1].content.find("### Reference response\n```text\nA path-vector protocol.\n```"), std::string::npos);
}

TEST(JudgeRequest, EmptyReferenceOmitsBlock) {
  const auto m = build_judge_request("p", "c", "", load_rubric(kRubric));
  EXPECT_EQ(m[1].content.find("Reference response"), std::string::npos);
  EXPECT_NE(m[1].content.find("No reference response"), std::string::npos);
}

TEST(JudgeRequest, FenceOutgrowsBackticksInContent) {
  const auto m = build_judge_request("p", "code: ````x````", "", load_rubric(kRubric));
  EXPECT_NE(m[1].content.find("`````text\ncode: ````x````\n`````"), std::string::npos);
}

TEST(Verdict, ParsesPlainObject) {
  const auto v = parse_verdict(
      R"({"instruction_following":8,"linguistic_quality":9,"technical_accuracy_relevance":7,"rationale":"ok"})");
  EXPECT_EQ(v.scores.at("instruction_following"), 8);
  EXPECT_EQ(v.scores.at("linguistic_quality"), 9);
  EXPECT_EQ(v.scores.at("technical_accuracy_relevance"), 7);
  EXPECT_EQ(v.rationale, "ok");
}

TEST(Verdict, ToleratesProsePrefixAndBraceNoise) {
  const std::string body = verdict_json(8, 9, 7);
  const auto v = parse_verdict("Thinking {not json} ... final: " + body + " trailing");
  EXPECT_EQ(v.scores.at("technical_accuracy_relevance"), 7);
  EXPECT_EQ(v.raw_response, "Thinking {not json} ... final: " + body + " trailing");
}

TEST(Verdict, Rejections) {
  expect_verdict_error("no json here", "unparseable verdict");
  expect_verdict_error("{\"a\": ", "unparseable verdict");
  expect_verdict_error(R"({"instruction_following":8,"linguistic_quality":9})", "incomplete verdict");
  expect_verdict_error(verdict_json(11, 5, 5), "out-of-range score");
  expect_verdict_error(verdict_json(5, -1, 5), "out-of-range score");
  expect_verdict_error(R"({"instruction_following":"8","linguistic_quality":9,"technical_accuracy_relevance":7})",
                       "unparseable verdict");
  expect_verdict_error(R"({"instruction_following":7.5,"linguistic_quality":9,"technical_accuracy_relevance":7})",
                       "unparseable verdict");
}

TEST(Verdict, RandomScoresRoundTripAndRange) {
  Rng rng(4);
  for (int i = 0; i < 300; ++i) {
    const int a = static_cast<int>(rng() % 15) - 2, b = static_cast<int>(rng() % 11), c = static_cast<int>(rng() % 11);
    const auto text = verdict_json(a, b, c);
    if (a < 0 || a > 10) {
      EXPECT_THROW(parse_verdict(text), VerdictError);
    } else {
      EXPECT_EQ(parse_verdict(text).scores.at("instruction_following"), a);
    }
  }
}

TEST(Evaluate, ConstantSevens) {
  auto judge = MockJudge::constant(verdict_json(7, 7, 7));
  ReferenceCandidate cand;
  const auto r = evaluate_set(eval_set(), cand, judge, load_rubric(kRubric), fast());
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(r.overall.mean(i), 7.0);
  for (const auto& [cat, s] : r.categories)
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(s.mean(i), 7.0);
}

TEST(Evaluate, TwoByTwoCategoryMeans) {
  MockJudge judge(kJudgeDir + "judge2x2.jsonl");
  ReferenceCandidate cand;
  const auto r = evaluate_set(eval_set(), cand, judge, load_rubric(kRubric), fast());
  ASSERT_EQ(r.categories.size(), 2u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r.categories.at("ip-routing-bgp").mean(i), 9.0);
    EXPECT_EQ(r.categories.at("mpls").mean(i), 5.0);
    EXPECT_EQ(r.overall.mean(i), 7.0);
  }
  EXPECT_TRUE(r.failures.empty());
  EXPECT_EQ(r.samples[1].attempts, 2);
}

TEST(Evaluate, ReportByteIdenticalAcrossRuns) {
  auto run = [] {
    MockJudge judge(kJudgeDir + "judge2x2.jsonl");
    ReferenceCandidate cand;
    const auto r = evaluate_set(eval_set(), cand, judge, load_rubric(kRubric), fast());
    return to_json(r).dump(2) + report_table(r);
  };
  const auto first = run();
  for (int i = 0; i < 5; ++i) EXPECT_EQ(run(), first);
}

TEST(Evaluate, BadVerdictsCountedNotAggregated) {
  MockJudge judge(kJudgeDir + "judge_bad.jsonl");
  ReferenceCandidate cand;
  const auto r = evaluate_set(eval_set(), cand, judge, load_rubric(kRubric), fast());
  EXPECT_EQ(r.evaluated(), 1u);
  ASSERT_EQ(r.failures.size(), 3u);
  EXPECT_EQ(r.failures[0].index, 0u);
  EXPECT_EQ(r.failures[0].message.rfind("out-of-range score", 0), 0u);
  EXPECT_EQ(r.failures[1].message, "unparseable verdict");
  EXPECT_EQ(r.failures[2].kind, "verdict");
  EXPECT_EQ(r.categories.at("mpls").count, 1u);
  EXPECT_EQ(r.categories.count("ip-routing-bgp"), 0u);
}

TEST(Evaluate, SingleUnparseableLeavesNMinusOne) {
  std::istringstream script(R"({"index":"*","responses":[")" + std::string("{\\\"instruction_following\\\":5,"
                                                                                "\\\"linguistic_quality\\\":5,"
                                                                                "\\\"technical_accuracy_relevance\\\":5}") +
                            R"("]})" "\n" R"({"index":2,"responses":["garbage"]})");
  MockJudge judge(script);
  ReferenceCandidate cand;
  const auto r = evaluate_set(eval_set(), cand, judge, load_rubric(kRubric), fast());
  EXPECT_EQ(r.evaluated(), 3u);
  ASSERT_EQ(r.failures.size(), 1u);
  EXPECT_EQ(r.failures[0].index, 2u);
}

TEST(Evaluate, RetriesAreBounded) {
  std::istringstream script(R"({"index":"*","responses":[{"transport_error":"x"},{"transport_error":"y"},)"
                            R"({"transport_error":"z"},{"transport_error":"w"},"{}"]})");
  MockJudge judge(script);
  ReferenceCandidate cand;
  std::vector<ChatSample> one = {eval_set()[0]};
  EvalConfig cfg = fast();
  cfg.abort_fraction = 1.0;
  const auto r = evaluate_set(one, cand, judge, load_rubric(kRubric), cfg);
  ASSERT_EQ(r.failures.size(), 1u);
  EXPECT_EQ(r.failures[0].kind, "transport");
  EXPECT_EQ(r.failures[0].message, "w");
  EXPECT_EQ(r.samples[0].attempts, 4);
}

TEST(Evaluate, MajorityTransportFailureAborts) {
  MockJudge judge(kJudgeDir + "judge_down.jsonl");
  ReferenceCandidate cand;
  EvalConfig cfg = fast();
  cfg.partial_report_path = (std::filesystem::temp_directory_path() / "tslam_partial_report.json").string();
  std::filesystem::remove(cfg.partial_report_path);
  try {
    evaluate_set(eval_set(), cand, judge, load_rubric(kRubric), cfg);
    FAIL();
  } catch (const EvalAborted& e) {
    EXPECT_TRUE(e.report.aborted);
    EXPECT_EQ(e.report.evaluated(), 1u);
    EXPECT_EQ(e.report.failures.size(), 3u);
  }
  const auto saved = nlohmann::json::parse(std::ifstream(cfg.partial_report_path));
  EXPECT_TRUE(saved["aborted"].get<bool>());
  std::filesystem::remove(cfg.partial_report_path);
}

TEST(Evaluate, OverallIsWeightedMeanOfCategories) {
  Rng rng(12);
  std::vector<ChatSample> set;
  std::string script;
  for (std::size_t i = 0; i < 40; ++i) {
    set.push_back({"q" + std::to_string(i), "a", "cat" + std::to_string(rng() % 5), std::nullopt});
    nlohmann::json line = {{"index", i},
                           {"responses", {verdict_json(int(rng() % 11), int(rng() % 11), int(rng() % 11))}}};
    script += line.dump() + "\n";
  }
  std::istringstream in(script);
  MockJudge judge(in);
  ReferenceCandidate cand;
  const auto r = evaluate_set(set, cand, judge, load_rubric(kRubric), fast());
  std::size_t count = 0;
  for (const auto& [cat, s] : r.categories) count += s.count;
  EXPECT_EQ(count, r.evaluated());
  for (std::size_t c = 0; c < 3; ++c) {
    long long weighted = 0;
    for (const auto& [cat, s] : r.categories) weighted += s.sums[c];
    EXPECT_EQ(r.overall.sums[c], weighted);
    EXPECT_EQ(r.overall.mean(c), static_cast<double>(weighted) / static_cast<double>(count));
    EXPECT_GE(r.overall.mean(c), 0.0);
    EXPECT_LE(r.overall.mean(c), 10.0);
  }
}

TEST(Evaluate, ReportJsonRoundTrip) {
  MockJudge judge(kJudgeDir + "judge_bad.jsonl");
  ReferenceCandidate cand;
  const auto r = evaluate_set(eval_set(), cand, judge, load_rubric(kRubric), fast());
  const auto back = report_from_json(nlohmann::json::parse(to_json(r).dump()));
  EXPECT_EQ(report_table(back), report_table(r));
}

TEST(Evaluate, ModelCandidateIsDeterministic) {
  ModelConfig mc;
  mc.max_seq = 160;
  auto m = build_model<float>(mc);
  m.attach_adapters(LoraConfig{}, 1);
  GenerationConfig g;
  g.max_new = 8;
  g.seed = 3;
  ModelCandidate<float> a(m, g), b(m, g);
  const auto s = eval_set()[0];
  EXPECT_EQ(a.respond(s, 0), b.respond(s, 0));
}

TEST(HttpJudge, SpeaksChatCompletions) {
  httplib::Server svr;
  nlohmann::json seen;
  std::string auth;
  svr.Post("/api/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen = nlohmann::json::parse(req.body);
    auth = req.get_header_value("Authorization");
    nlohmann::json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", verdict_json(9, 8, 7)}}}}}}};
    res.set_content(reply.dump(), "application/json");
  });
  const int port = svr.bind_to_any_port("127.0.0.1");
  std::thread t([&] { svr.listen_after_bind(); });
  svr.wait_until_ready();
  ::setenv("TSLAM_TEST_JUDGE_KEY", "sekret", 1);
  HttpEndpointConfig cfg;
  cfg.url = "http://127.0.0.1:" + std::to_string(port) + "/api";
  cfg.model = "qwen-judge";
  cfg.api_key_env = "TSLAM_TEST_JUDGE_KEY";
  HttpChatEndpoint ep(cfg);
  const auto msgs = build_judge_request("p", "c", "r", load_rubric(kRubric));
  const auto text = ep.complete(msgs, 0);
  svr.stop();
  t.join();
  EXPECT_EQ(parse_verdict(text).scores.at("linguistic_quality"), 8);
  EXPECT_EQ(seen["model"], "qwen-judge");
  EXPECT_EQ(seen["temperature"], 0.0);
  EXPECT_EQ(seen["messages"].size(), 2u);
  EXPECT_EQ(seen["messages"][1]["content"], msgs[1].content);
  EXPECT_EQ(auth, "Bearer sekret");
}

TEST(HttpJudge, UnreachableIsTransportError) {
  HttpEndpointConfig cfg;
  cfg.url = "http://127.0.0.1:1";
  cfg.timeout_s = 2;
  HttpChatEndpoint ep(cfg);
  EXPECT_THROW(ep.complete({{"user", "x"}}, 0), TransportError);
}
