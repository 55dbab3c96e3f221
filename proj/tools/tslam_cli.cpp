#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "tslam/tslam.hpp"

namespace fs = std::filesystem;
using namespace tslam;

namespace {

struct Options {
  std::string config = "config/pipeline.json";
  // ingest
  std::string rfc_list, out, mirror;
  bool offline = false, refetch = false;
  // prepare
  std::string in;
  double test_frac = -1;
  long long seed = -1;
  // train
  std::string data, report_dir;
  int epochs = -1;
  double lr = -1;
  // generate
  std::string checkpoint, prompt;
  double temperature = -1, top_p = -1;
  int max_new = -1;
  // evaluate
  std::string test, mock, candidate;
  int limit = -1;
};

PipelineConfig load_config(const Options& o) {
  if (!fs::exists(o.config)) throw ConfigError("config file not found: " + o.config + " (pass --config)");
  return load_pipeline_config(o.config);
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError("missing " + what);
  if (!fs::exists(path)) throw DataError(what + " not found: " + path);
}

std::vector<int> read_rfc_list(const std::string& spec) {
  std::string text = spec;
  if (fs::exists(spec)) text = *read_file(spec);
  std::replace(text.begin(), text.end(), ',', ' ');
  std::istringstream is(text);
  std::vector<int> out;
  std::string tok;
  while (is >> tok) {
    if (tok[0] == '#') {
      std::string rest;
      std::getline(is, rest);
      continue;
    }
    try {
      std::size_t used = 0;
      const int n = std::stoi(tok, &used);
      if (used != tok.size() || n <= 0) throw std::invalid_argument(tok);
      out.push_back(n);
    } catch (const std::exception&) {
      throw ConfigError("bad RFC number '" + tok + "' in --rfc-list");
    }
  }
  if (out.empty()) throw ConfigError("--rfc-list names no documents");
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::string write_text(const std::string& path, const std::string& text) {
  write_file_atomic(path, text);
  return path;
}

// ---------------------------------------------------------------------------

int cmd_ingest(const Options& o) {
  auto cfg = load_config(o);
  if (o.out.empty()) throw ConfigError("missing --out");
  auto source = cfg.datapipe.source;
  if (o.offline) source.offline = true;
  if (o.refetch) source.refetch = true;
  if (!o.mirror.empty()) source.mirror_dir = o.mirror;
  const auto rules = load_rules_config(cfg.datapipe.rules);
  const auto numbers = read_rfc_list(o.rfc_list);

  RfcFetcher fetcher(source);
  std::vector<ChatSample> samples;
  int failed = 0;
  for (int n : numbers) {
    try {
      auto got = fetcher.fetch(n);
      auto doc = parse_rfc(got.text, n);
      doc.source_url = got.source;
      const auto s = build_samples(doc, rules);
      std::cerr << "rfc" << n << ": " << doc.sections.size() << " sections, " << s.size() << " samples\n";
      samples.insert(samples.end(), s.begin(), s.end());
    } catch (const Error& e) {
      ++failed;
      std::cerr << "rfc" << n << ": " << e.what() << '\n';
    }
  }
  if (!cfg.datapipe.sme_jsonl.empty()) {
    const auto sme = read_samples_jsonl(cfg.datapipe.sme_jsonl, &rules);
    std::cerr << "imported " << sme.size() << " annotated samples\n";
    samples.insert(samples.end(), sme.begin(), sme.end());
  }
  std::ostringstream os;
  write_samples_jsonl(os, samples, false);
  write_text(o.out, os.str());

  std::map<std::string, std::size_t> counts;
  for (const auto& s : samples) ++counts[s.category];
  for (const auto& c : rules.categories)
    if (counts.count(c.id)) std::cout << c.id << '\t' << counts[c.id] << '\n';
  std::cout << "total\t" << samples.size() << '\n';
  if (failed) {
    std::cerr << failed << " of " << numbers.size() << " documents failed\n";
    return 2;
  }
  return 0;
}

int cmd_prepare(const Options& o) {
  require_file(o.in, "--in");
  if (o.out.empty()) throw ConfigError("missing --out");
  double frac = o.test_frac;
  std::uint64_t seed = o.seed >= 0 ? static_cast<std::uint64_t>(o.seed) : 0;
  std::optional<RulesConfig> rules;
  if (fs::exists(o.config)) {
    const auto cfg = load_config(o);
    if (frac < 0) frac = cfg.datapipe.test_frac;
    if (o.seed < 0) seed = cfg.seed;
    rules = load_rules_config(cfg.datapipe.rules);
  }
  if (frac < 0) frac = 0.2;
  auto samples = read_samples_jsonl(o.in, rules ? &*rules : nullptr);
  std::size_t line = 0, tokens = 0;
  for (auto& s : samples) {
    ++line;
    s.text = apply_chat_template(s);
    if (!template_invariant_holds(*s.text))
      throw DataError("line " + std::to_string(line) + ": rendered text breaks the chat template grammar");
    const auto enc = encode_sample(s);
    if (detokenize(enc.ids) != *s.text) throw DataError("line " + std::to_string(line) + ": tokenizer round trip failed");
    tokens += enc.ids.size();
  }
  const auto split = split_stratified(samples, frac, seed);
  fs::create_directories(o.out);
  std::ostringstream tr, te;
  write_samples_jsonl(tr, split.train, true);
  write_samples_jsonl(te, split.test, true);
  write_text((fs::path(o.out) / "train.jsonl").string(), tr.str());
  write_text((fs::path(o.out) / "test.jsonl").string(), te.str());
  std::cout << "train\t" << split.train.size() << "\ntest\t" << split.test.size() << "\ntokens\t" << tokens << '\n';
  return 0;
}

int cmd_train(const Options& o) {
  auto cfg = load_config(o);
  require_file(o.data, "--data");
  if (o.out.empty()) throw ConfigError("missing --out");
  if (o.epochs >= 0) cfg.train.epochs = o.epochs;
  if (o.lr >= 0) cfg.train.peak_lr = o.lr;
  cfg.train.validate();
  const auto samples = read_samples_jsonl(o.data);
  if (samples.empty()) throw DataError("training set is empty: " + o.data);
  if (cfg.train.epochs == 0) {
    std::cout << "epochs = 0: nothing to train, no checkpoint written\n";
    return 0;
  }
  std::vector<EncodedSequence> data;
  for (const auto& s : samples) data.push_back(encode_sample(s));

  auto model = build_model<float>(cfg.model);
  model.attach_adapters(cfg.lora, mix_seed(cfg.seed, 3));
  const auto echo = to_json(cfg);
  TrainReport report;
  try {
    report = train(model, std::span<const EncodedSequence>(data), cfg.train, [](const StepLog& s) {
      if (s.step == s.total_steps || s.step % 10 == 0)
        std::cerr << "step " << s.step << '/' << s.total_steps << " lr " << s.lr << " loss " << s.loss << " acc "
                  << s.accuracy << '\n';
    });
  } catch (const DivergenceError&) {
    save_checkpoint(o.out + ".lastgood", model, echo);
    std::cerr << "last good adapters saved to " << o.out << ".lastgood\n";
    throw;
  }
  save_checkpoint(o.out, model, echo);
  const fs::path rdir = o.report_dir.empty() ? fs::path(o.out).parent_path() : fs::path(o.report_dir);
  write_text((rdir / "train_report.json").string(), to_json(report).dump(2) + "\n");
  write_text((rdir / "loss_curve.txt").string(), loss_table(report));
  std::cout << "final_loss\t" << report.final_loss << "\nfinal_accuracy\t" << report.final_accuracy << "\nsteps\t"
            << report.total_steps << "\ntokens\t" << report.tokens_processed << '\n';
  return 0;
}

int cmd_generate(const Options& o) {
  require_file(o.checkpoint, "--checkpoint");
  if (o.prompt.empty()) throw ConfigError("missing --prompt");
  auto ck = load_checkpoint<float>(o.checkpoint);
  GenerationConfig g;
  if (ck.config.contains("generation")) {
    const auto pc = parse_pipeline_config(ck.config);
    g = pc.generation;
  }
  if (o.temperature >= 0) g.temperature = o.temperature;
  if (o.top_p >= 0) g.top_p = o.top_p;
  if (o.max_new >= 0) g.max_new = o.max_new;
  if (o.seed >= 0) g.seed = static_cast<std::uint64_t>(o.seed);
  const auto ids = tokenize(chat_prompt_prefix(o.prompt));
  const auto out = generate(ck.model, ids, g.temperature, g.top_p, g.max_new, g.seed);
  std::cout << sanitize_utf8(strip_assistant_tail(detokenize(out))) << '\n';
  return 0;
}

int cmd_evaluate(const Options& o) {
  auto cfg = load_config(o);
  require_file(o.test, "--test");
  if (o.out.empty()) throw ConfigError("missing --out");
  auto samples = read_samples_jsonl(o.test);
  if (o.limit >= 0 && static_cast<std::size_t>(o.limit) < samples.size()) samples.resize(static_cast<std::size_t>(o.limit));
  const auto rubric = load_rubric(cfg.judge.rubric);
  const std::string cand_kind = o.candidate.empty() ? cfg.judge.candidate : o.candidate;
  const std::string mock = o.mock.empty() ? cfg.judge.mock_script : o.mock;

  std::unique_ptr<ChatEndpoint> judge;
  if (!mock.empty()) {
    judge = std::make_unique<MockJudge>(mock);
  } else {
    if (cfg.judge.endpoint.empty()) throw ConfigError("no judge endpoint configured (set judge.endpoint or --mock)");
    if (o.offline) throw ConfigError("--offline forbids the remote judge endpoint");
    judge = std::make_unique<HttpChatEndpoint>(
        HttpEndpointConfig{cfg.judge.endpoint, cfg.judge.model, 0.0, cfg.judge.timeout_s, "JUDGE_API_KEY"});
  }

  std::optional<LoadedCheckpoint<float>> ck;
  std::unique_ptr<ChatEndpoint> cand_ep;
  std::unique_ptr<CandidateSource> candidates;
  if (cand_kind == "model") {
    require_file(o.checkpoint, "--checkpoint");
    ck = load_checkpoint<float>(o.checkpoint);
    candidates = std::make_unique<ModelCandidate<float>>(ck->model, cfg.generation);
  } else if (cand_kind == "reference") {
    candidates = std::make_unique<ReferenceCandidate>();
  } else if (cand_kind == "endpoint") {
    if (o.offline) throw ConfigError("--offline forbids the remote candidate endpoint");
    if (cfg.judge.candidate_endpoint.empty()) throw ConfigError("judge.candidate_endpoint is empty");
    cand_ep = std::make_unique<HttpChatEndpoint>(HttpEndpointConfig{cfg.judge.candidate_endpoint,
                                                                    cfg.judge.candidate_model, cfg.generation.temperature,
                                                                    cfg.judge.timeout_s, "CANDIDATE_API_KEY"});
    candidates = std::make_unique<EndpointCandidate>(*cand_ep);
  } else {
    throw ConfigError("unknown candidate source '" + cand_kind + "'");
  }

  EvalConfig ec;
  ec.concurrency = cfg.judge.concurrency;
  ec.max_retries = cfg.judge.max_retries;
  ec.backoff_ms = mock.empty() ? cfg.judge.backoff_ms : 0;
  ec.partial_report_path = o.out;
  const auto report = evaluate_set(samples, *candidates, *judge, rubric, ec);
  write_text(o.out, to_json(report).dump(2) + "\n");
  const auto table = report_table(report);
  write_text((fs::path(o.out).replace_extension(".txt")).string(), table);
  std::cout << table;
  return 0;
}

int cmd_report(const Options& o) {
  require_file(o.in, "--in");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(*read_file(o.in));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("report " + o.in + ": " + e.what());
  }
  const auto table = report_table(report_from_json(j));
  if (!o.out.empty()) write_text(o.out, table);
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Telecom small-model pipeline: ingest, prepare, train, generate, evaluate, report"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "Pipeline config JSON")->capture_default_str();

  auto* ingest = app.add_subcommand("ingest", "Fetch and parse RFCs into a raw JSONL dataset");
  ingest->add_option("--rfc-list", o.rfc_list, "File or comma list of RFC numbers")->required();
  ingest->add_option("--out", o.out, "Output JSONL")->required();
  ingest->add_option("--mirror", o.mirror, "Local mirror directory (overrides config)");
  ingest->add_flag("--offline", o.offline, "Never touch the network");
  ingest->add_flag("--refetch", o.refetch, "Ignore the on-disk cache");

  auto* prepare = app.add_subcommand("prepare", "Render chat templates and write train/test JSONL");
  prepare->add_option("--in", o.in, "Raw JSONL")->required();
  prepare->add_option("--out", o.out, "Output directory")->required();
  prepare->add_option("--test-frac", o.test_frac, "Test fraction per category");
  prepare->add_option("--seed", o.seed, "Split seed");

  auto* trn = app.add_subcommand("train", "Fine-tune adapters and write a checkpoint");
  trn->add_option("--data", o.data, "Training JSONL")->required();
  trn->add_option("--out", o.out, "Checkpoint path")->required();
  trn->add_option("--epochs", o.epochs, "Override epoch count");
  trn->add_option("--lr", o.lr, "Override peak learning rate");
  trn->add_option("--report-dir", o.report_dir, "Where to write train_report.json and loss_curve.txt");

  auto* gen = app.add_subcommand("generate", "Sample a response from a checkpoint");
  gen->add_option("--checkpoint", o.checkpoint, "Checkpoint path")->required();
  gen->add_option("--prompt", o.prompt, "User message")->required();
  gen->add_option("--temperature", o.temperature, "Sampling temperature (0 = greedy)");
  gen->add_option("--top-p", o.top_p, "Nucleus mass");
  gen->add_option("--max-new", o.max_new, "Maximum new tokens");
  gen->add_option("--seed", o.seed, "Sampling seed");

  auto* ev = app.add_subcommand("evaluate", "Score candidate responses with the judge");
  ev->add_option("--test", o.test, "Test JSONL")->required();
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint for the in-process candidate");
  ev->add_option("--out", o.out, "Report JSON (a .txt table is written alongside)")->required();
  ev->add_option("--mock", o.mock, "Scripted judge JSONL (overrides config)");
  ev->add_option("--candidate", o.candidate, "model | reference | endpoint");
  ev->add_option("--limit", o.limit, "Evaluate only the first N samples");
  ev->add_flag("--offline", o.offline, "Refuse remote endpoints");

  auto* rep = app.add_subcommand("report", "Render a report JSON as a table");
  rep->add_option("--in", o.in, "Report JSON")->required();
  rep->add_option("--out", o.out, "Optional text output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*ingest) return cmd_ingest(o);
    if (*prepare) return cmd_prepare(o);
    if (*trn) return cmd_train(o);
    if (*gen) return cmd_generate(o);
    if (*ev) return cmd_evaluate(o);
    if (*rep) return cmd_report(o);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
