#pragma once

// Single JSON pipeline configuration. Every section is optional and falls back
// to the fine-tuning recipe defaults; unknown keys are rejected.

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "tslam/error.hpp"
#include "tslam/fetch.hpp"
#include "tslam/judge.hpp"
#include "tslam/model.hpp"
#include "tslam/train.hpp"

namespace tslam {

struct DatapipeConfig {
  SourceConfig source;
  std::string rules = "taxonomy_rules.json";
  std::string sme_jsonl;  // optional externally annotated samples merged after RFC samples
  double test_frac = 0.2;
};

struct JudgeConfig {
  std::string endpoint;  // empty: mock mode
  std::string model = "judge";
  std::string rubric = "rubric.json";
  std::string mock_script;
  std::string candidate = "model";  // model | reference | endpoint
  std::string candidate_endpoint;
  std::string candidate_model = "candidate";
  int concurrency = 4;
  int max_retries = 3;
  int backoff_ms = 500;
  int timeout_s = 60;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  DatapipeConfig datapipe;
  ModelConfig model;
  LoraConfig lora;
  OptimizerConfig train;
  GenerationConfig generation;
  JudgeConfig judge;

  PipelineConfig() {
    train.epochs = 3;
    datapipe.source.cache_dir = "cache";
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("'" + where + "' must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown key '" + (where.empty() ? k : where + "." + k) + "'");
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& dst, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("bad value for '" + where + "." + key + "'");
  }
}

inline std::string resolve_path(const std::string& p, const std::filesystem::path& base) {
  if (p.empty() || base.empty()) return p;
  const std::filesystem::path fp(p);
  return fp.is_absolute() ? p : (base / fp).lexically_normal().string();
}

}  // namespace detail

/// Relative paths are resolved against `base_dir` (the config file's directory).
inline PipelineConfig parse_pipeline_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  using detail::check_keys;
  using detail::read;
  PipelineConfig c;
  check_keys(j, {"seed", "datapipe", "model", "lora", "train", "generation", "judge"}, "");
  read(j, "seed", c.seed, "");

  if (j.contains("datapipe")) {
    const auto& d = j["datapipe"];
    check_keys(d, {"base_url", "mirror_dir", "cache_dir", "delay_ms", "user_agent", "timeout_s", "rules", "sme_jsonl",
                   "test_frac"},
               "datapipe");
    auto& s = c.datapipe.source;
    read(d, "base_url", s.base_url, "datapipe");
    read(d, "mirror_dir", s.mirror_dir, "datapipe");
    read(d, "cache_dir", s.cache_dir, "datapipe");
    read(d, "delay_ms", s.delay_ms, "datapipe");
    read(d, "user_agent", s.user_agent, "datapipe");
    read(d, "timeout_s", s.timeout_s, "datapipe");
    read(d, "rules", c.datapipe.rules, "datapipe");
    read(d, "sme_jsonl", c.datapipe.sme_jsonl, "datapipe");
    read(d, "test_frac", c.datapipe.test_frac, "datapipe");
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    check_keys(m, {"vocab_size", "d_model", "n_layers", "n_heads", "n_kv_heads", "d_ff", "max_seq", "seed",
                   "nf4_block_size"},
               "model");
    auto& mc = c.model;
    read(m, "vocab_size", mc.vocab_size, "model");
    read(m, "d_model", mc.d_model, "model");
    read(m, "n_layers", mc.n_layers, "model");
    read(m, "n_heads", mc.n_heads, "model");
    read(m, "n_kv_heads", mc.n_kv_heads, "model");
    read(m, "d_ff", mc.d_ff, "model");
    read(m, "max_seq", mc.max_seq, "model");
    read(m, "seed", mc.seed, "model");
    read(m, "nf4_block_size", mc.nf4_block_size, "model");
  }
  if (j.contains("lora")) {
    const auto& l = j["lora"];
    check_keys(l, {"rank", "alpha", "dropout"}, "lora");
    read(l, "rank", c.lora.rank, "lora");
    read(l, "alpha", c.lora.alpha, "lora");
    read(l, "dropout", c.lora.dropout, "lora");
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    check_keys(t, {"peak_lr", "weight_decay", "beta1", "beta2", "eps", "warmup_frac", "micro_batch", "grad_accum",
                   "max_grad_norm", "epochs", "seed"},
               "train");
    auto& o = c.train;
    read(t, "peak_lr", o.peak_lr, "train");
    read(t, "weight_decay", o.weight_decay, "train");
    read(t, "beta1", o.beta1, "train");
    read(t, "beta2", o.beta2, "train");
    read(t, "eps", o.eps, "train");
    read(t, "warmup_frac", o.warmup_frac, "train");
    read(t, "micro_batch", o.micro_batch, "train");
    read(t, "grad_accum", o.grad_accum, "train");
    read(t, "max_grad_norm", o.max_grad_norm, "train");
    read(t, "epochs", o.epochs, "train");
    read(t, "seed", o.seed, "train");
  }
  if (j.contains("generation")) {
    const auto& g = j["generation"];
    check_keys(g, {"temperature", "top_p", "max_new", "seed"}, "generation");
    read(g, "temperature", c.generation.temperature, "generation");
    read(g, "top_p", c.generation.top_p, "generation");
    read(g, "max_new", c.generation.max_new, "generation");
    read(g, "seed", c.generation.seed, "generation");
  }
  if (j.contains("judge")) {
    const auto& g = j["judge"];
    check_keys(g, {"endpoint", "model", "rubric", "mock_script", "candidate", "candidate_endpoint", "candidate_model",
                   "concurrency", "max_retries", "backoff_ms", "timeout_s"},
               "judge");
    auto& jc = c.judge;
    read(g, "endpoint", jc.endpoint, "judge");
    read(g, "model", jc.model, "judge");
    read(g, "rubric", jc.rubric, "judge");
    read(g, "mock_script", jc.mock_script, "judge");
    read(g, "candidate", jc.candidate, "judge");
    read(g, "candidate_endpoint", jc.candidate_endpoint, "judge");
    read(g, "candidate_model", jc.candidate_model, "judge");
    read(g, "concurrency", jc.concurrency, "judge");
    read(g, "max_retries", jc.max_retries, "judge");
    read(g, "backoff_ms", jc.backoff_ms, "judge");
    read(g, "timeout_s", jc.timeout_s, "judge");
  }

  auto& s = c.datapipe.source;
  s.mirror_dir = detail::resolve_path(s.mirror_dir, base_dir);
  s.cache_dir = detail::resolve_path(s.cache_dir, base_dir);
  c.datapipe.rules = detail::resolve_path(c.datapipe.rules, base_dir);
  c.datapipe.sme_jsonl = detail::resolve_path(c.datapipe.sme_jsonl, base_dir);
  c.judge.rubric = detail::resolve_path(c.judge.rubric, base_dir);
  c.judge.mock_script = detail::resolve_path(c.judge.mock_script, base_dir);

  c.model.validate();
  c.train.validate();
  if (c.lora.rank < 1 || !(c.lora.alpha > 0) || c.lora.dropout < 0 || c.lora.dropout >= 1)
    throw ConfigError("invalid lora settings");
  if (!(c.datapipe.test_frac > 0 && c.datapipe.test_frac < 1)) throw ConfigError("test_frac must lie in (0, 1)");
  if (c.generation.temperature < 0 || !(c.generation.top_p > 0 && c.generation.top_p <= 1) || c.generation.max_new < 0)
    throw ConfigError("invalid generation settings");
  if (c.judge.candidate != "model" && c.judge.candidate != "reference" && c.judge.candidate != "endpoint")
    throw ConfigError("judge.candidate must be model, reference or endpoint");
  if (c.judge.concurrency < 1 || c.judge.max_retries < 0 || c.judge.backoff_ms < 0)
    throw ConfigError("invalid judge settings");
  return c;
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return parse_pipeline_config(j, std::filesystem::absolute(path).parent_path());
}

/// Full echo with every field; parsing the echo yields the same config.
inline nlohmann::ordered_json to_json(const PipelineConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  const auto& s = c.datapipe.source;
  j["datapipe"] = {{"base_url", s.base_url},     {"mirror_dir", s.mirror_dir}, {"cache_dir", s.cache_dir},
                   {"delay_ms", s.delay_ms},     {"user_agent", s.user_agent}, {"timeout_s", s.timeout_s},
                   {"rules", c.datapipe.rules}, {"sme_jsonl", c.datapipe.sme_jsonl},
                   {"test_frac", c.datapipe.test_frac}};
  const auto& m = c.model;
  j["model"] = {{"vocab_size", m.vocab_size}, {"d_model", m.d_model}, {"n_layers", m.n_layers},
                {"n_heads", m.n_heads},       {"n_kv_heads", m.n_kv_heads}, {"d_ff", m.d_ff},
                {"max_seq", m.max_seq},       {"seed", m.seed},       {"nf4_block_size", m.nf4_block_size}};
  j["lora"] = {{"rank", c.lora.rank}, {"alpha", c.lora.alpha}, {"dropout", c.lora.dropout}};
  const auto& o = c.train;
  j["train"] = {{"peak_lr", o.peak_lr},         {"weight_decay", o.weight_decay}, {"beta1", o.beta1},
                {"beta2", o.beta2},             {"eps", o.eps},                   {"warmup_frac", o.warmup_frac},
                {"micro_batch", o.micro_batch}, {"grad_accum", o.grad_accum},     {"max_grad_norm", o.max_grad_norm},
                {"epochs", o.epochs},           {"seed", o.seed}};
  j["generation"] = {{"temperature", c.generation.temperature},
                     {"top_p", c.generation.top_p},
                     {"max_new", c.generation.max_new},
                     {"seed", c.generation.seed}};
  const auto& g = c.judge;
  j["judge"] = {{"endpoint", g.endpoint},
                {"model", g.model},
                {"rubric", g.rubric},
                {"mock_script", g.mock_script},
                {"candidate", g.candidate},
                {"candidate_endpoint", g.candidate_endpoint},
                {"candidate_model", g.candidate_model},
                {"concurrency", g.concurrency},
                {"max_retries", g.max_retries},
                {"backoff_ms", g.backoff_ms},
                {"timeout_s", g.timeout_s}};
  return j;
}

}  // namespace tslam
