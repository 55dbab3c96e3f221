#pragma once

// Checkpoint container:
//   "TSLM" | u32 version | u64 metadata length | metadata JSON | payload
// Integers are little-endian. The metadata carries the config echo and a
// tensor manifest of {name, dtype, shape, offset, bytes} into the payload,
// which stores f32 arrays and packed NF4 nibble streams in manifest order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tslam/error.hpp"
#include "tslam/fetch.hpp"
#include "tslam/model.hpp"

namespace tslam {

inline constexpr char kCheckpointMagic[4] = {'T', 'S', 'L', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(std::string_view in, std::size_t pos) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return static_cast<T>(v);
}

class PayloadWriter {
 public:
  void floats(const std::string& name, const float* p, std::size_t n, std::vector<std::size_t> shape) {
    const std::size_t off = data_.size();
    for (std::size_t i = 0; i < n; ++i) put_le(data_, std::bit_cast<std::uint32_t>(p[i]));
    add(name, "f32", std::move(shape), off);
  }
  void bytes(const std::string& name, const std::vector<std::uint8_t>& b, std::vector<std::size_t> shape) {
    const std::size_t off = data_.size();
    data_.append(reinterpret_cast<const char*>(b.data()), b.size());
    add(name, "nf4", std::move(shape), off);
  }
  template <class Real>
  void matrix(const std::string& name, const Mat<Real>& m) {
    std::vector<float> f(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) f[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
    floats(name, f.data(), f.size(), {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  }

  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  const std::string& data() const { return data_; }

 private:
  void add(const std::string& name, const char* dtype, std::vector<std::size_t> shape, std::size_t off) {
    manifest.push_back(
        {{"name", name}, {"dtype", dtype}, {"shape", shape}, {"offset", off}, {"bytes", data_.size() - off}});
  }
  std::string data_;
};

}  // namespace detail

/// Serializes the model (NF4 bases, adapters, embeddings, norms, head).
/// `config_echo` is stored verbatim under "config".
template <class Real>
std::string serialize_checkpoint(const Model<Real>& m, const nlohmann::ordered_json& config_echo,
                                 const nlohmann::ordered_json& extra = {}) {
  detail::PayloadWriter w;
  w.matrix("tok_emb", m.tok_emb);
  w.matrix("pos_emb", m.pos_emb);
  nlohmann::ordered_json layers = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i);
    w.matrix(p + ".attn_norm", Mat<Real>(m.blocks[i].attn_norm));
    w.matrix(p + ".ffn_norm", Mat<Real>(m.blocks[i].ffn_norm));
  }
  for (const auto& [name, layer] : m.named_layers()) {
    const auto& q = layer->base();
    w.bytes(name + ".base.codes", q.codes, {q.rows, q.cols});
    w.floats(name + ".base.scales", q.scales.data(), q.scales.size(), {q.scales.size()});
    nlohmann::ordered_json rec = {{"block_size", q.block_size}, {"dtype_tag", q.dtype_tag}};
    if (layer->has_adapter()) {
      const auto& ad = layer->adapter();
      w.matrix(name + ".lora.A", ad.A);
      w.matrix(name + ".lora.B", ad.B);
      rec["lora"] = {{"rank", ad.rank}, {"alpha", static_cast<double>(ad.alpha)}, {"dropout", static_cast<double>(ad.dropout_p)}};
    }
    layers[name] = rec;
  }
  w.matrix("final_norm", Mat<Real>(m.final_norm));
  w.matrix("head", m.head);

  const auto& c = m.cfg;
  nlohmann::ordered_json meta;
  meta["format"] = "tslam-checkpoint";
  meta["model"] = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
                   {"n_heads", c.n_heads},       {"n_kv_heads", c.n_kv_heads}, {"d_ff", c.d_ff},
                   {"max_seq", c.max_seq},       {"seed", c.seed},       {"nf4_block_size", c.nf4_block_size}};
  meta["config"] = config_echo;
  if (!extra.is_null()) meta["extra"] = extra;
  meta["layers"] = layers;
  meta["tensors"] = w.manifest;
  meta["payload_bytes"] = w.data().size();

  const std::string js = meta.dump();
  std::string out(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, js.size());
  out += js;
  out += w.data();
  return out;
}

template <class Real>
void save_checkpoint(const std::filesystem::path& path, const Model<Real>& m, const nlohmann::ordered_json& config_echo,
                     const nlohmann::ordered_json& extra = {}) {
  write_file_atomic(path, serialize_checkpoint(m, config_echo, extra));
}

struct CheckpointHeader {
  nlohmann::ordered_json meta;
  std::size_t payload_start = 0;
};

inline CheckpointHeader read_checkpoint_header(std::string_view bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw DataError("not a checkpoint");
  const auto version = detail::get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto len = detail::get_le<std::uint64_t>(bytes, 8);
  if (len > bytes.size() - 16) throw DataError("truncated checkpoint");
  CheckpointHeader h;
  try {
    h.meta = nlohmann::ordered_json::parse(bytes.substr(16, len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt checkpoint metadata: ") + e.what());
  }
  h.payload_start = 16 + len;
  return h;
}

template <class Real = float>
struct LoadedCheckpoint {
  Model<Real> model;
  nlohmann::ordered_json config;
  nlohmann::ordered_json extra;
};

template <class Real = float>
LoadedCheckpoint<Real> deserialize_checkpoint(std::string_view bytes) {
  const auto h = read_checkpoint_header(bytes);
  const auto& meta = h.meta;
  const std::string_view payload = bytes.substr(h.payload_start);

  struct Entry {
    std::string dtype;
    std::vector<std::size_t> shape;
    std::size_t offset, size;
  };
  std::map<std::string, Entry> tensors;
  try {
    if (meta.at("payload_bytes").get<std::size_t>() != payload.size()) throw DataError("payload size mismatch");
    std::size_t expected = 0;
    for (const auto& t : meta.at("tensors")) {
      Entry e{t.at("dtype").get<std::string>(), t.at("shape").get<std::vector<std::size_t>>(),
              t.at("offset").get<std::size_t>(), t.at("bytes").get<std::size_t>()};
      if (e.offset != expected || e.offset + e.size > payload.size()) throw DataError("inconsistent tensor offsets");
      expected += e.size;
      tensors[t.at("name").get<std::string>()] = std::move(e);
    }
    if (expected != payload.size()) throw DataError("inconsistent tensor offsets");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt checkpoint manifest: ") + e.what());
  }

  auto find = [&](const std::string& name) -> const Entry& {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("checkpoint lacks tensor " + name);
    return it->second;
  };
  auto floats = [&](const std::string& name) {
    const auto& e = find(name);
    if (e.dtype != "f32" || e.size % 4) throw DataError("bad dtype for " + name);
    std::vector<float> v(e.size / 4);
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(payload, e.offset + 4 * i));
    return v;
  };
  auto matrix = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    const auto v = floats(name);
    if (v.size() != static_cast<std::size_t>(rows * cols)) throw DataError("shape mismatch for " + name);
    Mat<Real> m(rows, cols);
    for (std::size_t i = 0; i < v.size(); ++i) m.data()[i] = static_cast<Real>(v[i]);
    return m;
  };

  LoadedCheckpoint<Real> out;
  ModelConfig c;
  try {
    const auto& mj = meta.at("model");
    c.vocab_size = mj.at("vocab_size");
    c.d_model = mj.at("d_model");
    c.n_layers = mj.at("n_layers");
    c.n_heads = mj.at("n_heads");
    c.n_kv_heads = mj.at("n_kv_heads");
    c.d_ff = mj.at("d_ff");
    c.max_seq = mj.at("max_seq");
    c.seed = mj.at("seed");
    c.nf4_block_size = mj.at("nf4_block_size");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt checkpoint model section: ") + e.what());
  }
  c.validate();
  auto& m = out.model;
  m.cfg = c;
  m.tok_emb = matrix("tok_emb", c.vocab_size, c.d_model);
  m.pos_emb = matrix("pos_emb", c.max_seq, c.d_model);
  m.blocks.resize(static_cast<std::size_t>(c.n_layers));
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i);
    m.blocks[i].attn_norm = matrix(p + ".attn_norm", 1, c.d_model);
    m.blocks[i].ffn_norm = matrix(p + ".ffn_norm", 1, c.d_model);
  }
  for (auto& [name, layer] : m.named_layers()) {
    const auto& codes = find(name + ".base.codes");
    if (codes.dtype != "nf4" || codes.shape.size() != 2) throw DataError("bad dtype for " + name);
    const nlohmann::ordered_json& rec = meta.at("layers").at(name);
    QuantizedTensor q;
    q.rows = codes.shape[0];
    q.cols = codes.shape[1];
    q.block_size = rec.at("block_size").get<std::size_t>();
    q.dtype_tag = rec.at("dtype_tag").get<std::string>();
    const auto* b = reinterpret_cast<const std::uint8_t*>(payload.data() + codes.offset);
    q.codes.assign(b, b + codes.size);
    q.scales = floats(name + ".base.scales");
    q.validate();
    *layer = AdaptedLinear<Real>(std::move(q));
    if (rec.contains("lora")) {
      LoraAdapter<Real> ad;
      ad.rank = rec["lora"].at("rank");
      ad.alpha = static_cast<Real>(rec["lora"].at("alpha").get<double>());
      ad.dropout_p = static_cast<Real>(rec["lora"].at("dropout").get<double>());
      ad.A = matrix(name + ".lora.A", ad.rank, layer->in_dim());
      ad.B = matrix(name + ".lora.B", layer->out_dim(), ad.rank);
      layer->attach(std::move(ad));
    }
  }
  m.final_norm = matrix("final_norm", 1, c.d_model);
  m.head = matrix("head", c.vocab_size, c.d_model);
  out.config = meta.value("config", nlohmann::ordered_json());
  out.extra = meta.value("extra", nlohmann::ordered_json());
  return out;
}

template <class Real = float>
LoadedCheckpoint<Real> load_checkpoint(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  if (!bytes) throw DataError("cannot read checkpoint " + path.string());
  return deserialize_checkpoint<Real>(*bytes);
}

}  // namespace tslam
