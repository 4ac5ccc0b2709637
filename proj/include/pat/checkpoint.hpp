#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pat/errors.hpp"
#include "pat/model.hpp"
#include "pat/sparsify.hpp"

namespace pat {

// Checkpoint layout:
//   <dir>/manifest.json  format_version, dtype, pruned flag, model config,
//                        tensor table (name, shape, dtype, offset, length)
//                        and model-level state
//   <dir>/weights.bin    little-endian IEEE-754 row-major arrays, each entry
//                        starting on a 64-byte boundary, zero padded

inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr std::size_t kCheckpointAlign = 64;

template <class T>
constexpr const char* dtype_name() {
  return std::is_same_v<T, float> ? "f32" : "f64";
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},         {"n_layers", c.n_layers},   {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},               {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
          {"seed", c.seed},               {"d_attn", c.d_attn}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").template get<std::size_t>();
  c.n_layers = j.at("n_layers").template get<std::size_t>();
  c.n_heads = j.at("n_heads").template get<std::size_t>();
  c.d_ff = j.at("d_ff").template get<std::size_t>();
  c.vocab_size = j.at("vocab_size").template get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").template get<std::size_t>();
  c.seed = j.at("seed").template get<std::uint64_t>();
  c.d_attn = j.value("d_attn", std::size_t{0});
  c.validate();
  return c;
}

/// Named tensors plus a JSON manifest; the unit written to and read from disk.
template <class T>
struct TensorArchive {
  nlohmann::json manifest = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<T>>> tensors;

  void add(std::string name, const Tensor<T>& t) { tensors.emplace_back(std::move(name), t); }

  const Tensor<T>& get(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw FormatError("checkpoint has no tensor '" + name + "'");
  }
};

namespace detail {

inline std::size_t align_up(std::size_t n) { return (n + kCheckpointAlign - 1) / kCheckpointAlign * kCheckpointAlign; }

template <class T>
void append_le(std::vector<char>& blob, std::span<const T> values) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  const auto* p = reinterpret_cast<const char*>(values.data());
  blob.insert(blob.end(), p, p + values.size_bytes());
}

}  // namespace detail

template <class T>
void save_archive(const std::filesystem::path& dir, const TensorArchive<T>& ar) {
  std::filesystem::create_directories(dir);
  std::vector<char> blob;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& [name, t] : ar.tensors) {
    blob.resize(detail::align_up(blob.size()), '\0');
    const std::size_t offset = blob.size();
    detail::append_le<T>(blob, t.data());
    table.push_back({{"name", name},
                     {"shape", t.shape()},
                     {"dtype", dtype_name<T>()},
                     {"offset", offset},
                     {"length", t.size() * sizeof(T)}});
  }
  nlohmann::json manifest = ar.manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["dtype"] = dtype_name<T>();
  manifest["tensors"] = std::move(table);
  {
    std::ofstream out(dir / "weights.bin", std::ios::binary | std::ios::trunc);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw FormatError("failed to write " + (dir / "weights.bin").string());
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw FormatError("failed to write " + (dir / "manifest.json").string());
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("cannot read " + (dir / "manifest.json").string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
}

/// Loads an archive, converting stored f32/f64 values to T. Validates that
/// entries are aligned, in bounds and non-overlapping.
template <class T>
TensorArchive<T> load_archive(const std::filesystem::path& dir) {
  TensorArchive<T> ar;
  ar.manifest = read_manifest(dir);
  if (ar.manifest.value("format_version", 0) != kCheckpointFormatVersion)
    throw FormatError("unsupported checkpoint format_version in " + dir.string());
  std::ifstream in(dir / "weights.bin", std::ios::binary);
  if (!in) throw FormatError("cannot read " + (dir / "weights.bin").string());
  const std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::vector<std::pair<std::size_t, std::size_t>> spans;
  try {
    for (const auto& e : ar.manifest.at("tensors")) {
      const auto name = e.at("name").template get<std::string>();
      const auto shape = e.at("shape").template get<Shape>();
      const auto dtype = e.at("dtype").template get<std::string>();
      const auto offset = e.at("offset").template get<std::size_t>();
      const auto length = e.at("length").template get<std::size_t>();
      const std::size_t width = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
      if (width == 0) throw FormatError("tensor '" + name + "' has unknown dtype " + dtype);
      if (length != numel(shape) * width) throw FormatError("tensor '" + name + "' length does not match its shape");
      if (offset % kCheckpointAlign != 0) throw FormatError("tensor '" + name + "' is not 64-byte aligned");
      if (offset + length > blob.size()) throw FormatError("tensor '" + name + "' runs past the end of weights.bin");
      spans.emplace_back(offset, offset + length);
      std::vector<T> values(numel(shape));
      for (std::size_t i = 0; i < values.size(); ++i) {
        if (width == 4) {
          float f;
          std::memcpy(&f, blob.data() + offset + 4 * i, 4);
          values[i] = static_cast<T>(f);
        } else {
          double f;
          std::memcpy(&f, blob.data() + offset + 8 * i, 8);
          values[i] = static_cast<T>(f);
        }
      }
      ar.tensors.emplace_back(name, Tensor<T>(shape, std::move(values)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed tensor table: ") + e.what());
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i)
    if (spans[i].first < spans[i - 1].second) throw FormatError("overlapping tensor entries in " + dir.string());
  return ar;
}

// ---------------------------------------------------------------------------
// Model-level containers
// ---------------------------------------------------------------------------

template <class T>
void add_weights(TensorArchive<T>& ar, const DecoderWeights<T>& w) {
  w.for_each([&](const std::string& n, const Tensor<T>& t) { ar.add(n, t); });
}

template <class T>
DecoderWeights<T> weights_from_archive(const TensorArchive<T>& ar) {
  DecoderWeights<T> w;
  w.config = config_from_json(ar.manifest.at("config"));
  w.norm_eps = static_cast<T>(ar.manifest.at("norm_eps").template get<double>());
  w.norm_gain_scale = ar.manifest.at("norm_gain_scale").template get<double>();
  if (!(w.norm_gain_scale > 0.0)) throw FormatError("norm_gain_scale must be positive");
  w.blocks.resize(w.config.n_layers);
  w.for_each([&](const std::string& n, Tensor<T>& t) { t = ar.get(n); });
  return w;
}

template <class T>
TensorArchive<T> state_archive(const ModelState<T>& m, const nlohmann::json& extra = nlohmann::json::object()) {
  TensorArchive<T> ar;
  add_weights(ar, m.base);
  for (std::size_t l = 0; l < m.lora.size(); ++l)
    for (std::size_t k = 0; k < kBlockProjections; ++k) {
      const std::string p = "lora.blocks." + std::to_string(l) + "." + kProjNames[k];
      ar.add(p + ".a", m.lora[l][k].a);
      ar.add(p + ".b", m.lora[l][k].b);
    }
  ar.add("lora.lm_head.a", m.lora_head.a);
  ar.add("lora.lm_head.b", m.lora_head.b);
  ar.add("mask.proxy", m.mask->proxy);
  for (std::size_t l = 0; l < m.hsm.size(); ++l)
    for (const auto& [tag, h] : {std::pair{"attn", &m.hsm[l].attn}, std::pair{"ffn", &m.hsm[l].ffn}}) {
      const std::string p = "hsm.blocks." + std::to_string(l) + "." + tag;
      ar.add(p + ".l0", h->l0);
      ar.add(p + ".v", h->v);
      ar.add(p + ".l1", h->l1);
    }
  auto& j = ar.manifest;
  j["pruned"] = false;
  j["config"] = config_to_json(m.config());
  j["norm_eps"] = static_cast<double>(m.base.norm_eps);
  j["norm_gain_scale"] = m.base.norm_gain_scale;
  j["lora"] = {{"alpha", static_cast<double>(m.lora_head.alpha)}, {"merged", m.lora_merged}};
  j["mask"] = {{"s0", m.mask->s0},
               {"eps_temp", m.mask->eps_temp},
               {"n_target", m.mask->n_target},
               {"step", m.mask->step}};
  j["hsm_merged"] = m.hsm_merged;
  j["snap_kept"] = m.snap.kept;
  j["extra"] = extra;
  return ar;
}

template <class T>
ModelState<T> state_from_archive(const TensorArchive<T>& ar) {
  const auto& j = ar.manifest;
  if (j.value("pruned", false)) throw FormatError("checkpoint is pruned; expected a trainable model");
  ModelState<T> m;
  m.base = weights_from_archive(ar);
  const auto& cfg = m.base.config;
  const T alpha = static_cast<T>(j.at("lora").at("alpha").template get<double>());
  m.lora_merged = j.at("lora").at("merged").template get<bool>();
  m.lora.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (std::size_t k = 0; k < kBlockProjections; ++k) {
      const std::string p = "lora.blocks." + std::to_string(l) + "." + kProjNames[k];
      auto& ad = m.lora[l][k];
      ad.a = ar.get(p + ".a");
      ad.b = ar.get(p + ".b");
      ad.alpha = alpha;
      ad.consumed = m.lora_merged;
    }
  m.lora_head.a = ar.get("lora.lm_head.a");
  m.lora_head.b = ar.get("lora.lm_head.b");
  m.lora_head.alpha = alpha;
  m.lora_head.consumed = m.lora_merged;

  const auto& mj = j.at("mask");
  auto mask = std::make_shared<UnifiedMask<T>>();
  mask->proxy = ar.get("mask.proxy");
  mask->s0 = mj.at("s0").template get<std::int64_t>();
  mask->eps_temp = mj.at("eps_temp").template get<double>();
  mask->n_target = mj.at("n_target").template get<std::size_t>();
  mask->step = mj.at("step").template get<std::int64_t>();
  mask->validate();
  m.mask = mask;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    BlockSparsifiers<T> b;
    for (auto [tag, h] : {std::pair{"attn", &b.attn}, std::pair{"ffn", &b.ffn}}) {
      const std::string p = "hsm.blocks." + std::to_string(l) + "." + tag;
      h->l0 = ar.get(p + ".l0");
      h->v = ar.get(p + ".v");
      h->l1 = ar.get(p + ".l1");
      h->mask = mask;
    }
    m.hsm.push_back(std::move(b));
  }
  m.hsm_merged = j.at("hsm_merged").template get<bool>();
  m.snap.d = m.width();
  m.snap.kept = j.at("snap_kept").template get<std::vector<std::size_t>>();
  if (m.hsm_merged) m.snap.validate();

  // Trainable tensors need gradients; frozen base weights do not.
  for (auto t : m.lora_parameters()) t.set_requires_grad(true);
  for (auto t : m.sparsity_parameters()) t.set_requires_grad(true);
  return m;
}

template <class T>
TensorArchive<T> pruned_archive(const DecoderWeights<T>& w, const BinaryMask& bmask,
                                const nlohmann::json& extra = nlohmann::json::object()) {
  TensorArchive<T> ar;
  add_weights(ar, w);
  auto& j = ar.manifest;
  j["pruned"] = true;
  j["config"] = config_to_json(w.config);
  j["norm_eps"] = static_cast<double>(w.norm_eps);
  j["norm_gain_scale"] = w.norm_gain_scale;
  j["kept"] = bmask.kept;
  j["d_original"] = bmask.d;
  j["extra"] = extra;
  return ar;
}

struct PrunedInfo {
  BinaryMask mask;
};

template <class T>
std::pair<DecoderWeights<T>, BinaryMask> pruned_from_archive(const TensorArchive<T>& ar) {
  const auto& j = ar.manifest;
  if (!j.value("pruned", false)) throw FormatError("checkpoint is not pruned");
  BinaryMask bm;
  bm.d = j.at("d_original").template get<std::size_t>();
  bm.kept = j.at("kept").template get<std::vector<std::size_t>>();
  bm.validate();
  return {weights_from_archive(ar), bm};
}

template <class T>
void save_state(const std::filesystem::path& dir, const ModelState<T>& m,
                const nlohmann::json& extra = nlohmann::json::object()) {
  save_archive(dir, state_archive(m, extra));
}

template <class T>
ModelState<T> load_state(const std::filesystem::path& dir) {
  return state_from_archive(load_archive<T>(dir));
}

template <class T>
void save_pruned(const std::filesystem::path& dir, const DecoderWeights<T>& w, const BinaryMask& bmask,
                 const nlohmann::json& extra = nlohmann::json::object()) {
  save_archive(dir, pruned_archive(w, bmask, extra));
}

template <class T>
std::pair<DecoderWeights<T>, BinaryMask> load_pruned(const std::filesystem::path& dir) {
  return pruned_from_archive(load_archive<T>(dir));
}

}  // namespace pat
