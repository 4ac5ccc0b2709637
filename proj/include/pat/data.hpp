#pragma once

#include <cstdint>
#include <fstream>
#include <iterator>
#include <random>
#include <regex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pat/errors.hpp"
#include "pat/model.hpp"

namespace pat {

enum class TaskKind { Text, Copy, ModAdd };

/// Where training tokens come from: a UTF-8 file (byte tokens, vocab 256) or
/// a synthetic task, written `copy(len, vocab)` or `mod_add(modulus)`.
struct DataSpec {
  TaskKind kind = TaskKind::Text;
  std::string path;
  std::size_t copy_len = 8;
  std::size_t copy_vocab = 16;
  std::size_t modulus = 7;
  std::size_t examples = 20000;
  std::uint64_t seed = 1;

  static DataSpec parse(const std::string& text) {
    static const std::regex copy_re(R"(^\s*copy\s*\(\s*(\d+)\s*,\s*(\d+)\s*\)\s*$)");
    static const std::regex mod_re(R"(^\s*mod_add\s*\(\s*(\d+)\s*\)\s*$)");
    DataSpec s;
    std::smatch m;
    if (std::regex_match(text, m, copy_re)) {
      s.kind = TaskKind::Copy;
      s.copy_len = std::stoul(m[1]);
      s.copy_vocab = std::stoul(m[2]);
      if (s.copy_len == 0 || s.copy_vocab == 0) throw ConfigError("copy task needs len >= 1 and vocab >= 1");
    } else if (std::regex_match(text, m, mod_re)) {
      s.kind = TaskKind::ModAdd;
      s.modulus = std::stoul(m[1]);
      if (s.modulus < 2) throw ConfigError("mod_add needs modulus >= 2");
    } else {
      s.kind = TaskKind::Text;
      s.path = text;
    }
    return s;
  }

  std::string describe() const {
    switch (kind) {
      case TaskKind::Copy: return "copy(" + std::to_string(copy_len) + "," + std::to_string(copy_vocab) + ")";
      case TaskKind::ModAdd: return "mod_add(" + std::to_string(modulus) + ")";
      case TaskKind::Text: break;
    }
    return path;
  }

  /// Number of distinct token ids the stream can contain.
  std::size_t vocab() const {
    switch (kind) {
      case TaskKind::Copy: return copy_vocab + 1;
      case TaskKind::ModAdd: return modulus + 1;
      case TaskKind::Text: break;
    }
    return 256;
  }
};

/// Token stream with per-token supervision metadata.
///
/// target[i] says whether token i is a prediction target (predicted from
/// token i-1). example_start[i] is the stream index where the example that
/// contains token i begins; a target is only scored when its whole example
/// prefix is visible in the window.
struct TokenStream {
  std::vector<std::int32_t> tokens;
  std::vector<std::uint8_t> target;
  std::vector<std::size_t> example_start;
  std::size_t vocab = 0;

  std::size_t size() const { return tokens.size(); }
};

inline std::vector<std::int32_t> tokenize_bytes(std::string_view text) {
  std::vector<std::int32_t> out(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) out[i] = static_cast<unsigned char>(text[i]);
  return out;
}

inline std::string detokenize_bytes(std::span<const std::int32_t> ids) {
  std::string out(ids.size(), '\0');
  for (std::size_t i = 0; i < ids.size(); ++i) out[i] = static_cast<char>(static_cast<unsigned char>(ids[i]));
  return out;
}

namespace detail {

inline void push_example(TokenStream& s, std::span<const std::int32_t> toks, std::size_t first_target) {
  const std::size_t start = s.tokens.size();
  for (std::size_t i = 0; i < toks.size(); ++i) {
    s.tokens.push_back(toks[i]);
    s.target.push_back(i >= first_target ? 1 : 0);
    s.example_start.push_back(start);
  }
}

}  // namespace detail

/// Builds the token stream for `spec`. Synthetic tasks are deterministic in spec.seed.
inline TokenStream ingest(const DataSpec& spec) {
  TokenStream s;
  s.vocab = spec.vocab();
  if (spec.kind == TaskKind::Text) {
    std::ifstream in(spec.path, std::ios::binary);
    if (!in) throw InputError("cannot read data file '" + spec.path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (text.size() < 2) throw InputError("data file '" + spec.path + "' is too short");
    s.tokens = tokenize_bytes(text);
    s.target.assign(s.tokens.size(), 1);
    s.target[0] = 0;
    s.example_start.resize(s.tokens.size());
    for (std::size_t i = 0; i < s.tokens.size(); ++i) s.example_start[i] = i;
    return s;
  }
  if (spec.examples == 0) throw ConfigError("synthetic task needs examples >= 1");
  Rng rng(spec.seed);
  if (spec.kind == TaskKind::Copy) {
    // w SEP w; only the second copy is supervised.
    std::uniform_int_distribution<std::int32_t> sym(0, static_cast<std::int32_t>(spec.copy_vocab) - 1);
    const auto sep = static_cast<std::int32_t>(spec.copy_vocab);
    std::vector<std::int32_t> ex(2 * spec.copy_len + 1);
    for (std::size_t e = 0; e < spec.examples; ++e) {
      for (std::size_t i = 0; i < spec.copy_len; ++i) ex[i] = ex[spec.copy_len + 1 + i] = sym(rng);
      ex[spec.copy_len] = sep;
      detail::push_example(s, ex, spec.copy_len + 1);
    }
  } else {
    // a b EQ c with c = (a + b) mod m; only c is supervised.
    std::uniform_int_distribution<std::int32_t> num(0, static_cast<std::int32_t>(spec.modulus) - 1);
    const auto m = static_cast<std::int32_t>(spec.modulus);
    for (std::size_t e = 0; e < spec.examples; ++e) {
      const auto a = num(rng), b = num(rng);
      const std::int32_t ex[4] = {a, b, m, (a + b) % m};
      detail::push_example(s, ex, 3);
    }
  }
  return s;
}

struct StreamSplit {
  TokenStream train;
  TokenStream heldout;
};

/// Contiguous split: the first ~fraction of the stream trains, the rest is
/// held out. The cut is moved forward to an example boundary.
inline StreamSplit split_stream(const TokenStream& s, double fraction = 0.9) {
  std::size_t cut = static_cast<std::size_t>(fraction * static_cast<double>(s.size()));
  while (cut < s.size() && s.example_start[cut] != cut) ++cut;
  if (cut == 0 || cut >= s.size()) throw InputError("stream too short to split");
  auto part = [&](std::size_t lo, std::size_t hi) {
    TokenStream p;
    p.vocab = s.vocab;
    p.tokens.assign(s.tokens.begin() + static_cast<std::ptrdiff_t>(lo), s.tokens.begin() + static_cast<std::ptrdiff_t>(hi));
    p.target.assign(s.target.begin() + static_cast<std::ptrdiff_t>(lo), s.target.begin() + static_cast<std::ptrdiff_t>(hi));
    p.example_start.resize(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) p.example_start[i - lo] = s.example_start[i] >= lo ? s.example_start[i] - lo : 0;
    return p;
  };
  return {part(0, cut), part(cut, s.size())};
}

/// Start offsets of non-overlapping windows of seq_len + 1 tokens (inputs plus
/// the shifted targets). A trailing partial window is dropped.
inline std::vector<std::size_t> window_starts(const TokenStream& s, std::size_t seq_len) {
  std::vector<std::size_t> out;
  for (std::size_t start = 0; start + seq_len + 1 <= s.size(); start += seq_len + 1) out.push_back(start);
  return out;
}

/// Inputs, next-token targets and per-position loss weights for a set of windows.
template <class T>
struct TrainBatch {
  TokenBatch inputs;
  std::vector<std::int32_t> targets;
  std::vector<T> weights;

  std::size_t scored() const {
    std::size_t n = 0;
    for (T w : weights) n += w != T(0);
    return n;
  }
};

template <class T>
TrainBatch<T> make_batch(const TokenStream& s, std::span<const std::size_t> starts, std::size_t seq_len) {
  if (starts.empty()) throw InputError("empty batch");
  TrainBatch<T> b;
  b.inputs.batch = starts.size();
  b.inputs.len = seq_len;
  b.inputs.ids.reserve(starts.size() * seq_len);
  for (auto start : starts) {
    if (start + seq_len + 1 > s.size()) throw InputError("window runs past the end of the stream");
    for (std::size_t t = 0; t < seq_len; ++t) {
      const std::size_t tgt = start + t + 1;
      b.inputs.ids.push_back(s.tokens[start + t]);
      b.targets.push_back(s.tokens[tgt]);
      const bool scored = s.target[tgt] && s.example_start[tgt] >= start;
      b.weights.push_back(scored ? T(1) : T(0));
    }
  }
  return b;
}

}  // namespace pat
