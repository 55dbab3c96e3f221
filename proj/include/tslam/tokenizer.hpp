#pragma once

// Byte-level tokenizer: ids 0-255 are raw bytes, 256-259 are reserved specials.
// Chat-template role markers such as "<|user|>" stay literal bytes.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tslam/error.hpp"

namespace tslam {

inline constexpr int kEosId = 256;
inline constexpr int kPadId = 257;
inline constexpr int kBosId = 258;
inline constexpr int kUnkId = 259;
inline constexpr int kVocabSize = 260;

inline constexpr std::string_view kEosToken = "<|endoftext|>";
inline constexpr std::string_view kPadToken = "<|pad|>";
inline constexpr std::string_view kBosToken = "<|bos|>";
inline constexpr std::string_view kUnkToken = "<|unk|>";

inline constexpr std::array<std::string_view, 4> kSpecialTokens = {kEosToken, kPadToken, kBosToken, kUnkToken};

/// Token ids with a per-token target flag (see Model for the mask convention).
struct EncodedSequence {
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;

  std::size_t targets() const {
    std::size_t n = 0;
    for (std::size_t t = 1; t < mask.size(); ++t) n += mask[t] ? 1 : 0;
    return n;
  }
};

inline std::vector<int> tokenize(std::string_view text, bool add_bos = false) {
  std::vector<int> ids;
  ids.reserve(text.size() + 1);
  if (add_bos) ids.push_back(kBosId);
  std::size_t i = 0;
  while (i < text.size()) {
    bool matched = false;
    if (text[i] == '<') {
      for (std::size_t s = 0; s < kSpecialTokens.size(); ++s) {
        if (text.substr(i, kSpecialTokens[s].size()) == kSpecialTokens[s]) {
          ids.push_back(kEosId + static_cast<int>(s));
          i += kSpecialTokens[s].size();
          matched = true;
          break;
        }
      }
    }
    if (!matched) ids.push_back(static_cast<unsigned char>(text[i++]));
  }
  return ids;
}

inline std::string detokenize(std::span<const int> ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id >= 0 && id < 256) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    } else if (id >= kEosId && id < kVocabSize) {
      out.append(kSpecialTokens[static_cast<std::size_t>(id - kEosId)]);
    } else {
      throw DataError("unknown special id " + std::to_string(id));
    }
  }
  return out;
}

}  // namespace tslam
