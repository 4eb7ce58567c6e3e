// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "triforce/model_config.hpp"

namespace triforce {

/// Byte-level tokenizer: ids 0..255 are raw bytes, followed by specials.
/// Ids above PAD up to vocab_size - 1 are reserved and decode to nothing.
class ByteTokenizer {
 public:
  static constexpr Token kBos = 256;
  static constexpr Token kEos = 257;
  static constexpr Token kPad = 258;
  static constexpr std::uint32_t kMinVocab = 259;

  explicit ByteTokenizer(std::uint32_t vocab_size = 260) : vocab_size_(vocab_size) {
    if (vocab_size_ < kMinVocab) {
      throw ContractError("byte tokenizer needs vocab_size >= " + std::to_string(kMinVocab));
    }
  }

  std::uint32_t vocab_size() const { return vocab_size_; }

  /// BOS followed by one token per byte.
  std::vector<Token> tokenize(std::string_view bytes) const {
    std::vector<Token> out;
    out.reserve(bytes.size() + 1);
    out.push_back(kBos);
    for (unsigned char b : bytes) out.push_back(static_cast<Token>(b));
    return out;
  }

  std::string detokenize(const std::vector<Token>& tokens) const {
    std::string out;
    out.reserve(tokens.size());
    for (Token t : tokens) {
      if (t < 0 || static_cast<std::uint32_t>(t) >= vocab_size_) {
        throw ContractError("token id " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(vocab_size_));
      }
      if (t < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
  }

  static bool is_special(Token t) { return t >= 256; }

 private:
  std::uint32_t vocab_size_;
};

}  // namespace triforce
