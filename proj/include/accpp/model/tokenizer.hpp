#pragma once

#include <algorithm>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "accpp/core/error.hpp"

namespace accpp {

/// Greedy longest-match tokenizer over the bundle vocabulary. Adequate for the
/// word-level toy vocabularies; real BPE exports ship pre-tokenized ids.
class Tokenizer {
 public:
  explicit Tokenizer(const std::vector<std::string>& vocab) : vocab_(vocab) {
    for (std::size_t i = 0; i < vocab.size(); ++i) {
      if (vocab[i].empty()) continue;
      lookup_.emplace(vocab[i], static_cast<int>(i));
      max_len_ = std::max(max_len_, vocab[i].size());
    }
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t len = std::min(max_len_, text.size() - pos);
      bool matched = false;
      for (; len > 0; --len) {
        auto it = lookup_.find(std::string(text.substr(pos, len)));
        if (it != lookup_.end()) {
          ids.push_back(it->second);
          pos += len;
          matched = true;
          break;
        }
      }
      if (!matched)
        throw Error(ErrorCode::out_of_range,
                    "tokenizer: no vocabulary entry covers '" + std::string(text.substr(pos, 8)) + "'");
    }
    return ids;
  }

  const std::string& decode(int id) const {
    ACCPP_REQUIRE(id >= 0 && static_cast<std::size_t>(id) < vocab_.size(), ErrorCode::out_of_range,
                  "tokenizer: id out of vocabulary");
    return vocab_[static_cast<std::size_t>(id)];
  }

  std::vector<std::string> decode_all(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(decode(id));
    return out;
  }

  int id_of(const std::string& token) const {
    auto it = lookup_.find(token);
    ACCPP_REQUIRE(it != lookup_.end(), ErrorCode::out_of_range, "tokenizer: unknown token '" + token + "'");
    return it->second;
  }

  bool contains(const std::string& token) const { return lookup_.count(token) != 0; }
  std::size_t size() const { return vocab_.size(); }

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int> lookup_;
  std::size_t max_len_ = 0;
};

}  // namespace accpp
