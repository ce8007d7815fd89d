#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "steerkit/errors.hpp"

namespace steerkit {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

// End-of-sequence and the chat-template control tokens every vocabulary is
// expected to reserve.
inline constexpr const char *kEosToken = "<eos>";
inline constexpr const char *kUserToken = "<|User|>";
inline constexpr const char *kAssistantToken = "<|Assistant|>";
inline constexpr const char *kThinkOpenToken = "<think>";
inline constexpr const char *kThinkCloseToken = "</think>";

// Plain token-string -> index vocabulary with greedy longest-match encoding.
// The on-disk form is a UTF-8 JSON object mapping token text to its index.
class Vocabulary {
  public:
    Vocabulary() = default;

    static Vocabulary load(const std::string &path);
    static Vocabulary from_map(const std::map<std::string, TokenId> &entries);
    void save(const std::string &path) const;

    // One past the highest token id.
    int size() const { return static_cast<int>(by_id_.size()); }

    std::optional<TokenId> id_of(std::string_view token) const;
    // Throws TokenizeError for ids with no entry.
    const std::string &text_of(TokenId id) const;

    // Greedy longest-prefix-match tokenization. Throws TokenizeError when no
    // vocabulary entry covers the next byte.
    TokenSequence encode(std::string_view text) const;
    std::string decode(const TokenSequence &tokens) const;

    // -1 when the vocabulary has no end-of-sequence entry.
    TokenId eos_id() const { return eos_id_; }

  private:
    std::unordered_map<std::string, TokenId> by_text_;
    std::vector<std::string> by_id_; // empty string marks an unused id
    std::vector<bool> id_used_;
    std::size_t max_token_len_ = 0;
    TokenId eos_id_ = -1;
};

} // namespace steerkit
