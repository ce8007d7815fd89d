#include "steerkit/vocab.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

namespace steerkit {

Vocabulary Vocabulary::load(const std::string &path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open vocabulary file: " + path);
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(std::string("invalid vocabulary JSON: ") + e.what());
    }
    if (!j.is_object()) {
        throw FormatError("vocabulary file must be a JSON object of token -> index");
    }
    std::map<std::string, TokenId> entries;
    for (const auto &[token, id] : j.items()) {
        if (!id.is_number_integer()) {
            throw FormatError("vocabulary index for '" + token + "' is not an integer");
        }
        entries[token] = id.get<TokenId>();
    }
    return from_map(entries);
}

Vocabulary Vocabulary::from_map(const std::map<std::string, TokenId> &entries) {
    Vocabulary v;
    TokenId max_id = -1;
    for (const auto &[token, id] : entries) {
        if (token.empty()) {
            throw FormatError("empty token string in vocabulary");
        }
        if (id < 0) {
            throw FormatError("negative token index for '" + token + "'");
        }
        max_id = std::max(max_id, id);
    }
    v.by_id_.assign(static_cast<std::size_t>(max_id + 1), std::string());
    v.id_used_.assign(static_cast<std::size_t>(max_id + 1), false);
    for (const auto &[token, id] : entries) {
        if (v.id_used_[static_cast<std::size_t>(id)]) {
            throw FormatError("duplicate token index " + std::to_string(id));
        }
        v.id_used_[static_cast<std::size_t>(id)] = true;
        v.by_id_[static_cast<std::size_t>(id)] = token;
        v.by_text_.emplace(token, id);
        v.max_token_len_ = std::max(v.max_token_len_, token.size());
    }
    if (auto it = v.by_text_.find(kEosToken); it != v.by_text_.end()) {
        v.eos_id_ = it->second;
    }
    return v;
}

void Vocabulary::save(const std::string &path) const {
    nlohmann::json j = nlohmann::json::object();
    for (TokenId id = 0; id < static_cast<TokenId>(by_id_.size()); ++id) {
        if (id_used_[static_cast<std::size_t>(id)]) {
            j[by_id_[static_cast<std::size_t>(id)]] = id;
        }
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw FormatError("cannot open for writing: " + path);
    }
    out << j.dump(2) << "\n";
}

std::optional<TokenId> Vocabulary::id_of(std::string_view token) const {
    auto it = by_text_.find(std::string(token));
    if (it == by_text_.end()) {
        return std::nullopt;
    }
    return it->second;
}

const std::string &Vocabulary::text_of(TokenId id) const {
    if (id < 0 || id >= static_cast<TokenId>(by_id_.size()) ||
        !id_used_[static_cast<std::size_t>(id)]) {
        throw TokenizeError("unknown token id " + std::to_string(id));
    }
    return by_id_[static_cast<std::size_t>(id)];
}

TokenSequence Vocabulary::encode(std::string_view text) const {
    TokenSequence out;
    std::size_t i = 0;
    while (i < text.size()) {
        const std::size_t max_len = std::min(max_token_len_, text.size() - i);
        TokenId match = -1;
        std::size_t match_len = 0;
        for (std::size_t len = max_len; len >= 1; --len) {
            auto it = by_text_.find(std::string(text.substr(i, len)));
            if (it != by_text_.end()) {
                match = it->second;
                match_len = len;
                break;
            }
        }
        if (match < 0) {
            throw TokenizeError("no vocabulary entry covers byte 0x" +
                                std::to_string(static_cast<unsigned>(static_cast<unsigned char>(text[i]))) +
                                " at offset " + std::to_string(i));
        }
        out.push_back(match);
        i += match_len;
    }
    return out;
}

std::string Vocabulary::decode(const TokenSequence &tokens) const {
    std::string out;
    for (TokenId id : tokens) {
        out += text_of(id);
    }
    return out;
}

} // namespace steerkit
