#pragma once

#include "m3ps/datamodel.hpp"

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace m3ps {

/// Reserved token ids shared by encoder and decoder.
namespace special {
inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kPad = 2;
inline constexpr int kCls = 3;
inline constexpr int kUnk = 4;
inline constexpr int kCount = 5;
}  // namespace special

class TokenVocabulary {
public:
    TokenVocabulary() : tokens_{"<bos>", "<eos>", "<pad>", "<cls>", "<unk>"} { reindex(); }

    explicit TokenVocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
        require(tokens_.size() >= special::kCount && tokens_[special::kBos] == "<bos>" &&
                    tokens_[special::kEos] == "<eos>" && tokens_[special::kPad] == "<pad>" &&
                    tokens_[special::kCls] == "<cls>" && tokens_[special::kUnk] == "<unk>",
                "token vocabulary must start with the reserved tokens");
        reindex();
    }

    /// Sorted set of every token in the records' sources and summaries.
    static TokenVocabulary build(const std::vector<ProductRecord>& records, TokenizerMode mode) {
        std::map<std::string, int> seen;
        for (const auto& r : records) {
            for (const auto& t : r.text_tokens) seen.emplace(t, 0);
            for (const auto& t : tokenize(r.summary, mode)) seen.emplace(t, 0);
        }
        TokenVocabulary v;
        for (const auto& [tok, _] : seen)
            if (!v.index_.contains(tok)) v.tokens_.push_back(tok);
        v.reindex();
        return v;
    }

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

    int id(const std::string& tok) const {
        auto it = index_.find(tok);
        return it == index_.end() ? special::kUnk : it->second;
    }

    std::vector<int> encode(const std::vector<std::string>& toks) const {
        std::vector<int> out;
        out.reserve(toks.size());
        for (const auto& t : toks) out.push_back(id(t));
        return out;
    }

    /// Drops reserved ids.
    std::vector<std::string> decode(const std::vector<int>& ids) const {
        std::vector<std::string> out;
        for (int i : ids)
            if (i >= special::kCount && i < size()) out.push_back(token(i));
        return out;
    }

    bool operator==(const TokenVocabulary& o) const { return tokens_ == o.tokens_; }

private:
    void reindex() {
        index_.clear();
        for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<int>(i));
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

/// Encoder input: tokens then a trailing [CLS], optionally followed by padding.
struct TokenSequence {
    std::vector<int> ids;
    std::vector<bool> mask;
    int cls_position = -1;

    int length() const { return static_cast<int>(ids.size()); }
    int valid_count() const { return cls_position + 1; }
};

inline TokenSequence make_source_sequence(const std::vector<int>& token_ids, int max_len, int pad_to = 0) {
    require(static_cast<int>(token_ids.size()) <= max_len, "source sequence longer than L; truncate upstream");
    TokenSequence s;
    s.ids = token_ids;
    s.ids.push_back(special::kCls);
    s.mask.assign(s.ids.size(), true);
    s.cls_position = static_cast<int>(s.ids.size()) - 1;
    while (static_cast<int>(s.ids.size()) < pad_to) {
        s.ids.push_back(special::kPad);
        s.mask.push_back(false);
    }
    return s;
}

/// Decoder sequence [BOS, y_1..y_T, EOS] with the summary truncated to max_len.
inline std::vector<int> make_target_sequence(std::vector<int> summary_ids, int max_len) {
    if (static_cast<int>(summary_ids.size()) > max_len) summary_ids.resize(static_cast<std::size_t>(max_len));
    std::vector<int> out;
    out.reserve(summary_ids.size() + 2);
    out.push_back(special::kBos);
    out.insert(out.end(), summary_ids.begin(), summary_ids.end());
    out.push_back(special::kEos);
    return out;
}

}  // namespace m3ps
