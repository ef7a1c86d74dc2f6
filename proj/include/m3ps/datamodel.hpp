#pragma once

#include "m3ps/tensor.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace m3ps {

/// Malformed input line; carries the 1-based line number.
class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

class SchemaError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Tokenization

enum class TokenizerMode { Word, Char };

inline std::string to_string(TokenizerMode m) { return m == TokenizerMode::Word ? "word" : "char"; }

inline TokenizerMode tokenizer_mode_from_string(std::string_view s) {
    if (s == "word") return TokenizerMode::Word;
    if (s == "char") return TokenizerMode::Char;
    throw Error("unknown tokenizer '" + std::string(s) + "' (expected word|char)");
}

/// Splits UTF-8 text into code points, keeping each as its byte string.
inline std::vector<std::string> utf8_chars(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        std::size_t len = 1;
        if (c >= 0xF0)
            len = 4;
        else if (c >= 0xE0)
            len = 3;
        else if (c >= 0xC0)
            len = 2;
        len = std::min(len, text.size() - i);
        out.emplace_back(text.substr(i, len));
        i += len;
    }
    return out;
}

inline std::size_t utf8_length(std::string_view text) { return utf8_chars(text).size(); }

inline bool is_space(std::string_view ch) {
    return ch.size() == 1 && (ch[0] == ' ' || ch[0] == '\t' || ch[0] == '\n' || ch[0] == '\r');
}

/// Word mode splits on ASCII whitespace. Char mode yields every non-space code point.
inline std::vector<std::string> tokenize(std::string_view text, TokenizerMode mode) {
    std::vector<std::string> out;
    if (mode == TokenizerMode::Char) {
        for (auto& ch : utf8_chars(text))
            if (!is_space(ch)) out.push_back(std::move(ch));
        return out;
    }
    std::string cur;
    for (char c : text) {
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

inline std::string join(const std::vector<std::string>& tokens, TokenizerMode mode) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i > 0 && mode == TokenizerMode::Word) out.push_back(' ');
        out += tokens[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Regions

struct RegionDescriptor {
    std::vector<double> feature;
    std::array<double, 4> box{};  // x1, y1, x2, y2 normalized to [0,1]
    double area = 0.0;
    std::vector<double> class_dist;

    bool operator==(const RegionDescriptor&) const = default;
};

inline double box_area(const std::array<double, 4>& b) { return (b[2] - b[0]) * (b[3] - b[1]); }

/// Checks box geometry and the class simplex; recomputes area from the box.
inline void validate_region(RegionDescriptor& r) {
    const auto& b = r.box;
    for (double c : b)
        if (!(c >= 0.0 && c <= 1.0)) throw ValidationError("box coordinate outside [0,1]");
    if (b[0] > b[2] || b[1] > b[3]) throw ValidationError("box corners out of order (need x1<=x2, y1<=y2)");
    double sum = 0.0;
    for (double p : r.class_dist) {
        if (!(p >= 0.0)) throw ValidationError("class_dist has a negative or non-finite entry");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw ValidationError("class_dist does not sum to 1");
    for (double v : r.feature)
        if (!std::isfinite(v)) throw ValidationError("region feature is not finite");
    r.area = box_area(b);
}

/// Exactly `capacity` slots after padding; slots past valid_count() are zero.
struct RegionSet {
    std::vector<RegionDescriptor> slots;
    std::vector<bool> valid;
    int capacity = 0;

    int valid_count() const { return static_cast<int>(std::count(valid.begin(), valid.end(), true)); }
    int feature_dim() const { return slots.empty() ? 0 : static_cast<int>(slots.front().feature.size()); }
    int class_dim() const { return slots.empty() ? 0 : static_cast<int>(slots.front().class_dist.size()); }

    bool operator==(const RegionSet&) const = default;
};

/// Keeps the first `capacity` regions in input order and zero-pads the rest.
inline RegionSet make_region_set(std::vector<RegionDescriptor> regions, int capacity, int d_img, int k_cls) {
    require(capacity >= 1, "region capacity must be >= 1");
    if (regions.size() > static_cast<std::size_t>(capacity)) regions.resize(static_cast<std::size_t>(capacity));
    RegionSet rs;
    rs.capacity = capacity;
    for (auto& r : regions) {
        if (static_cast<int>(r.feature.size()) != d_img) throw ShapeError("region feature dimension mismatch");
        if (static_cast<int>(r.class_dist.size()) != k_cls) throw ShapeError("class_dist dimension mismatch");
        rs.slots.push_back(std::move(r));
        rs.valid.push_back(true);
    }
    while (rs.slots.size() < static_cast<std::size_t>(capacity)) {
        RegionDescriptor pad;
        pad.feature.assign(static_cast<std::size_t>(d_img), 0.0);
        pad.class_dist.assign(static_cast<std::size_t>(k_cls), 0.0);
        rs.slots.push_back(std::move(pad));
        rs.valid.push_back(false);
    }
    return rs;
}

// ---------------------------------------------------------------------------
// Attribute vocabulary

struct AttributeVocabulary {
    std::vector<std::string> entries;
    std::unordered_map<std::string, int> index;
    int threshold = 0;

    AttributeVocabulary() = default;
    explicit AttributeVocabulary(std::vector<std::string> e, int thr = 0) : entries(std::move(e)), threshold(thr) {
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (!index.emplace(entries[i], static_cast<int>(i)).second)
                throw ValidationError("duplicate attribute '" + entries[i] + "'");
        }
    }

    int size() const { return static_cast<int>(entries.size()); }
    int find(const std::string& s) const {
        auto it = index.find(s);
        return it == index.end() ? -1 : it->second;
    }
    bool operator==(const AttributeVocabulary& o) const { return entries == o.entries; }
};

/// Part-of-speech predicate used when building attribute vocabularies.
enum class PosTag { Noun, Adjective, Other };
using PosTagger = std::function<PosTag(std::string_view)>;

/// Accepts every token as a noun; corpora without a tagger keep all tokens.
inline PosTag accept_all_tagger(std::string_view) { return PosTag::Noun; }

/// Document-frequency cutoffs for the three product categories of the
/// e-commerce corpus this schema mirrors.
inline const std::map<std::string, int>& category_thresholds() {
    static const std::map<std::string, int> t{
        {"home_appliances", 5000}, {"clothing", 10000}, {"cases_bags", 1000}};
    return t;
}

/// Tokens of >= 2 characters, tagged noun/adjective, appearing in strictly
/// more than `threshold` summaries. Ordered by descending document frequency
/// then lexicographically.
inline AttributeVocabulary build_attribute_vocab(const std::vector<std::string>& summaries,
                                                 const PosTagger& tagger, int threshold,
                                                 TokenizerMode mode = TokenizerMode::Word) {
    require(threshold >= 1, "attribute threshold must be >= 1");
    std::unordered_map<std::string, int> df;
    for (const auto& s : summaries) {
        std::set<std::string> seen;
        for (auto& tok : tokenize(s, mode)) seen.insert(std::move(tok));
        for (const auto& tok : seen) ++df[tok];
    }
    std::vector<std::pair<std::string, int>> kept;
    for (const auto& [tok, n] : df) {
        if (n <= threshold || utf8_length(tok) < 2) continue;
        const PosTag tag = tagger ? tagger(tok) : PosTag::Noun;
        if (tag == PosTag::Other) continue;
        kept.emplace_back(tok, n);
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    std::vector<std::string> entries;
    entries.reserve(kept.size());
    for (auto& [tok, n] : kept) entries.push_back(tok);
    return AttributeVocabulary(std::move(entries), threshold);
}

/// Multi-hot over the vocabulary; unknown attributes are skipped and counted.
inline std::vector<double> attributes_to_multihot(const std::vector<std::string>& tokens,
                                                  const AttributeVocabulary& vocab,
                                                  std::size_t* dropped = nullptr) {
    std::vector<double> out(static_cast<std::size_t>(vocab.size()), 0.0);
    std::size_t miss = 0;
    for (const auto& t : tokens) {
        const int k = vocab.find(t);
        if (k < 0)
            ++miss;
        else
            out[static_cast<std::size_t>(k)] = 1.0;
    }
    if (dropped) *dropped += miss;
    return out;
}

inline void save_attribute_vocab(const AttributeVocabulary& v, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw Error("cannot write " + path);
    for (const auto& e : v.entries) f << e << '\n';
}

inline AttributeVocabulary load_attribute_vocab(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot read " + path);
    std::vector<std::string> entries;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (utf8_length(line) < 2) throw ValidationError("attribute entry shorter than 2 characters: " + line);
        entries.push_back(line);
    }
    return AttributeVocabulary(std::move(entries));
}

// ---------------------------------------------------------------------------
// Records

struct Limits {
    int max_text_len = 400;  // L
    int max_regions = 36;    // M
    TokenizerMode tokenizer = TokenizerMode::Word;
};

struct ProductRecord {
    std::string id;
    std::string title;
    std::string description;
    std::string summary;
    std::vector<std::string> text_tokens;  // tokenize(title + description), truncated to L
    RegionSet region_set;
    std::vector<double> attributes;  // multi-hot y^a
    std::size_t dropped_attributes = 0;

    bool operator==(const ProductRecord&) const = default;
};

inline std::vector<std::string> source_tokens(const std::string& title, const std::string& description,
                                              const Limits& limits) {
    auto toks = tokenize(title + " " + description, limits.tokenizer);
    if (toks.size() > static_cast<std::size_t>(limits.max_text_len))
        toks.resize(static_cast<std::size_t>(limits.max_text_len));
    return toks;
}

namespace detail {

inline const nlohmann::json& field(const nlohmann::json& obj, const char* key, std::size_t line) {
    auto it = obj.find(key);
    if (it == obj.end()) throw SchemaError("line " + std::to_string(line) + ": missing key '" + key + "'");
    return *it;
}

inline std::vector<double> real_list(const nlohmann::json& j, const char* what, std::size_t line) {
    if (!j.is_array()) throw SchemaError("line " + std::to_string(line) + ": '" + what + "' must be an array");
    std::vector<double> out;
    out.reserve(j.size());
    for (const auto& v : j) {
        if (!v.is_number()) throw SchemaError("line " + std::to_string(line) + ": '" + what + "' must hold numbers");
        out.push_back(v.get<double>());
    }
    return out;
}

inline std::string text_field(const nlohmann::json& obj, const char* key, std::size_t line) {
    const auto& v = field(obj, key, line);
    if (!v.is_string()) throw SchemaError("line " + std::to_string(line) + ": '" + key + "' must be a string");
    return v.get<std::string>();
}

}  // namespace detail

/// Parses one JSON object into a record. `d_img`/`k_cls` are fixed by the
/// first region seen when passed as 0.
inline ProductRecord parse_record(const std::string& text, std::size_t line, const AttributeVocabulary& vocab,
                                  const Limits& limits, int& d_img, int& k_cls) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(line, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(line, "expected a JSON object");

    ProductRecord r;
    r.id = detail::text_field(j, "id", line);
    r.title = detail::text_field(j, "title", line);
    r.description = detail::text_field(j, "description", line);
    r.summary = detail::text_field(j, "summary", line);
    r.text_tokens = source_tokens(r.title, r.description, limits);

    const auto& regions = detail::field(j, "regions", line);
    if (!regions.is_array()) throw SchemaError("line " + std::to_string(line) + ": 'regions' must be an array");
    std::vector<RegionDescriptor> descs;
    for (const auto& rj : regions) {
        if (!rj.is_object()) throw SchemaError("line " + std::to_string(line) + ": region must be an object");
        RegionDescriptor d;
        d.feature = detail::real_list(detail::field(rj, "feature", line), "feature", line);
        auto box = detail::real_list(detail::field(rj, "box", line), "box", line);
        if (box.size() != 4) throw SchemaError("line " + std::to_string(line) + ": box needs 4 numbers");
        std::copy(box.begin(), box.end(), d.box.begin());
        d.class_dist = detail::real_list(detail::field(rj, "class_dist", line), "class_dist", line);
        try {
            validate_region(d);
        } catch (const ValidationError& e) {
            throw ValidationError("line " + std::to_string(line) + ": " + e.what());
        }
        if (d_img == 0) d_img = static_cast<int>(d.feature.size());
        if (k_cls == 0) k_cls = static_cast<int>(d.class_dist.size());
        if (static_cast<int>(d.feature.size()) != d_img || static_cast<int>(d.class_dist.size()) != k_cls)
            throw ValidationError("line " + std::to_string(line) + ": region dimensions differ from earlier regions");
        descs.push_back(std::move(d));
    }
    r.region_set = make_region_set(std::move(descs), limits.max_regions, d_img, k_cls);

    const auto& attrs = detail::field(j, "attributes", line);
    if (!attrs.is_array()) throw SchemaError("line " + std::to_string(line) + ": 'attributes' must be an array");
    std::vector<std::string> names;
    for (const auto& a : attrs) {
        if (!a.is_string()) throw SchemaError("line " + std::to_string(line) + ": attributes must be strings");
        names.push_back(a.get<std::string>());
    }
    r.attributes = attributes_to_multihot(names, vocab, &r.dropped_attributes);
    return r;
}

/// Reads product-record JSONL. Blank lines are skipped.
inline std::vector<ProductRecord> read_jsonl(std::istream& in, const AttributeVocabulary& vocab, const Limits& limits,
                                             int d_img = 0, int k_cls = 0) {
    std::vector<ProductRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        out.push_back(parse_record(line, lineno, vocab, limits, d_img, k_cls));
    }
    return out;
}

inline std::vector<ProductRecord> load_jsonl(const std::string& path, const AttributeVocabulary& vocab,
                                             const Limits& limits) {
    std::ifstream f(path);
    if (!f) throw Error("cannot read " + path);
    return read_jsonl(f, vocab, limits);
}

inline nlohmann::json record_to_json(const ProductRecord& r, const AttributeVocabulary& vocab) {
    nlohmann::json regions = nlohmann::json::array();
    for (std::size_t i = 0; i < r.region_set.slots.size(); ++i) {
        if (!r.region_set.valid[i]) continue;
        const auto& d = r.region_set.slots[i];
        regions.push_back({{"feature", d.feature},
                           {"box", std::vector<double>(d.box.begin(), d.box.end())},
                           {"class_dist", d.class_dist}});
    }
    nlohmann::json attrs = nlohmann::json::array();
    for (std::size_t k = 0; k < r.attributes.size() && k < vocab.entries.size(); ++k)
        if (r.attributes[k] > 0.5) attrs.push_back(vocab.entries[k]);
    return {{"id", r.id},
            {"title", r.title},
            {"description", r.description},
            {"summary", r.summary},
            {"regions", regions},
            {"attributes", attrs}};
}

inline void write_jsonl(std::ostream& out, const std::vector<ProductRecord>& records, const AttributeVocabulary& vocab) {
    for (const auto& r : records) out << record_to_json(r, vocab).dump() << '\n';
}

inline void save_jsonl(const std::string& path, const std::vector<ProductRecord>& records,
                       const AttributeVocabulary& vocab) {
    std::ofstream f(path);
    if (!f) throw Error("cannot write " + path);
    write_jsonl(f, records, vocab);
}

}  // namespace m3ps
