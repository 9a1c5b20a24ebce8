#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "emofuse/errors.hpp"

namespace emofuse {

// Token inventory with fixed special ids: [PAD]=0, [UNK]=1, [CLS]=2, [SEP]=3.
// Word-internal pieces carry the "##" prefix.
class Vocabulary {
public:
    static constexpr std::size_t pad_id = 0;
    static constexpr std::size_t unk_id = 1;
    static constexpr std::size_t cls_id = 2;
    static constexpr std::size_t sep_id = 3;
    static constexpr std::string_view continuation = "##";

    static const std::vector<std::string>& specials() {
        static const std::vector<std::string> s = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
        return s;
    }

    Vocabulary() : Vocabulary(specials()) {}

    explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
        if (tokens_.size() < specials().size() ||
            !std::equal(specials().begin(), specials().end(), tokens_.begin())) {
            throw DataError("vocabulary must start with [PAD], [UNK], [CLS], [SEP]");
        }
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (tokens_[i].empty()) throw DataError("vocabulary token " + std::to_string(i) + " is empty");
            if (!index_.emplace(tokens_[i], i).second) {
                throw DataError("duplicate vocabulary token '" + tokens_[i] + "'");
            }
        }
    }

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    const std::string& token(std::size_t id) const { return tokens_.at(id); }
    bool contains(std::string_view t) const { return index_.contains(std::string(t)); }

    std::optional<std::size_t> find(std::string_view t) const {
        auto it = index_.find(std::string(t));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    // One token per line; the line number is the id.
    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw DataError("cannot write vocabulary to " + path.string());
        for (const auto& t : tokens_) out << t << '\n';
    }

    static Vocabulary load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw DataError("cannot read vocabulary " + path.string());
        std::vector<std::string> tokens;
        std::string line;
        while (std::getline(in, line)) tokens.push_back(line);
        return Vocabulary(std::move(tokens));
    }

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct TokenizedSequence {
    std::vector<std::size_t> ids;
    std::vector<int> mask;
    std::size_t true_length = 0;

    friend bool operator==(const TokenizedSequence&, const TokenizedSequence&) = default;
};

namespace detail {

inline std::string to_lower_ascii(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) words.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

// Byte offsets of UTF-8 code point starts, plus the end offset.
inline std::vector<std::size_t> char_boundaries(std::string_view word) {
    std::vector<std::size_t> b;
    for (std::size_t i = 0; i < word.size(); ++i) {
        if ((static_cast<unsigned char>(word[i]) & 0xC0) != 0x80) b.push_back(i);
    }
    b.push_back(word.size());
    return b;
}

inline std::string strip_continuation(const std::string& piece) {
    return piece.starts_with(Vocabulary::continuation) ? piece.substr(Vocabulary::continuation.size()) : piece;
}

}  // namespace detail

// Lowercase and whitespace-split.
inline std::vector<std::string> normalize_words(std::string_view text) {
    return detail::split_words(detail::to_lower_ascii(text));
}

// Specials, then single characters (most frequent first, ties lexicographic),
// then BPE-style merges of the most frequent adjacent pair until target_size.
inline Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t target_size) {
    if (target_size < 10) throw ContractError("build_vocab: target_size must be at least 10");
    if (corpus.empty()) throw ContractError("build_vocab: corpus is empty");

    std::map<std::string, std::size_t> word_freq;
    for (const auto& text : corpus)
        for (auto& w : normalize_words(text)) ++word_freq[w];

    struct Word {
        std::vector<std::string> symbols;
        std::size_t freq;
    };
    std::vector<Word> words;
    std::map<std::string, std::size_t> alphabet;
    for (const auto& [w, f] : word_freq) {
        auto b = detail::char_boundaries(w);
        Word entry{{}, f};
        for (std::size_t i = 0; i + 1 < b.size(); ++i) {
            std::string sym = w.substr(b[i], b[i + 1] - b[i]);
            if (i > 0) sym = std::string(Vocabulary::continuation) + sym;
            alphabet[sym] += f;
            entry.symbols.push_back(std::move(sym));
        }
        words.push_back(std::move(entry));
    }

    std::vector<std::string> tokens = Vocabulary::specials();
    std::vector<std::pair<std::string, std::size_t>> chars(alphabet.begin(), alphabet.end());
    std::stable_sort(chars.begin(), chars.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::unordered_map<std::string, bool> present;
    for (const auto& t : tokens) present[t] = true;
    for (const auto& [sym, f] : chars) {
        if (tokens.size() >= target_size) break;
        tokens.push_back(sym);
        present[sym] = true;
    }

    while (tokens.size() < target_size) {
        std::map<std::pair<std::string, std::string>, std::size_t> pairs;
        for (const auto& w : words)
            for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) pairs[{w.symbols[i], w.symbols[i + 1]}] += w.freq;
        if (pairs.empty()) break;
        // std::map iterates in lexicographic order, so strict > keeps the smallest pair on ties.
        auto best = pairs.begin();
        for (auto it = pairs.begin(); it != pairs.end(); ++it)
            if (it->second > best->second) best = it;
        const auto [left, right] = best->first;
        const std::string merged = left + detail::strip_continuation(right);
        for (auto& w : words) {
            std::vector<std::string> next;
            next.reserve(w.symbols.size());
            for (std::size_t i = 0; i < w.symbols.size(); ++i) {
                if (i + 1 < w.symbols.size() && w.symbols[i] == left && w.symbols[i + 1] == right) {
                    next.push_back(merged);
                    ++i;
                } else {
                    next.push_back(w.symbols[i]);
                }
            }
            w.symbols = std::move(next);
        }
        if (!present[merged]) {
            tokens.push_back(merged);
            present[merged] = true;
        }
    }
    return Vocabulary(std::move(tokens));
}

// Greedy longest-match-first segmentation of one normalized word; a word that
// cannot be fully covered becomes a single [UNK].
inline std::vector<std::size_t> segment_word(std::string_view word, const Vocabulary& vocab) {
    auto b = detail::char_boundaries(word);
    std::vector<std::size_t> pieces;
    std::size_t start = 0;
    while (start + 1 < b.size()) {
        std::optional<std::size_t> found;
        std::size_t end = b.size() - 1;
        for (; end > start; --end) {
            std::string cand(word.substr(b[start], b[end] - b[start]));
            if (start > 0) cand = std::string(Vocabulary::continuation) + cand;
            if ((found = vocab.find(cand))) break;
        }
        if (!found) return {Vocabulary::unk_id};
        pieces.push_back(*found);
        start = end;
    }
    return pieces;
}

inline TokenizedSequence encode(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
    if (max_len < 2) throw ContractError("encode: max_len must be at least 2");
    std::vector<std::size_t> content;
    for (const auto& w : normalize_words(text)) {
        for (auto id : segment_word(w, vocab)) content.push_back(id);
        if (content.size() >= max_len - 2) break;
    }
    if (content.size() > max_len - 2) content.resize(max_len - 2);

    TokenizedSequence seq;
    seq.ids.assign(max_len, Vocabulary::pad_id);
    seq.mask.assign(max_len, 0);
    seq.ids[0] = Vocabulary::cls_id;
    std::copy(content.begin(), content.end(), seq.ids.begin() + 1);
    seq.true_length = content.size() + 2;
    seq.ids[seq.true_length - 1] = Vocabulary::sep_id;
    std::fill_n(seq.mask.begin(), seq.true_length, 1);
    return seq;
}

inline std::vector<TokenizedSequence> batch_encode(std::span<const std::string> texts, const Vocabulary& vocab,
                                                   std::size_t max_len) {
    std::vector<TokenizedSequence> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(encode(t, vocab, max_len));
    return out;
}

// Inverse of encode for in-vocabulary text: pieces re-joined, "##" glued.
inline std::string decode(const TokenizedSequence& seq, const Vocabulary& vocab) {
    std::string out;
    for (std::size_t i = 1; i + 1 < seq.true_length; ++i) {
        const auto& t = vocab.token(seq.ids[i]);
        if (t.starts_with(Vocabulary::continuation)) {
            out += t.substr(Vocabulary::continuation.size());
        } else {
            if (!out.empty()) out += ' ';
            out += t;
        }
    }
    return out;
}

}  // namespace emofuse
