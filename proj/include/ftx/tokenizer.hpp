#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ftx/error.hpp"
#include "ftx/io.hpp"
#include "ftx/types.hpp"

namespace ftx {

// Byte-level BPE vocabulary. IDs 1..N_V-3 are ordinary tokens (single bytes
// first, merge products after, in creation order); the top three IDs are the
// special tokens: mask = N_V-2, bos = N_V-1, eos = N_V. Immutable once
// trained; encode/decode are pure.
struct Vocabulary {
    std::vector<std::string> tokens;              // index i holds the token with ID i+1
    std::vector<std::pair<TokenId, TokenId>> merges;  // (left ID, right ID), in training order

    int base_count() const { return static_cast<int>(tokens.size() - merges.size()); }
    int n_vocab() const { return static_cast<int>(tokens.size()) + 3; }
    TokenId mask_token() const { return n_vocab() - 2; }
    TokenId bos_token() const { return n_vocab() - 1; }
    TokenId eos_token() const { return n_vocab(); }

    bool is_special(TokenId id) const { return id >= mask_token() && id <= eos_token(); }

    const std::string& token_text(TokenId id) const {
        if (id < 1 || id > static_cast<int>(tokens.size())) {
            throw contract_error("token_text: ID " + std::to_string(id) +
                                 " is not an ordinary token (1.." + std::to_string(tokens.size()) +
                                 ")");
        }
        return tokens[id - 1];
    }
};

namespace detail {

// Greedy leftmost replacement of the adjacent pair (left, right) by merged_id.
inline void apply_merge(std::vector<TokenId>& ids, TokenId left, TokenId right,
                        TokenId merged_id) {
    std::size_t w = 0;
    for (std::size_t r = 0; r < ids.size();) {
        if (r + 1 < ids.size() && ids[r] == left && ids[r + 1] == right) {
            ids[w++] = merged_id;
            r += 2;
        } else {
            ids[w++] = ids[r++];
        }
    }
    ids.resize(w);
}

}  // namespace detail

// Train a byte-level BPE vocabulary: start from the distinct bytes of the
// corpus (sorted by byte value), then repeatedly merge the most frequent
// adjacent token pair until the ordinary-token count reaches
// target_size - 3; the three special IDs sit on top. Ties between equally
// frequent pairs go to the lexicographically smallest (left text, right text)
// pair, so training is deterministic. Merging stops early if the corpus has
// collapsed to a single token per stretch and no pair remains.
inline Vocabulary train_bpe(const std::string& corpus, int target_size) {
    std::array<TokenId, 256> byte_to_id{};
    byte_to_id.fill(0);
    for (unsigned char c : corpus) byte_to_id[c] = 1;

    Vocabulary vocab;
    for (int b = 0; b < 256; ++b) {
        if (byte_to_id[b]) {
            vocab.tokens.push_back(std::string(1, static_cast<char>(b)));
            byte_to_id[b] = static_cast<TokenId>(vocab.tokens.size());
        }
    }
    const int distinct = static_cast<int>(vocab.tokens.size());
    if (target_size < distinct + 3) {
        throw contract_error("train_bpe: target size " + std::to_string(target_size) +
                             " below minimum " + std::to_string(distinct + 3) + " (" +
                             std::to_string(distinct) + " distinct bytes + 3 special tokens)");
    }

    std::vector<TokenId> ids;
    ids.reserve(corpus.size());
    for (unsigned char c : corpus) ids.push_back(byte_to_id[c]);

    while (static_cast<int>(vocab.tokens.size()) < target_size - 3) {
        std::map<std::pair<TokenId, TokenId>, long> counts;
        for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
            ++counts[{ids[i], ids[i + 1]}];
        }
        if (counts.empty()) {
            break;  // nothing left to merge
        }
        long best_count = 0;
        std::pair<TokenId, TokenId> best{};
        for (const auto& [pair, count] : counts) {
            if (count < best_count) continue;
            if (count > best_count) {
                best_count = count;
                best = pair;
                continue;
            }
            auto text = [&](const std::pair<TokenId, TokenId>& p) {
                return std::make_pair(vocab.tokens[p.first - 1], vocab.tokens[p.second - 1]);
            };
            if (text(pair) < text(best)) {
                best = pair;
            }
        }
        vocab.tokens.push_back(vocab.tokens[best.first - 1] + vocab.tokens[best.second - 1]);
        vocab.merges.push_back(best);
        detail::apply_merge(ids, best.first, best.second,
                            static_cast<TokenId>(vocab.tokens.size()));
    }
    return vocab;
}

// Text -> token IDs: bytes map to base tokens, then every merge rule is
// replayed in training order (leftmost-first within each rule). With frame,
// the result is wrapped as [bos, ..., eos].
inline std::vector<TokenId> encode(const std::string& text, const Vocabulary& vocab,
                                   bool frame = false) {
    std::array<TokenId, 256> byte_to_id{};
    byte_to_id.fill(0);
    for (int i = 0; i < vocab.base_count(); ++i) {
        byte_to_id[static_cast<unsigned char>(vocab.tokens[i][0])] = i + 1;
    }

    std::vector<TokenId> ids;
    ids.reserve(text.size() + 2);
    for (unsigned char c : text) {
        if (!byte_to_id[c]) {
            char buf[40];
            std::snprintf(buf, sizeof buf, "byte 0x%02x", c);
            throw contract_error(std::string("encode: ") + buf +
                                 " is not covered by the vocabulary");
        }
        ids.push_back(byte_to_id[c]);
    }
    for (std::size_t k = 0; k < vocab.merges.size(); ++k) {
        detail::apply_merge(ids, vocab.merges[k].first, vocab.merges[k].second,
                            static_cast<TokenId>(vocab.base_count() + 1 + k));
    }
    if (frame) {
        ids.insert(ids.begin(), vocab.bos_token());
        ids.push_back(vocab.eos_token());
    }
    return ids;
}

// Token IDs -> text. Special tokens are stripped, not rendered.
inline std::string decode(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
    std::string out;
    for (TokenId id : ids) {
        if (id < 1 || id > vocab.n_vocab()) {
            throw contract_error("decode: ID " + std::to_string(id) + " out of range 1.." +
                                 std::to_string(vocab.n_vocab()));
        }
        if (vocab.is_special(id)) continue;
        out += vocab.tokens[id - 1];
    }
    return out;
}

// Split a token stream into consecutive non-overlapping chunks of length
// <= max_len; concatenating the chunks reproduces the input.
inline std::vector<std::vector<TokenId>> chunk(const std::vector<TokenId>& ids, int max_len) {
    if (max_len < 2) {
        throw contract_error("chunk: maximum length must be >= 2, got " +
                             std::to_string(max_len));
    }
    std::vector<std::vector<TokenId>> out;
    for (std::size_t i = 0; i < ids.size(); i += max_len) {
        std::size_t end = std::min(ids.size(), i + max_len);
        out.emplace_back(ids.begin() + i, ids.begin() + end);
    }
    return out;
}

namespace detail {

// Token text escaping for the vocabulary file: printable ASCII except
// backslash stays literal; everything else becomes \xHH. '#' is escaped too
// so no token line can collide with the "#merges" separator.
inline std::string escape_token(const std::string& s) {
    std::string out;
    for (unsigned char c : s) {
        if (c > 0x20 && c < 0x7f && c != '\\' && c != '#') {
            out += static_cast<char>(c);
        } else {
            char buf[8];
            std::snprintf(buf, sizeof buf, "\\x%02x", c);
            out += buf;
        }
    }
    return out;
}

inline std::string unescape_token(const std::string& s, int lineno) {
    std::string out;
    for (std::size_t i = 0; i < s.size();) {
        if (s[i] != '\\') {
            out += s[i++];
            continue;
        }
        if (i + 3 >= s.size() || s[i + 1] != 'x') {
            throw parse_error(parse_error::kind::malformed,
                              "vocabulary line " + std::to_string(lineno) +
                                  ": bad escape sequence");
        }
        auto hex = [&](char c) -> int {
            if (c >= '0' && c <= '9') return c - '0';
            if (c >= 'a' && c <= 'f') return c - 'a' + 10;
            if (c >= 'A' && c <= 'F') return c - 'A' + 10;
            throw parse_error(parse_error::kind::malformed,
                              "vocabulary line " + std::to_string(lineno) + ": bad hex digit");
        };
        out += static_cast<char>(hex(s[i + 2]) * 16 + hex(s[i + 3]));
        i += 4;
    }
    return out;
}

}  // namespace detail

// Vocabulary file: one escaped token per line in ID order, a literal
// "#merges" separator, then one "left right" ID pair per line in training
// order. The three special tokens are implicit (always the top three IDs).
inline std::string format_vocabulary(const Vocabulary& vocab) {
    std::ostringstream out;
    for (const auto& t : vocab.tokens) {
        out << detail::escape_token(t) << "\n";
    }
    out << "#merges\n";
    for (const auto& [l, r] : vocab.merges) {
        out << l << " " << r << "\n";
    }
    return out.str();
}

inline void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
    atomic_write_file(path, format_vocabulary(vocab));
}

inline Vocabulary parse_vocabulary(const std::string& text) {
    Vocabulary vocab;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    bool in_merges = false;
    bool saw_separator = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!in_merges) {
            if (line == "#merges") {
                in_merges = true;
                saw_separator = true;
                continue;
            }
            vocab.tokens.push_back(detail::unescape_token(line, lineno));
        } else {
            if (line.empty()) continue;
            std::istringstream ls(line);
            TokenId l = 0, r = 0;
            if (!(ls >> l >> r)) {
                throw parse_error(parse_error::kind::malformed,
                                  "vocabulary line " + std::to_string(lineno) +
                                      ": expected two merge IDs");
            }
            vocab.merges.push_back({l, r});
        }
    }
    if (!saw_separator) {
        throw parse_error(parse_error::kind::malformed, "vocabulary: missing #merges section");
    }
    // Validate the reconstruction invariant: base tokens are single bytes and
    // each merge reproduces the token at its position.
    const int base = vocab.base_count();
    if (base < 0) {
        throw parse_error(parse_error::kind::malformed,
                          "vocabulary: more merges than non-base tokens");
    }
    for (int i = 0; i < base; ++i) {
        if (vocab.tokens[i].size() != 1) {
            throw parse_error(parse_error::kind::malformed,
                              "vocabulary: token " + std::to_string(i + 1) +
                                  " should be a single byte");
        }
    }
    for (std::size_t k = 0; k < vocab.merges.size(); ++k) {
        auto [l, r] = vocab.merges[k];
        int produced = base + static_cast<int>(k) + 1;
        if (l < 1 || r < 1 || l >= produced || r >= produced) {
            throw parse_error(parse_error::kind::malformed,
                              "vocabulary: merge " + std::to_string(k + 1) +
                                  " references a later or invalid token");
        }
        if (vocab.tokens[l - 1] + vocab.tokens[r - 1] != vocab.tokens[produced - 1]) {
            throw parse_error(parse_error::kind::malformed,
                              "vocabulary: merge " + std::to_string(k + 1) +
                                  " does not reproduce token " + std::to_string(produced));
        }
    }
    return vocab;
}

inline Vocabulary load_vocabulary(const std::string& path) {
    return parse_vocabulary(read_file(path));
}

}  // namespace ftx
