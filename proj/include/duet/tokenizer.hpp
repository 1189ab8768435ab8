// Copyright 2026 The Duet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Byte-level tokenizer: ids are raw byte values 0..255 plus PAD = 256.
// Truncation happens at tokenization time; padding carries an explicit mask.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace duet {

inline constexpr int kPadToken = 256;
inline constexpr int kVocabSize = 257;  // 256 byte values + PAD

struct TokenRow {
    std::vector<int> ids;           // length max_len
    std::vector<std::uint8_t> mask;  // 1 = real token, 0 = PAD
};

// One batch of token rows, padded to a common length L. L never exceeds the
// max_len the rows were tokenized with; trailing all-PAD columns are dropped,
// which leaves embeddings unchanged (PAD invariance).
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<int> ids;            // batch x length, row-major
    std::vector<std::uint8_t> mask;  // batch x length

    int id_at(std::size_t b, std::size_t t) const { return ids[b * length + t]; }
    bool real_at(std::size_t b, std::size_t t) const { return mask[b * length + t] != 0; }

    std::size_t real_count(std::size_t b) const {
        std::size_t c = 0;
        for (std::size_t t = 0; t < length; ++t) {
            c += real_at(b, t) ? 1 : 0;
        }
        return c;
    }
};

// Byte-level tokenization with truncation to max_len and right-padding.
inline TokenRow tokenize(const std::string& text, std::size_t max_len) {
    if (text.empty()) {
        throw std::invalid_argument("tokenize: empty text");
    }
    if (max_len == 0) {
        throw std::invalid_argument("tokenize: max_len must be positive");
    }
    TokenRow row;
    row.ids.assign(max_len, kPadToken);
    row.mask.assign(max_len, 0);
    std::size_t n = std::min(text.size(), max_len);
    for (std::size_t i = 0; i < n; ++i) {
        row.ids[i] = static_cast<std::uint8_t>(text[i]);
        row.mask[i] = 1;
    }
    return row;
}

// Tokenizes each text to max_len, then packs rows to the longest real length
// in the batch.
inline TokenBatch make_token_batch(const std::vector<std::string>& texts, std::size_t max_len) {
    if (texts.empty()) {
        throw std::invalid_argument("make_token_batch: empty batch");
    }
    std::vector<TokenRow> rows;
    rows.reserve(texts.size());
    std::size_t longest = 1;
    for (const auto& t : texts) {
        rows.push_back(tokenize(t, max_len));
        longest = std::max(longest, std::min(t.size(), max_len));
    }
    TokenBatch batch;
    batch.batch = texts.size();
    batch.length = longest;
    batch.ids.resize(batch.batch * longest);
    batch.mask.resize(batch.batch * longest);
    for (std::size_t b = 0; b < batch.batch; ++b) {
        for (std::size_t t = 0; t < longest; ++t) {
            batch.ids[b * longest + t] = rows[b].ids[t];
            batch.mask[b * longest + t] = rows[b].mask[t];
        }
    }
    return batch;
}

}  // namespace duet
