#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace malm {

/// Word-level tokenizer with a fixed vocabulary. Splits on whitespace and
/// keeps words verbatim, so encode/decode round-trips any single-spaced text
/// whose words are all in the vocabulary. Ids 0 and 1 are reserved for
/// [PAD] and [UNK].
class Tokenizer {
public:
    static constexpr int64_t kPadId = 0;
    static constexpr int64_t kUnkId = 1;

    Tokenizer();
    explicit Tokenizer(std::vector<std::string> vocab);  // frozen, must start [PAD],[UNK]

    /// Adds unseen words from `text` in first-occurrence order.
    void fit(const std::string& text);
    void freeze() { frozen_ = true; }
    bool frozen() const { return frozen_; }

    std::vector<int64_t> encode(const std::string& text) const;
    /// Truncates to `cap` and pads with [PAD] up to exactly `cap` ids.
    std::vector<int64_t> encode_padded(const std::string& text, int64_t cap) const;
    /// Joins tokens with single spaces, skipping [PAD].
    std::string decode(std::span<const int64_t> ids) const;

    int64_t vocab_size() const { return static_cast<int64_t>(words_.size()); }
    const std::vector<std::string>& vocab() const { return words_; }
    int64_t id_of(const std::string& word) const;  // kUnkId when absent

    std::string serialize() const;  // one word per line
    static Tokenizer deserialize(const std::string& text);

    static std::vector<std::string> split(const std::string& text);

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int64_t> index_;
    bool frozen_ = false;

    void add_word(const std::string& w);
};

}  // namespace malm
