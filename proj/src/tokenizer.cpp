#include "malm/tokenizer.hpp"

#include <sstream>

#include "malm/common.hpp"

namespace malm {

Tokenizer::Tokenizer() {
    add_word("[PAD]");
    add_word("[UNK]");
}

Tokenizer::Tokenizer(std::vector<std::string> vocab) {
    check(vocab.size() >= 2 && vocab[0] == "[PAD]" && vocab[1] == "[UNK]",
          "tokenizer vocab must start with [PAD], [UNK]");
    for (const auto& w : vocab) {
        check(index_.count(w) == 0, "duplicate word in vocab: " + w);
        add_word(w);
    }
    frozen_ = true;
}

void Tokenizer::add_word(const std::string& w) {
    index_[w] = static_cast<int64_t>(words_.size());
    words_.push_back(w);
}

std::vector<std::string> Tokenizer::split(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

void Tokenizer::fit(const std::string& text) {
    check(!frozen_, "tokenizer is frozen");
    for (const auto& w : split(text)) {
        if (index_.count(w) == 0) add_word(w);
    }
}

int64_t Tokenizer::id_of(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnkId : it->second;
}

std::vector<int64_t> Tokenizer::encode(const std::string& text) const {
    std::vector<int64_t> out;
    for (const auto& w : split(text)) out.push_back(id_of(w));
    return out;
}

std::vector<int64_t> Tokenizer::encode_padded(const std::string& text, int64_t cap) const {
    check(cap >= 1, "cap must be >= 1");
    std::vector<int64_t> ids = encode(text);
    ids.resize(static_cast<size_t>(cap), kPadId);  // truncates or pads
    return ids;
}

std::string Tokenizer::decode(std::span<const int64_t> ids) const {
    std::string out;
    for (int64_t id : ids) {
        if (id == kPadId) continue;
        check(id >= 0 && id < vocab_size(), "token id out of range: " + std::to_string(id));
        if (!out.empty()) out.push_back(' ');
        out += words_[static_cast<size_t>(id)];
    }
    return out;
}

std::string Tokenizer::serialize() const {
    std::ostringstream out;
    for (const auto& w : words_) out << w << "\n";
    return out.str();
}

Tokenizer Tokenizer::deserialize(const std::string& text) {
    std::vector<std::string> vocab;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) vocab.push_back(line);
    }
    return Tokenizer(std::move(vocab));
}

}  // namespace malm
