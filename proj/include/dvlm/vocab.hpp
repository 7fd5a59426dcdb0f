#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "dvlm/errors.hpp"
#include "dvlm/rng.hpp"

namespace dvlm {

// Whitespace word splitter. Camera tags ("<c1,CAM_FRONT,800,450>") contain no
// whitespace, so they stay atomic as long as the vocabulary carries them.
inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

// Word-level symbol table. Ids 0-6 are the reserved control symbols, id 7 is
// the unknown-word bucket; everything after that is corpus-derived.
class Vocabulary {
public:
    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static constexpr int kPad = 2;
    static constexpr int kE2eOpen = 3;
    static constexpr int kE2eClose = 4;
    static constexpr int kImgOpen = 5;
    static constexpr int kImgClose = 6;
    static constexpr int kUnk = 7;

    Vocabulary() {
        for (const char* s : {"<bos>", "<eos>", "<pad>", "<e2e>", "</e2e>", "<img>", "</img>",
                              "<unk>"})
            push(s);
    }

    // Idempotent insert; returns the symbol's id.
    int add_symbol(const std::string& s) {
        auto it = index_.find(s);
        if (it != index_.end()) return it->second;
        return push(s);
    }

    void add_text(const std::string& text) {
        for (const auto& w : split_words(text)) add_symbol(w);
    }

    int id_of(const std::string& s) const {
        auto it = index_.find(s);
        return it == index_.end() ? kUnk : it->second;
    }

    bool contains(const std::string& s) const { return index_.count(s) > 0; }

    const std::string& symbol(int id) const {
        if (id < 0 || id >= size()) throw InputError("vocabulary id out of range");
        return symbols_[static_cast<size_t>(id)];
    }

    int size() const { return static_cast<int>(symbols_.size()); }

    std::vector<int> tokenize(const std::string& text) const {
        std::vector<int> ids;
        for (const auto& w : split_words(text)) ids.push_back(id_of(w));
        return ids;
    }

    std::string detokenize(const std::vector<int>& ids) const {
        std::string out;
        for (size_t i = 0; i < ids.size(); ++i) {
            if (i) out += ' ';
            out += symbol(ids[i]);
        }
        return out;
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw IoError("cannot write vocabulary: " + path);
        for (const auto& s : symbols_) os << s << '\n';
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot read vocabulary: " + path);
        Vocabulary v;
        v.symbols_.clear();
        v.index_.clear();
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            if (v.index_.count(line)) throw IoError("duplicate vocabulary symbol: " + line);
            v.push(line);
        }
        if (v.size() < 8 || v.symbols_[0] != "<bos>" || v.symbols_[7] != "<unk>")
            throw IoError("vocabulary file missing reserved symbols: " + path);
        return v;
    }

    // Stable content hash so checkpoints can detect a mismatched vocabulary.
    uint64_t fingerprint() const {
        std::string all;
        for (const auto& s : symbols_) {
            all += s;
            all += '\n';
        }
        return fnv1a(all.data(), all.size());
    }

private:
    int push(const std::string& s) {
        int id = size();
        symbols_.push_back(s);
        index_.emplace(s, id);
        return id;
    }

    std::vector<std::string> symbols_;
    std::unordered_map<std::string, int> index_;
};

// Vocabulary over a text corpus: reserved symbols, single digits, then corpus
// words in first-seen order.
inline Vocabulary build_vocabulary(const std::vector<std::string>& corpus) {
    Vocabulary v;
    for (char d = '0'; d <= '9'; ++d) v.add_symbol(std::string(1, d));
    for (const auto& t : corpus) v.add_text(t);
    return v;
}

}  // namespace dvlm
