#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "opscope/common.hpp"
#include "opscope/model.hpp"
#include "opscope/semantics.hpp"

namespace opscope {

/// Whitespace tokenizer vocabulary. One token per line, line number = id,
/// line 0 is "<unk>"; the three NLI labels are single reserved tokens.
struct Vocab {
    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> index;

    static constexpr int kUnkId = 0;

    int size() const { return static_cast<int>(tokens.size()); }

    int lookup(const std::string& word) const {
        auto it = index.find(word);
        return it == index.end() ? kUnkId : it->second;
    }

    LabelTokens label_tokens() const {
        LabelTokens lt;
        lt.entailment = must_find("entailment");
        lt.contradiction = must_find("contradiction");
        lt.neutral = must_find("neutral");
        return lt;
    }

private:
    int must_find(const std::string& word) const {
        auto it = index.find(word);
        if (it == index.end())
            throw ValidationError("vocab is missing required token \"" + word + "\"");
        return it->second;
    }
};

inline Vocab parse_vocab(std::istream& in, const std::string& origin) {
    Vocab v;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        int id = v.size();
        if (!v.index.emplace(line, id).second)
            throw LoadError(origin + ": duplicate vocab token \"" + line +
                            "\" at line " + std::to_string(id));
        v.tokens.push_back(line);
    }
    if (v.tokens.empty() || v.tokens[0] != "<unk>")
        throw LoadError(origin + ": line 0 must be \"<unk>\"");
    v.label_tokens();  // labels must be present
    return v;
}

inline Vocab load_vocab(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw LoadError("cannot open vocab file \"" + path + "\"");
    return parse_vocab(f, path);
}

/// Whitespace-split greedy lookup; unknown words map to <unk>.
inline std::vector<int> tokenize(const std::string& text, const Vocab& vocab) {
    std::istringstream in(text);
    std::vector<int> ids;
    std::string word;
    while (in >> word) ids.push_back(vocab.lookup(word));
    if (ids.empty()) throw ValidationError("tokenize: empty text");
    return ids;
}

}  // namespace opscope
