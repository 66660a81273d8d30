#pragma once

#include <algorithm>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pqr/errors.hpp"

namespace pqr {

/// Closed caption vocabulary shared by the text encoder, the corpus, and the
/// attribute embedders.
namespace words {
inline const std::vector<std::string> shapes = {"circle", "square", "triangle", "diamond", "ring"};
inline const std::vector<std::string> colors = {"red", "green", "blue", "yellow", "purple", "orange"};
inline const std::vector<std::string> textures = {"solid", "striped", "dotted"};
inline const std::vector<std::string> backgrounds = {"white", "gray", "black", "cyan"};
inline const std::vector<std::string> fillers = {"a", "photo", "of", "on", "background"};
inline constexpr const char* concept_token = "<v>";
inline constexpr const char* null_token = "<null>";
} // namespace words

class Vocabulary {
public:
    Vocabulary() {
        add(words::null_token);
        add(words::concept_token);
        for (const auto* group : {&words::fillers, &words::shapes, &words::colors, &words::textures}) {
            for (const auto& w : *group) add(w);
        }
        // Background words share the color namespace where they overlap.
        for (const auto& w : words::backgrounds) {
            if (!lookup(w)) add(w);
        }
    }

    static const Vocabulary& standard() {
        static const Vocabulary v;
        return v;
    }

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::string& token(int id) const {
        require(id >= 0 && id < size(), "token id out of vocabulary");
        return tokens_[static_cast<size_t>(id)];
    }
    std::optional<int> lookup(const std::string& w) const {
        auto it = std::find(tokens_.begin(), tokens_.end(), w);
        if (it == tokens_.end()) return std::nullopt;
        return static_cast<int>(it - tokens_.begin());
    }
    int id(const std::string& w) const {
        auto r = lookup(w);
        require(r.has_value(), "unknown word '" + w + "'");
        return *r;
    }
    int concept_id() const { return id(words::concept_token); }
    int null_id() const { return id(words::null_token); }

private:
    void add(const std::string& w) { tokens_.push_back(w); }
    std::vector<std::string> tokens_;
};

struct Prompt {
    std::vector<int> token_ids;
    std::optional<int> concept_index;

    bool operator==(const Prompt&) const = default;

    /// Whitespace tokenization over the closed vocabulary.
    static Prompt parse(const std::string& text, const Vocabulary& vocab = Vocabulary::standard()) {
        Prompt p;
        std::istringstream in(text);
        std::string w;
        while (in >> w) {
            const int id = vocab.id(w);
            if (id == vocab.concept_id() && !p.concept_index) p.concept_index = static_cast<int>(p.token_ids.size());
            p.token_ids.push_back(id);
        }
        require(!p.token_ids.empty(), "prompt must contain at least one token");
        return p;
    }

    std::string text(const Vocabulary& vocab = Vocabulary::standard()) const {
        std::string s;
        for (size_t i = 0; i < token_ids.size(); ++i) {
            if (i) s += ' ';
            s += vocab.token(token_ids[i]);
        }
        return s;
    }

    void validate(const Vocabulary& vocab = Vocabulary::standard()) const {
        require(!token_ids.empty(), "prompt must contain at least one token");
        for (int id : token_ids) require(id >= 0 && id < vocab.size(), "prompt token id out of vocabulary");
        if (concept_index) {
            require(*concept_index >= 0 && *concept_index < static_cast<int>(token_ids.size()),
                    "prompt concept index out of range");
            require(token_ids[static_cast<size_t>(*concept_index)] == vocab.concept_id(),
                    "prompt concept index does not point at the concept token");
        }
    }
};

} // namespace pqr
