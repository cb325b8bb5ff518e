// Toy text encoding: closed vocabulary, prompt templates with modifier
// tokens, and a learnable embedding table that stands in for a text encoder.
#pragma once

#include <string>
#include <vector>

#include "disendiff/tensor.hpp"

namespace disendiff {

inline constexpr int kSeqLen = 8;     // fixed token-axis length N
inline constexpr int kEmbedDim = 32;

enum class Role { pad, null_tok, filler, modifier, cls };

struct TokenRole {
    Role role = Role::pad;
    int concept_index = 0;  // 1-based for modifier/class, 0 otherwise
};

class Vocabulary {
  public:
    Vocabulary();  // the fixed system vocabulary

    int id(const std::string& word) const;       // throws on unknown word
    const std::string& word(int id) const;
    int size() const { return static_cast<int>(words_.size()); }
    bool contains(const std::string& word) const;

    bool is_class_noun(const std::string& word) const;
    bool is_modifier(const std::string& word) const;
    int modifier_id(int i) const;                // i in 1..3
    const std::vector<std::string>& class_nouns() const { return class_nouns_; }
    const std::vector<std::string>& color_words() const { return color_words_; }

    // one word per line, UTF-8, id = line number
    void save(const std::string& path) const;

    static constexpr int kNullId = 0;
    static constexpr int kPadId = 1;

  private:
    std::vector<std::string> words_;
    std::vector<std::string> class_nouns_;
    std::vector<std::string> color_words_;
};

struct TokenSeq {
    std::vector<int> ids;          // length kSeqLen, PAD-filled
    std::vector<TokenRole> roles;  // same length

    int position_of(Role role, int concept_index) const;  // -1 if absent
};

// "V1* c1 and V2* c2 [and V3* c3]"
std::string template_prompt(const std::vector<std::string>& classes,
                            const std::vector<std::string>& modifiers,
                            const Vocabulary& vocab);
// regularization caption "a c1 and a c2", no modifiers
std::string regularization_caption(const std::vector<std::string>& classes,
                                   const Vocabulary& vocab);

TokenSeq tokenize(const std::string& prompt, const Vocabulary& vocab);

// fixed sinusoidal positional table, (n x dim), scaled like the embedding
// rows; without it the text conditioning is a bag of words and color-shape
// binding in "a white disc and a green square" is unlearnable
Tensor positional_encoding(int n, int dim = kEmbedDim);

// row lookup plus positional encoding; (kSeqLen x embed_dim)
Tensor embed(const TokenSeq& seq, const Tensor& table);

// fresh table: unit-Gaussian/sqrt(dim) rows, modifiers seeded from a
// low-frequency filler row plus sigma=0.01 noise
Tensor init_embedding_table(const Vocabulary& vocab, unsigned seed);

}  // namespace disendiff
