#include "disendiff/tokens.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace disendiff {

Vocabulary::Vocabulary() {
    class_nouns_ = {"disc", "square", "triangle", "ring"};
    color_words_ = {"red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white"};
    words_ = {"<null>", "<pad>"};  // reserved ids 0 and 1
    for (const auto& w : class_nouns_) words_.push_back(w);
    for (const auto& w : color_words_) words_.push_back(w);
    for (const auto& w : {"a", "photo", "of", "and", "on", "the"}) words_.emplace_back(w);
    for (const auto& w : {"left", "right", "top"}) words_.emplace_back(w);
    for (const auto& w : {"V1*", "V2*", "V3*"}) words_.emplace_back(w);
}

int Vocabulary::id(const std::string& word) const {
    auto it = std::find(words_.begin(), words_.end(), word);
    if (it == words_.end())
        throw std::invalid_argument("vocabulary: unknown word '" + word + "'");
    return static_cast<int>(it - words_.begin());
}

const std::string& Vocabulary::word(int i) const {
    if (i < 0 || i >= size())
        throw std::out_of_range("vocabulary: id " + std::to_string(i) + " out of range");
    return words_[static_cast<size_t>(i)];
}

bool Vocabulary::contains(const std::string& word) const {
    return std::find(words_.begin(), words_.end(), word) != words_.end();
}

bool Vocabulary::is_class_noun(const std::string& word) const {
    return std::find(class_nouns_.begin(), class_nouns_.end(), word) != class_nouns_.end();
}

bool Vocabulary::is_modifier(const std::string& word) const {
    return word == "V1*" || word == "V2*" || word == "V3*";
}

int Vocabulary::modifier_id(int i) const {
    if (i < 1 || i > 3)
        throw std::out_of_range("modifier index must be 1..3, got " + std::to_string(i));
    return id("V" + std::to_string(i) + "*");
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("vocabulary: cannot open " + path);
    for (const auto& w : words_) f << w << "\n";
}

int TokenSeq::position_of(Role role, int concept_index) const {
    for (size_t i = 0; i < roles.size(); ++i)
        if (roles[i].role == role && roles[i].concept_index == concept_index)
            return static_cast<int>(i);
    return -1;
}

std::string template_prompt(const std::vector<std::string>& classes,
                            const std::vector<std::string>& modifiers,
                            const Vocabulary& vocab) {
    if (classes.empty() || classes.size() > 3 || classes.size() != modifiers.size())
        throw std::invalid_argument("template_prompt: need 1..3 matching class/modifier pairs");
    std::string out;
    for (size_t i = 0; i < classes.size(); ++i) {
        if (!vocab.is_class_noun(classes[i]))
            throw std::invalid_argument("template_prompt: unknown class noun '" + classes[i] + "'");
        if (!vocab.is_modifier(modifiers[i]))
            throw std::invalid_argument("template_prompt: unknown modifier '" + modifiers[i] + "'");
        if (i) out += " and ";
        out += modifiers[i] + " " + classes[i];
    }
    return out;
}

std::string regularization_caption(const std::vector<std::string>& classes,
                                   const Vocabulary& vocab) {
    if (classes.empty() || classes.size() > 3)
        throw std::invalid_argument("regularization_caption: need 1..3 classes");
    std::string out;
    for (size_t i = 0; i < classes.size(); ++i) {
        if (!vocab.is_class_noun(classes[i]))
            throw std::invalid_argument("regularization_caption: unknown class noun '" +
                                        classes[i] + "'");
        if (i) out += " and ";
        out += "a " + classes[i];
    }
    return out;
}

TokenSeq tokenize(const std::string& prompt, const Vocabulary& vocab) {
    TokenSeq seq;
    seq.ids.assign(kSeqLen, Vocabulary::kPadId);
    seq.roles.assign(kSeqLen, TokenRole{Role::pad, 0});

    std::istringstream iss(prompt);
    std::string w;
    std::vector<std::string> tokens;
    while (iss >> w) tokens.push_back(w);
    if (static_cast<int>(tokens.size()) > kSeqLen)
        throw std::invalid_argument("tokenize: prompt longer than " +
                                    std::to_string(kSeqLen) + " tokens");

    int n_modifiers = 0;
    int pending_modifier = 0;  // concept index awaiting its class noun
    int n_classes = 0;
    for (size_t i = 0; i < tokens.size(); ++i) {
        const int id = vocab.id(tokens[i]);  // throws naming the word
        seq.ids[i] = id;
        TokenRole& r = seq.roles[i];
        if (vocab.is_modifier(tokens[i])) {
            ++n_modifiers;
            r = {Role::modifier, n_modifiers};
            pending_modifier = n_modifiers;
        } else if (vocab.is_class_noun(tokens[i])) {
            if (pending_modifier > 0 && i > 0 && vocab.is_modifier(tokens[i - 1])) {
                r = {Role::cls, pending_modifier};
                pending_modifier = 0;
                n_classes = std::max(n_classes, r.concept_index);
            } else {
                ++n_classes;
                r = {Role::cls, n_classes};
            }
        } else if (id == Vocabulary::kNullId) {
            r = {Role::null_tok, 0};
        } else {
            r = {Role::filler, 0};
        }
    }
    return seq;
}

Tensor positional_encoding(int n, int dim) {
    std::vector<double> data(static_cast<size_t>(n) * dim);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    for (int p = 0; p < n; ++p)
        for (int j = 0; j < dim; j += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(j) / dim);
            data[static_cast<size_t>(p * dim + j)] = scale * std::sin(p * freq);
            if (j + 1 < dim)
                data[static_cast<size_t>(p * dim + j + 1)] = scale * std::cos(p * freq);
        }
    return Tensor::from_data({n, dim}, std::move(data));
}

Tensor embed(const TokenSeq& seq, const Tensor& table) {
    return add(gather_rows(table, seq.ids),
               positional_encoding(static_cast<int>(seq.ids.size())));
}

Tensor init_embedding_table(const Vocabulary& vocab, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int rows = vocab.size();
    std::vector<double> data(static_cast<size_t>(rows) * kEmbedDim);
    const double scale = 1.0 / std::sqrt(static_cast<double>(kEmbedDim));
    for (auto& v : data) v = gauss(rng) * scale;
    // modifiers start as a rare filler word ("photo") plus small noise
    const int rare = vocab.id("photo");
    for (int m = 1; m <= 3; ++m) {
        const int row = vocab.modifier_id(m);
        for (int j = 0; j < kEmbedDim; ++j)
            data[static_cast<size_t>(row * kEmbedDim + j)] =
                data[static_cast<size_t>(rare * kEmbedDim + j)] + 0.01 * gauss(rng);
    }
    return Tensor::from_data({rows, kEmbedDim}, std::move(data), true);
}

}  // namespace disendiff
