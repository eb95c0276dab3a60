#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "opscope/common.hpp"
#include "opscope/dataset.hpp"
#include "opscope/model.hpp"
#include "opscope/rng.hpp"

namespace opscope {

// Deterministic desk-scale fixture generation: a random-weight model, a
// template-built contrastive pair corpus, and the matching vocabulary. Used
// by the synth subcommand and by tests that need a runnable end-to-end setup.

namespace synth {

struct WordTriple {
    const char* specific;       // clean object
    const char* general;        // abstraction target
    const char* sibling;        // co-hyponymy target
    const char* more_specific;  // specification target (may be two words)
};

struct VerbEntry {
    const char* past;     // clean verb
    const char* base;     // negation form: "did not <base>"
    const char* antonym;  // antonymy target
};

inline const std::array<WordTriple, 6>& word_triples() {
    static const std::array<WordTriple, 6> t = {{
        {"engineers", "staff", "designers", "software engineers"},
        {"cars", "vehicles", "trucks", "electric cars"},
        {"roses", "flowers", "tulips", "red roses"},
        {"novels", "books", "poems", "mystery novels"},
        {"apples", "fruit", "pears", "green apples"},
        {"houses", "buildings", "cabins", "brick houses"},
    }};
    return t;
}

inline const std::array<VerbEntry, 6>& verb_entries() {
    static const std::array<VerbEntry, 6> v = {{
        {"hired", "hire", "fired"},
        {"bought", "buy", "sold"},
        {"opened", "open", "closed"},
        {"painted", "paint", "destroyed"},
        {"delivered", "deliver", "returned"},
        {"built", "build", "demolished"},
    }};
    return v;
}

inline const std::array<const char*, 6>& subjects() {
    static const std::array<const char*, 6> s = {
        "the company", "the startup", "the museum",
        "the family",  "the team",    "the school"};
    return s;
}

inline const std::array<const char*, 6>& numbers() {
    static const std::array<const char*, 6> n = {"two",  "three", "four",
                                                 "five", "six",   "seven"};
    return n;
}

inline const std::array<const char*, 6>& times() {
    static const std::array<const char*, 6> t = {
        "last month", "last year",  "yesterday",
        "in march",   "last week",  "on friday"};
    return t;
}

inline std::string op_id_prefix(Operation op) {
    switch (op) {
        case Operation::NEGATION: return "neg";
        case Operation::ANTONYMY: return "ant";
        case Operation::QUANTIFICATION: return "quant";
        case Operation::ABSTRACTION: return "abs";
        case Operation::SPECIFICATION: return "spec";
        case Operation::CO_HYPONYMY: return "cohyp";
    }
    throw ValidationError("invalid Operation value");
}

/// per_op_n pairs per operation, combinatorially sampled with the seeded
/// generator. All text is lowercase without punctuation so the whitespace
/// tokenizer covers it exactly.
inline Dataset make_dataset(int per_op_n, std::uint64_t seed) {
    if (per_op_n < 1) throw ValidationError("make_dataset: per_op_n must be >= 1");
    Rng rng(seed);
    Dataset ds;
    for (Operation op : all_operations()) {
        auto& group = ds.groups[op];
        for (int i = 0; i < per_op_n; ++i) {
            const auto& subj = subjects()[rng.below(subjects().size())];
            const auto& verb = verb_entries()[rng.below(verb_entries().size())];
            const auto& obj = word_triples()[rng.below(word_triples().size())];
            const auto& num = numbers()[rng.below(numbers().size())];
            const auto& when = times()[rng.below(times().size())];

            ContrastivePair p;
            char idx[16];
            std::snprintf(idx, sizeof(idx), "%04d", i);
            p.id = op_id_prefix(op) + "_" + idx;
            p.premise = std::string(subj) + " " + verb.past + " " + num + " new " +
                        obj.specific + " " + when;
            p.clean = std::string(subj) + " " + verb.past + " new " + obj.specific;
            p.baseline_label = NliLabel::ENTAILMENT;
            p.modified_label = target_label(op);
            p.operation = op;
            switch (op) {
                case Operation::NEGATION:
                    p.corrupted = std::string(subj) + " did not " + verb.base +
                                  " new " + obj.specific;
                    p.original_span = verb.past;
                    p.modified_span = std::string("did not ") + verb.base;
                    break;
                case Operation::ANTONYMY:
                    p.corrupted = std::string(subj) + " " + verb.antonym + " new " +
                                  obj.specific;
                    p.original_span = verb.past;
                    p.modified_span = verb.antonym;
                    break;
                case Operation::QUANTIFICATION:
                    p.corrupted = std::string(subj) + " " + verb.past + " no new " +
                                  obj.specific;
                    p.original_span = std::string(verb.past) + " new";
                    p.modified_span = std::string(verb.past) + " no new";
                    break;
                case Operation::ABSTRACTION:
                    p.corrupted = std::string(subj) + " " + verb.past + " new " +
                                  obj.general;
                    p.original_span = obj.specific;
                    p.modified_span = obj.general;
                    break;
                case Operation::SPECIFICATION:
                    p.corrupted = std::string(subj) + " " + verb.past + " new " +
                                  obj.more_specific;
                    p.original_span = obj.specific;
                    p.modified_span = obj.more_specific;
                    break;
                case Operation::CO_HYPONYMY:
                    p.corrupted = std::string(subj) + " " + verb.past + " new " +
                                  obj.sibling;
                    p.original_span = obj.specific;
                    p.modified_span = obj.sibling;
                    break;
            }
            p.validate();
            group.push_back(std::move(p));
        }
    }
    return ds;
}

/// Every word the templates can emit, plus the prompt markers and the three
/// label tokens. Line 0 is <unk>.
inline std::vector<std::string> vocab_lines() {
    std::set<std::string> words;
    auto add_words = [&](const std::string& text) {
        std::istringstream in(text);
        std::string w;
        while (in >> w) words.insert(w);
    };
    for (const auto& s : subjects()) add_words(s);
    for (const auto& v : verb_entries()) {
        add_words(v.past);
        add_words(v.base);
        add_words(v.antonym);
    }
    for (const auto& t : word_triples()) {
        add_words(t.specific);
        add_words(t.general);
        add_words(t.sibling);
        add_words(t.more_specific);
    }
    for (const auto& n : numbers()) add_words(n);
    for (const auto& t : times()) add_words(t);
    add_words("did not new no");
    add_words("premise: hypothesis: label:");

    std::vector<std::string> lines = {"<unk>", "entailment", "contradiction", "neutral"};
    for (const auto& w : words) lines.push_back(w);
    return lines;
}

/// Random-weight model at the given sizes, scaled so activations and logits
/// stay O(1) for typical prompt lengths.
inline WeightBundle make_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const int d = config.d_model;
    const double embed_scale = 0.4;
    const double weight_scale = 0.6 / std::sqrt(static_cast<double>(d));
    const double mlp_out_scale = 0.6 / std::sqrt(static_cast<double>(config.d_mlp));

    auto randmat = [&](long rows, long cols, double scale) {
        Eigen::MatrixXf m(rows, cols);
        for (long i = 0; i < rows; ++i)
            for (long j = 0; j < cols; ++j)
                m(i, j) = static_cast<float>(scale * rng.normal());
        return m;
    };

    WeightBundle w;
    w.config = config;
    w.tok_embed = randmat(config.vocab_size, d, embed_scale);
    w.pos_embed = randmat(config.max_seq_len, d, embed_scale * 0.25);
    for (int l = 0; l < config.n_layers; ++l) {
        LayerWeights lw;
        lw.ln1_gain = Eigen::VectorXf::Ones(d);
        lw.attn_wq = randmat(d, d, weight_scale);
        lw.attn_wk = randmat(d, d, weight_scale);
        lw.attn_wv = randmat(d, d, weight_scale);
        lw.attn_wo = randmat(d, d, weight_scale);
        lw.ln2_gain = Eigen::VectorXf::Ones(d);
        lw.mlp_win = randmat(config.d_mlp, d, weight_scale);
        lw.mlp_bin = Eigen::VectorXf::Zero(config.d_mlp);
        lw.mlp_wout = randmat(d, config.d_mlp, mlp_out_scale);
        lw.mlp_bout = Eigen::VectorXf::Zero(d);
        w.layers.push_back(std::move(lw));
    }
    w.unembed = randmat(config.vocab_size, d, 1.0 / std::sqrt(static_cast<double>(d)));
    w.validate();
    return w;
}

}  // namespace synth
}  // namespace opscope
