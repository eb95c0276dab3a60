#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "opscope/common.hpp"
#include "opscope/semantics.hpp"

namespace opscope {

/// One premise with a clean (entailed) and a transformed hypothesis.
struct ContrastivePair {
    std::string id;
    std::string premise;
    std::string clean;
    std::string corrupted;
    NliLabel baseline_label = NliLabel::ENTAILMENT;
    NliLabel modified_label = NliLabel::ENTAILMENT;
    Operation operation = Operation::NEGATION;
    std::string original_span;
    std::string modified_span;

    void validate() const {
        auto fail = [&](const std::string& msg) {
            throw ValidationError("record \"" + id + "\": " + msg);
        };
        if (premise.empty() || clean.empty() || corrupted.empty())
            fail("premise, clean and corrupted must be non-empty");
        if (baseline_label != NliLabel::ENTAILMENT)
            fail("baseline_label must be entailment");
        if (modified_label != target_label(operation))
            fail(std::string("modified_label must be ") +
                 to_string(target_label(operation)) + " for operation " +
                 to_string(operation));
        if (clean.find(original_span) == std::string::npos)
            fail("original_span does not occur in clean hypothesis");
        if (corrupted.find(modified_span) == std::string::npos)
            fail("modified_span does not occur in corrupted hypothesis");
    }
};

struct Dataset {
    // Groups preserve file order within each operation.
    std::map<Operation, std::vector<ContrastivePair>> groups;
    std::vector<std::string> warnings;

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& [op, v] : groups) n += v.size();
        return n;
    }
};

namespace detail {

inline const std::vector<std::string>& pair_fields() {
    static const std::vector<std::string> f = {
        "id",             "premise",        "clean",
        "corrupted",      "baseline_label", "modified_label",
        "operation",      "original_span",  "modified_span"};
    return f;
}

inline ContrastivePair pair_from_json(const nlohmann::json& rec, bool strict,
                                      std::vector<std::string>* warnings) {
    if (!rec.is_object()) throw ValidationError("dataset record is not an object");
    std::string id = rec.contains("id") && rec["id"].is_string()
                         ? rec["id"].get<std::string>()
                         : "<missing id>";
    for (const auto& f : pair_fields())
        if (!rec.contains(f))
            throw ValidationError("record \"" + id + "\": missing field \"" + f + "\"");
    for (auto it = rec.begin(); it != rec.end(); ++it) {
        const auto& fields = pair_fields();
        if (std::find(fields.begin(), fields.end(), it.key()) == fields.end()) {
            if (strict)
                throw ValidationError("record \"" + id + "\": unexpected field \"" +
                                      it.key() + "\"");
            if (warnings)
                warnings->push_back("record \"" + id + "\": ignoring field \"" +
                                    it.key() + "\"");
        }
    }
    ContrastivePair p;
    try {
        p.id = rec.at("id").get<std::string>();
        p.premise = rec.at("premise").get<std::string>();
        p.clean = rec.at("clean").get<std::string>();
        p.corrupted = rec.at("corrupted").get<std::string>();
        p.baseline_label = label_from_string(rec.at("baseline_label").get<std::string>());
        p.modified_label = label_from_string(rec.at("modified_label").get<std::string>());
        p.operation = operation_from_string(rec.at("operation").get<std::string>());
        p.original_span = rec.at("original_span").get<std::string>();
        p.modified_span = rec.at("modified_span").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("record \"" + id + "\": bad field type: " + e.what());
    } catch (const ValidationError& e) {
        throw ValidationError("record \"" + id + "\": " + e.what());
    }
    p.validate();
    return p;
}

inline nlohmann::json pair_to_json(const ContrastivePair& p) {
    nlohmann::json rec;
    rec["id"] = p.id;
    rec["premise"] = p.premise;
    rec["clean"] = p.clean;
    rec["corrupted"] = p.corrupted;
    rec["baseline_label"] = to_string(p.baseline_label);
    rec["modified_label"] = to_string(p.modified_label);
    rec["operation"] = to_string(p.operation);
    rec["original_span"] = p.original_span;
    rec["modified_span"] = p.modified_span;
    return rec;
}

}  // namespace detail

inline Dataset parse_dataset(const nlohmann::json& doc, bool strict) {
    if (!doc.is_array()) throw ValidationError("dataset must be a JSON array");
    Dataset ds;
    for (const auto& rec : doc) {
        ContrastivePair p = detail::pair_from_json(rec, strict, &ds.warnings);
        ds.groups[p.operation].push_back(std::move(p));
    }
    return ds;
}

inline Dataset load_dataset(const std::string& path, bool strict = false) {
    std::ifstream f(path);
    if (!f) throw LoadError("cannot open dataset file \"" + path + "\"");
    nlohmann::json doc;
    try {
        f >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("\"" + path + "\": malformed JSON: " + e.what());
    }
    return parse_dataset(doc, strict);
}

inline nlohmann::json dataset_to_json(const Dataset& ds) {
    nlohmann::json arr = nlohmann::json::array();
    for (Operation op : all_operations()) {
        auto it = ds.groups.find(op);
        if (it == ds.groups.end()) continue;
        for (const auto& p : it->second) arr.push_back(detail::pair_to_json(p));
    }
    return arr;
}

/// Whitespace token count, matching the loader's tokenizer.
inline int whitespace_token_count(const std::string& text) {
    std::istringstream in(text);
    std::string w;
    int n = 0;
    while (in >> w) ++n;
    return n;
}

struct LengthStats {
    int median = 0, min = 0, max = 0;
};

struct OperationSummary {
    LengthStats premise, clean, corrupted;
    int count = 0;
};

namespace detail {

inline LengthStats length_stats(std::vector<int> lengths) {
    std::sort(lengths.begin(), lengths.end());
    LengthStats s;
    s.min = lengths.front();
    s.max = lengths.back();
    // lower-middle element on even n
    s.median = lengths[(lengths.size() - 1) / 2];
    return s;
}

}  // namespace detail

/// Per-operation token-length stats for premise / clean / corrupted.
inline std::map<Operation, OperationSummary> summarize(const Dataset& ds) {
    std::map<Operation, OperationSummary> out;
    for (const auto& [op, pairs] : ds.groups) {
        if (pairs.empty()) continue;
        std::vector<int> lp, lc, lx;
        for (const auto& p : pairs) {
            lp.push_back(whitespace_token_count(p.premise));
            lc.push_back(whitespace_token_count(p.clean));
            lx.push_back(whitespace_token_count(p.corrupted));
        }
        OperationSummary s;
        s.premise = detail::length_stats(lp);
        s.clean = detail::length_stats(lc);
        s.corrupted = detail::length_stats(lx);
        s.count = static_cast<int>(pairs.size());
        out[op] = s;
    }
    return out;
}

}  // namespace opscope
