#pragma once

#include <array>
#include <string>
#include <string_view>

#include "opscope/common.hpp"

namespace opscope {

/// The six contrastive edit operations. The first three flip the NLI label
/// from entailment to contradiction, the last three to neutral.
enum class Operation {
    NEGATION,
    ANTONYMY,
    QUANTIFICATION,
    ABSTRACTION,
    SPECIFICATION,
    CO_HYPONYMY,
};

enum class NliLabel {
    ENTAILMENT,
    CONTRADICTION,
    NEUTRAL,
};

constexpr int kNumOperations = 6;
constexpr int kNumLabels = 3;

constexpr std::array<Operation, kNumOperations> all_operations() {
    return {Operation::NEGATION,      Operation::ANTONYMY,
            Operation::QUANTIFICATION, Operation::ABSTRACTION,
            Operation::SPECIFICATION, Operation::CO_HYPONYMY};
}

inline const char* to_string(Operation op) {
    switch (op) {
        case Operation::NEGATION: return "NEGATION";
        case Operation::ANTONYMY: return "ANTONYMY";
        case Operation::QUANTIFICATION: return "QUANTIFICATION";
        case Operation::ABSTRACTION: return "ABSTRACTION";
        case Operation::SPECIFICATION: return "SPECIFICATION";
        case Operation::CO_HYPONYMY: return "CO_HYPONYMY";
    }
    throw ValidationError("invalid Operation value");
}

inline Operation operation_from_string(std::string_view s) {
    for (Operation op : all_operations())
        if (s == to_string(op)) return op;
    throw ValidationError("unknown operation string: \"" + std::string(s) + "\"");
}

inline const char* to_string(NliLabel l) {
    switch (l) {
        case NliLabel::ENTAILMENT: return "entailment";
        case NliLabel::CONTRADICTION: return "contradiction";
        case NliLabel::NEUTRAL: return "neutral";
    }
    throw ValidationError("invalid NliLabel value");
}

inline NliLabel label_from_string(std::string_view s) {
    if (s == "entailment") return NliLabel::ENTAILMENT;
    if (s == "contradiction") return NliLabel::CONTRADICTION;
    if (s == "neutral") return NliLabel::NEUTRAL;
    throw ValidationError("unknown label string: \"" + std::string(s) + "\"");
}

/// Label each operation's transformed hypothesis receives.
inline NliLabel target_label(Operation op) {
    switch (op) {
        case Operation::NEGATION:
        case Operation::ANTONYMY:
        case Operation::QUANTIFICATION: return NliLabel::CONTRADICTION;
        case Operation::ABSTRACTION:
        case Operation::SPECIFICATION:
        case Operation::CO_HYPONYMY: return NliLabel::NEUTRAL;
    }
    throw ValidationError("invalid Operation value");
}

}  // namespace opscope
