#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "opscope/act1.hpp"
#include "opscope/common.hpp"
#include "opscope/dataset.hpp"
#include "opscope/model.hpp"
#include "opscope/vocab.hpp"

namespace opscope {

enum class Variant { clean, corrupted };

inline const char* to_string(Variant v) {
    return v == Variant::clean ? "clean" : "corrupted";
}

inline Variant variant_from_string(std::string_view s) {
    if (s == "clean") return Variant::clean;
    if (s == "corrupted") return Variant::corrupted;
    throw ValidationError("unknown variant: \"" + std::string(s) + "\"");
}

/// Final-token activations for one (operation, hook, variant) cell,
/// converted to float64 at capture.
struct ActivationMatrix {
    Eigen::MatrixXd rows;  // N x d_model
    HookPoint hook;
    Operation operation = Operation::NEGATION;
    Variant variant = Variant::clean;
    std::vector<std::string> example_ids;

    void validate() const {
        if (rows.rows() != static_cast<long>(example_ids.size()))
            throw ValidationError("activation matrix: row count != id count");
        if (!rows.allFinite())
            throw ValidationError("activation matrix: non-finite entry");
    }
};

/// Row i = corrupted_i - clean_i, paired by example id.
struct DeltaMatrix {
    Eigen::MatrixXd rows;  // N x d_model
    HookPoint hook;
    Operation operation = Operation::NEGATION;
    std::vector<std::string> example_ids;
};

/// The fixed prompt wrapper; recorded in the store manifest so downstream
/// results are comparable only within a template version.
constexpr std::string_view kPromptTemplateVersion = "v1";

inline std::string render_prompt(const std::string& premise,
                                 const std::string& hypothesis) {
    return "premise: " + premise + "\nhypothesis: " + hypothesis + "\nlabel:";
}

struct ActivationStore {
    std::string model_hash;
    std::string prompt_template = std::string(kPromptTemplateVersion);
    int d_model = 0;
    std::vector<ActivationMatrix> matrices;

    const ActivationMatrix* find(Operation op, HookPoint hook, Variant variant) const {
        for (const auto& m : matrices)
            if (m.operation == op && m.hook == hook && m.variant == variant) return &m;
        return nullptr;
    }
};

struct ExtractLog {
    std::vector<std::string> skipped_ids;
    std::vector<std::string> messages;
};

/// Run the model over every pair's clean and corrupted prompt and collect
/// final-token activations at the requested hooks. Per-example failures are
/// logged and skipped; more than 10% skips aborts the extraction.
inline ActivationStore extract(const WeightBundle& model, const Vocab& vocab,
                               const Dataset& dataset,
                               const std::vector<HookPoint>& hooks,
                               ExtractLog* log = nullptr) {
    if (hooks.empty()) throw ValidationError("extract: hook set must be non-empty");
    std::set<HookPoint> capture(hooks.begin(), hooks.end());
    for (const auto& h : capture)
        if (h.layer < 0 || h.layer >= model.config.n_layers)
            throw ValidationError("extract: hook layer out of range");

    ActivationStore store;
    store.d_model = model.config.d_model;

    std::size_t total = 0, skipped = 0;
    ExtractLog local;
    ExtractLog& lg = log ? *log : local;

    // (op, hook) -> per-variant rows, built example by example
    struct CellRows {
        std::vector<Eigen::VectorXd> clean, corrupted;
        std::vector<std::string> ids;
    };
    std::map<std::pair<Operation, HookPoint>, CellRows> cells;

    for (const auto& [op, pairs] : dataset.groups) {
        for (const auto& p : pairs) {
            ++total;
            try {
                auto run = [&](const std::string& hyp) {
                    auto ids = tokenize(render_prompt(p.premise, hyp), vocab);
                    return forward(model, ids, capture);
                };
                ForwardTrace clean_tr = run(p.clean);
                ForwardTrace corr_tr = run(p.corrupted);
                for (const auto& h : capture) {
                    auto& cell = cells[{op, h}];
                    cell.clean.push_back(clean_tr.captured.at(h));
                    cell.corrupted.push_back(corr_tr.captured.at(h));
                    cell.ids.push_back(p.id);
                }
            } catch (const Error& e) {
                ++skipped;
                lg.skipped_ids.push_back(p.id);
                lg.messages.push_back("skipping \"" + p.id + "\": " + e.what());
            }
        }
    }
    if (total > 0 && 10 * skipped > total)
        throw ValidationError("extract: " + std::to_string(skipped) + " of " +
                              std::to_string(total) + " examples failed (>10%)");

    for (auto& [key, cell] : cells) {
        for (Variant variant : {Variant::clean, Variant::corrupted}) {
            const auto& rows = variant == Variant::clean ? cell.clean : cell.corrupted;
            ActivationMatrix m;
            m.hook = key.second;
            m.operation = key.first;
            m.variant = variant;
            m.example_ids = cell.ids;
            m.rows.resize(static_cast<long>(rows.size()), store.d_model);
            for (std::size_t i = 0; i < rows.size(); ++i)
                m.rows.row(static_cast<long>(i)) = rows[i].transpose();
            store.matrices.push_back(std::move(m));
        }
    }
    return store;
}

/// Id-aligned corrupted-minus-clean difference. The id sets of the two
/// variants must match exactly; row order follows the clean matrix.
inline DeltaMatrix compute_deltas(const ActivationStore& store, Operation op,
                                  HookPoint hook) {
    const ActivationMatrix* clean = store.find(op, hook, Variant::clean);
    const ActivationMatrix* corr = store.find(op, hook, Variant::corrupted);
    if (!clean || !corr)
        throw ValidationError(std::string("compute_deltas: missing variant for ") +
                              to_string(op) + " at layer " + std::to_string(hook.layer));

    std::unordered_map<std::string, long> corr_row;
    for (std::size_t i = 0; i < corr->example_ids.size(); ++i)
        corr_row[corr->example_ids[i]] = static_cast<long>(i);

    std::vector<std::string> unmatched;
    for (const auto& id : clean->example_ids)
        if (!corr_row.count(id)) unmatched.push_back(id);
    std::set<std::string> clean_ids(clean->example_ids.begin(), clean->example_ids.end());
    for (const auto& id : corr->example_ids)
        if (!clean_ids.count(id)) unmatched.push_back(id);
    if (!unmatched.empty()) {
        std::string msg = "compute_deltas: unmatched example ids:";
        for (const auto& id : unmatched) msg += " " + id;
        throw ValidationError(msg);
    }

    DeltaMatrix d;
    d.hook = hook;
    d.operation = op;
    d.example_ids = clean->example_ids;
    d.rows.resize(clean->rows.rows(), clean->rows.cols());
    for (long i = 0; i < clean->rows.rows(); ++i) {
        long j = corr_row.at(clean->example_ids[static_cast<std::size_t>(i)]);
        d.rows.row(i) = corr->rows.row(j) - clean->rows.row(i);
    }
    return d;
}

namespace detail {

inline std::string matrix_name(Operation op, HookPoint hook, Variant variant) {
    return std::string(to_string(op)) + "/" + std::to_string(hook.layer) + "/" +
           to_string(hook.component) + "/" + to_string(variant);
}

}  // namespace detail

inline void save_store(const ActivationStore& store, const std::string& path) {
    std::vector<const ActivationMatrix*> ordered;
    for (const auto& m : store.matrices) ordered.push_back(&m);
    std::sort(ordered.begin(), ordered.end(),
              [](const ActivationMatrix* a, const ActivationMatrix* b) {
                  return std::make_tuple(static_cast<int>(a->operation), a->hook,
                                         static_cast<int>(a->variant)) <
                         std::make_tuple(static_cast<int>(b->operation), b->hook,
                                         static_cast<int>(b->variant));
              });

    nlohmann::json manifest;
    manifest["kind"] = "activations";
    manifest["model_hash"] = store.model_hash;
    manifest["prompt_template"] = store.prompt_template;
    manifest["prompt_template_text"] = render_prompt("{P}", "{H}");
    manifest["d_model"] = store.d_model;
    std::set<std::string> hook_tags, op_tags;
    nlohmann::json meta = nlohmann::json::object();
    std::vector<act1::Block> blocks;
    for (const auto* m : ordered) {
        std::string name = detail::matrix_name(m->operation, m->hook, m->variant);
        nlohmann::json mm;
        mm["operation"] = to_string(m->operation);
        mm["layer"] = m->hook.layer;
        mm["component"] = to_string(m->hook.component);
        mm["variant"] = to_string(m->variant);
        mm["example_ids"] = m->example_ids;
        meta[name] = mm;
        hook_tags.insert(std::to_string(m->hook.layer) + "/" + to_string(m->hook.component));
        op_tags.insert(to_string(m->operation));
        blocks.push_back({name, m->rows});
    }
    manifest["meta"] = meta;
    manifest["hooks"] = std::vector<std::string>(hook_tags.begin(), hook_tags.end());
    manifest["operations"] = std::vector<std::string>(op_tags.begin(), op_tags.end());
    act1::write(path, manifest, blocks);
}

inline void save_deltas(const std::vector<DeltaMatrix>& deltas, const std::string& path,
                        const std::string& model_hash = "") {
    std::vector<const DeltaMatrix*> ordered;
    for (const auto& d : deltas) ordered.push_back(&d);
    std::sort(ordered.begin(), ordered.end(), [](const DeltaMatrix* a, const DeltaMatrix* b) {
        return std::make_tuple(static_cast<int>(a->operation), a->hook) <
               std::make_tuple(static_cast<int>(b->operation), b->hook);
    });
    nlohmann::json manifest;
    manifest["kind"] = "deltas";
    manifest["model_hash"] = model_hash;
    nlohmann::json meta = nlohmann::json::object();
    std::vector<act1::Block> blocks;
    for (const auto* d : ordered) {
        std::string name = std::string(to_string(d->operation)) + "/" +
                           std::to_string(d->hook.layer) + "/" + to_string(d->hook.component);
        nlohmann::json mm;
        mm["operation"] = to_string(d->operation);
        mm["layer"] = d->hook.layer;
        mm["component"] = to_string(d->hook.component);
        mm["example_ids"] = d->example_ids;
        meta[name] = mm;
        blocks.push_back({name, d->rows});
    }
    manifest["meta"] = meta;
    act1::write(path, manifest, blocks);
}

inline std::vector<DeltaMatrix> load_deltas(const std::string& path) {
    act1::File file = act1::read(path);
    if (file.manifest.value("kind", "") != "deltas")
        throw LoadError("\"" + path + "\": manifest kind is not \"deltas\"");
    std::vector<DeltaMatrix> out;
    const auto& meta = file.manifest.at("meta");
    for (auto& b : file.blocks) {
        const auto& mm = meta.at(b.name);
        DeltaMatrix d;
        d.operation = operation_from_string(mm.at("operation").get<std::string>());
        d.hook.layer = mm.at("layer").get<int>();
        d.hook.component = component_from_string(mm.at("component").get<std::string>());
        d.example_ids = mm.at("example_ids").get<std::vector<std::string>>();
        d.rows = std::move(b.data);
        if (d.rows.rows() != static_cast<long>(d.example_ids.size()))
            throw LoadError("\"" + path + "\": matrix \"" + b.name +
                            "\" row count != id count");
        out.push_back(std::move(d));
    }
    return out;
}

inline ActivationStore load_store(const std::string& path) {
    act1::File file = act1::read(path);
    if (file.manifest.value("kind", "") != "activations")
        throw LoadError("\"" + path + "\": manifest kind is not \"activations\"");
    ActivationStore store;
    store.model_hash = file.manifest.value("model_hash", "");
    store.prompt_template = file.manifest.value("prompt_template", "");
    store.d_model = file.manifest.value("d_model", 0);
    const auto& meta = file.manifest.at("meta");
    for (auto& b : file.blocks) {
        if (!meta.contains(b.name))
            throw LoadError("\"" + path + "\": matrix \"" + b.name + "\" missing meta");
        const auto& mm = meta.at(b.name);
        ActivationMatrix m;
        m.operation = operation_from_string(mm.at("operation").get<std::string>());
        m.hook.layer = mm.at("layer").get<int>();
        m.hook.component = component_from_string(mm.at("component").get<std::string>());
        m.variant = variant_from_string(mm.at("variant").get<std::string>());
        m.example_ids = mm.at("example_ids").get<std::vector<std::string>>();
        m.rows = std::move(b.data);
        m.validate();
        store.matrices.push_back(std::move(m));
    }
    return store;
}

}  // namespace opscope
