#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "opscope/attribution.hpp"
#include "opscope/common.hpp"
#include "opscope/csv.hpp"
#include "opscope/dataset.hpp"
#include "opscope/geometry.hpp"
#include "opscope/intervention.hpp"
#include "opscope/model.hpp"
#include "opscope/plant.hpp"
#include "opscope/probe.hpp"
#include "opscope/stats.hpp"
#include "opscope/store.hpp"
#include "opscope/synth.hpp"
#include "opscope/vocab.hpp"
#include "opscope/weights_io.hpp"

namespace opscope {

/// Synth sub-config: sizes for the generated model and corpus.
struct SynthConfig {
    int n_layers = 2;
    int d_model = 32;
    int n_heads = 4;
    int d_mlp = 64;
    int max_seq_len = 48;
    int per_op_n = 24;
};

/// Optional planted-data sub-config; replaces model-based extraction.
struct PlantConfig {
    int per_op_n = 300;
    int dim = 64;
    int k_true = 2;
    double shift_scale = 0.0;
    double noise_sigma = 0.1;
};

/// Run configuration. Defaults reproduce the reference protocol: rank k=4,
/// steering alphas {5,10,20} with sensitivity grid {0.5,1,2}, 5-fold
/// stratified cross-validation, 1000 random-subspace draws, 5000 column
/// shuffles, 10000 sign flips, and 3 random steering baseline seeds.
struct RunConfig {
    std::string model_path = "model.tmw";
    std::string vocab_path = "vocab.txt";
    std::string dataset_path = "dataset.json";
    std::optional<PlantConfig> plant;
    std::vector<Component> hooks = {Component::resid_post, Component::attn_out,
                                    Component::mlp_out};
    int k = 4;
    int k_label = 1;
    std::vector<double> alphas = {5.0, 10.0, 20.0};
    std::vector<double> sensitivity_alphas = {0.5, 1.0, 2.0};
    int folds = 5;
    int B_random = 1000;
    int B_shuffle = 5000;
    int B_signflip = 10000;
    int n_probe_baselines = 5;
    int n_steering_baseline_seeds = 3;
    double contamination_alpha = 20.0;
    std::uint64_t base_seed = 42;
    std::string output_dir = ".";
    bool strict_schema = false;
    bool final_norm = false;
    SynthConfig synth;

    void validate() const {
        if (k < 1 || k_label < 1 || folds < 2)
            throw ValidationError("config: k, k_label must be >= 1 and folds >= 2");
        if (B_random < 1 || B_shuffle < 1 || B_signflip < 1)
            throw ValidationError("config: all B counts must be >= 1");
        if (alphas.empty()) throw ValidationError("config: alphas must be non-empty");
        if (hooks.empty()) throw ValidationError("config: hooks must be non-empty");
    }
};

namespace pipeline {

namespace fs = std::filesystem;

// Seed offsets per purpose; every random draw in a run derives from
// base_seed so a (config, seed) pair fixes all artifact bytes.
constexpr std::uint64_t kSeedModel = 10'000'000;
constexpr std::uint64_t kSeedDataset = 10'000'001;
constexpr std::uint64_t kSeedPlant = 10'000'002;
constexpr std::uint64_t kSeedFolds = 20'000'000;
constexpr std::uint64_t kSeedShuffle = 30'000'000;
constexpr std::uint64_t kSeedSteerBase = 40'000'000;
constexpr std::uint64_t kSeedSignflip = 50'000'000;
constexpr std::uint64_t kSeedLabelPerm = 50'000'001;

inline fs::path resolve(const RunConfig& cfg, const std::string& rel) {
    fs::path p(rel);
    if (p.is_absolute()) return p;
    return fs::path(cfg.output_dir) / p;
}

/// Write-temp-then-rename so failed stages leave only ".partial" files.
inline void write_artifact(const fs::path& path, const std::string& content) {
    fs::path tmp = path;
    tmp += ".partial";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw LoadError("cannot open \"" + tmp.string() + "\" for writing");
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!f) throw LoadError("short write to \"" + tmp.string() + "\"");
    }
    fs::rename(tmp, path);
}

template <typename WriteFn>
inline void write_artifact_with(const fs::path& path, WriteFn&& fn) {
    fs::path tmp = path;
    tmp += ".partial";
    fn(tmp.string());
    fs::rename(tmp, path);
}

inline std::string csv_num(double v) {
    return std::isfinite(v) ? format_double(v) : std::string();
}

inline std::string now_iso8601() {
    auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline nlohmann::json config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["model_path"] = c.model_path;
    j["vocab_path"] = c.vocab_path;
    j["dataset_path"] = c.dataset_path;
    if (c.plant) {
        j["plant"] = {{"per_op_n", c.plant->per_op_n},
                      {"dim", c.plant->dim},
                      {"k_true", c.plant->k_true},
                      {"shift_scale", c.plant->shift_scale},
                      {"noise_sigma", c.plant->noise_sigma}};
    }
    std::vector<std::string> hooks;
    for (Component h : c.hooks) hooks.push_back(to_string(h));
    j["hooks"] = hooks;
    j["k"] = c.k;
    j["k_label"] = c.k_label;
    j["alphas"] = c.alphas;
    j["sensitivity_alphas"] = c.sensitivity_alphas;
    j["folds"] = c.folds;
    j["B_random"] = c.B_random;
    j["B_shuffle"] = c.B_shuffle;
    j["B_signflip"] = c.B_signflip;
    j["n_probe_baselines"] = c.n_probe_baselines;
    j["n_steering_baseline_seeds"] = c.n_steering_baseline_seeds;
    j["contamination_alpha"] = c.contamination_alpha;
    j["base_seed"] = c.base_seed;
    j["output_dir"] = c.output_dir;
    j["strict_schema"] = c.strict_schema;
    j["final_norm"] = c.final_norm;
    j["synth"] = {{"n_layers", c.synth.n_layers},       {"d_model", c.synth.d_model},
                  {"n_heads", c.synth.n_heads},         {"d_mlp", c.synth.d_mlp},
                  {"max_seq_len", c.synth.max_seq_len}, {"per_op_n", c.synth.per_op_n}};
    return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig c;
    static const std::set<std::string> known = {
        "model_path", "vocab_path", "dataset_path", "plant", "hooks", "k", "k_label",
        "alphas", "sensitivity_alphas", "folds", "B_random", "B_shuffle", "B_signflip",
        "n_probe_baselines", "n_steering_baseline_seeds", "contamination_alpha",
        "base_seed", "output_dir", "strict_schema", "final_norm", "synth"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw ValidationError("config: unknown key \"" + it.key() + "\"");

    if (j.contains("model_path")) c.model_path = j["model_path"].get<std::string>();
    if (j.contains("vocab_path")) c.vocab_path = j["vocab_path"].get<std::string>();
    if (j.contains("dataset_path")) c.dataset_path = j["dataset_path"].get<std::string>();
    if (j.contains("plant")) {
        PlantConfig p;
        const auto& pj = j["plant"];
        if (pj.contains("per_op_n")) p.per_op_n = pj["per_op_n"].get<int>();
        if (pj.contains("dim")) p.dim = pj["dim"].get<int>();
        if (pj.contains("k_true")) p.k_true = pj["k_true"].get<int>();
        if (pj.contains("shift_scale")) p.shift_scale = pj["shift_scale"].get<double>();
        if (pj.contains("noise_sigma")) p.noise_sigma = pj["noise_sigma"].get<double>();
        c.plant = p;
    }
    if (j.contains("hooks")) {
        c.hooks.clear();
        for (const auto& h : j["hooks"])
            c.hooks.push_back(component_from_string(h.get<std::string>()));
    }
    if (j.contains("k")) c.k = j["k"].get<int>();
    if (j.contains("k_label")) c.k_label = j["k_label"].get<int>();
    if (j.contains("alphas")) c.alphas = j["alphas"].get<std::vector<double>>();
    if (j.contains("sensitivity_alphas"))
        c.sensitivity_alphas = j["sensitivity_alphas"].get<std::vector<double>>();
    if (j.contains("folds")) c.folds = j["folds"].get<int>();
    if (j.contains("B_random")) c.B_random = j["B_random"].get<int>();
    if (j.contains("B_shuffle")) c.B_shuffle = j["B_shuffle"].get<int>();
    if (j.contains("B_signflip")) c.B_signflip = j["B_signflip"].get<int>();
    if (j.contains("n_probe_baselines"))
        c.n_probe_baselines = j["n_probe_baselines"].get<int>();
    if (j.contains("n_steering_baseline_seeds"))
        c.n_steering_baseline_seeds = j["n_steering_baseline_seeds"].get<int>();
    if (j.contains("contamination_alpha"))
        c.contamination_alpha = j["contamination_alpha"].get<double>();
    if (j.contains("base_seed")) c.base_seed = j["base_seed"].get<std::uint64_t>();
    if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
    if (j.contains("strict_schema")) c.strict_schema = j["strict_schema"].get<bool>();
    if (j.contains("final_norm")) c.final_norm = j["final_norm"].get<bool>();
    if (j.contains("synth")) {
        const auto& sj = j["synth"];
        if (sj.contains("n_layers")) c.synth.n_layers = sj["n_layers"].get<int>();
        if (sj.contains("d_model")) c.synth.d_model = sj["d_model"].get<int>();
        if (sj.contains("n_heads")) c.synth.n_heads = sj["n_heads"].get<int>();
        if (sj.contains("d_mlp")) c.synth.d_mlp = sj["d_mlp"].get<int>();
        if (sj.contains("max_seq_len")) c.synth.max_seq_len = sj["max_seq_len"].get<int>();
        if (sj.contains("per_op_n")) c.synth.per_op_n = sj["per_op_n"].get<int>();
    }
    c.validate();
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw LoadError("cannot open config file \"" + path + "\"");
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("\"" + path + "\": malformed config JSON: " + e.what());
    }
    return config_from_json(j);
}

inline std::string config_hash(const RunConfig& c) {
    return fnv1a64_hex(config_to_json(c).dump());
}

/// Append/replace this stage's entry in run_manifest.json. The manifest holds
/// the only timestamps in the output tree.
inline void record_stage(const RunConfig& cfg, const std::string& stage,
                         const std::string& started,
                         const std::vector<std::string>& outputs) {
    fs::path mpath = fs::path(cfg.output_dir) / "run_manifest.json";
    nlohmann::json m;
    if (fs::exists(mpath)) {
        std::ifstream f(mpath);
        try {
            f >> m;
        } catch (const nlohmann::json::exception&) {
            m = nlohmann::json::object();
        }
    }
    m["config_hash"] = config_hash(cfg);
    m["base_seed"] = cfg.base_seed;
    nlohmann::json entry;
    entry["started_at"] = started;
    entry["finished_at"] = now_iso8601();
    entry["outputs"] = outputs;
    m["stages"][stage] = entry;
    write_artifact(mpath, m.dump(2) + "\n");
}

// --- shared loading --------------------------------------------------------

struct DeltaSet {
    // (layer, component) -> operation -> deltas
    std::map<std::pair<int, Component>, std::map<Operation, DeltaMatrix>> cells;
    int d_model = 0;
};

inline DeltaSet group_deltas(std::vector<DeltaMatrix> flat) {
    DeltaSet set;
    for (auto& d : flat) {
        set.d_model = static_cast<int>(d.rows.cols());
        set.cells[{d.hook.layer, d.hook.component}].emplace(d.operation, std::move(d));
    }
    return set;
}

struct SubspaceSet {
    std::map<std::tuple<std::string, int, int>, Subspace> by_key;

    void add(Subspace s) {
        by_key[{s.source.tag, s.source.layer, static_cast<int>(s.source.component)}] =
            std::move(s);
    }
    const Subspace* find(const std::string& tag, int layer, Component c) const {
        auto it = by_key.find({tag, layer, static_cast<int>(c)});
        return it == by_key.end() ? nullptr : &it->second;
    }
};

inline DeltaSet load_delta_set(const RunConfig& cfg) {
    return group_deltas(load_deltas((fs::path(cfg.output_dir) / "deltas.act").string()));
}

inline SubspaceSet load_subspace_set(const RunConfig& cfg) {
    SubspaceSet set;
    for (auto& s : load_subspaces((fs::path(cfg.output_dir) / "subspaces.act").string()))
        set.add(std::move(s));
    return set;
}

// --- stages ----------------------------------------------------------------

inline void stage_synth(const RunConfig& cfg, std::ostream& log) {
    std::string started = now_iso8601();
    std::vector<std::string> outputs;
    fs::create_directories(cfg.output_dir);

    if (cfg.plant) {
        PlantSpec spec = make_orthogonal_plant(kNumOperations, cfg.plant->per_op_n,
                                               cfg.plant->dim, cfg.plant->k_true,
                                               cfg.plant->shift_scale,
                                               cfg.plant->noise_sigma,
                                               cfg.base_seed + kSeedPlant);
        PlantResult planted = plant_deltas(spec);
        std::vector<DeltaMatrix> deltas;
        auto ops = all_operations();
        for (int o = 0; o < spec.n_ops; ++o) {
            DeltaMatrix d;
            d.operation = ops[static_cast<std::size_t>(o)];
            d.hook = {0, Component::resid_post};
            d.rows = planted.deltas[static_cast<std::size_t>(o)];
            for (int i = 0; i < spec.per_op_n; ++i)
                d.example_ids.push_back(std::string(to_string(d.operation)) + "_" +
                                        std::to_string(i));
            deltas.push_back(std::move(d));
        }
        fs::path dpath = fs::path(cfg.output_dir) / "deltas.act";
        write_artifact_with(dpath, [&](const std::string& p) { save_deltas(deltas, p); });
        outputs.push_back("deltas.act");
        write_artifact(fs::path(cfg.output_dir) / "plant_truth.json",
                       plant_truth_to_json(spec).dump(2) + "\n");
        outputs.push_back("plant_truth.json");
        log << "synth: planted " << spec.n_ops << " x " << spec.per_op_n
            << " deltas at dim " << spec.dim << "\n";
    } else {
        ModelConfig mc;
        mc.n_layers = cfg.synth.n_layers;
        mc.d_model = cfg.synth.d_model;
        mc.n_heads = cfg.synth.n_heads;
        mc.d_mlp = cfg.synth.d_mlp;
        mc.max_seq_len = cfg.synth.max_seq_len;
        mc.final_norm = cfg.final_norm;

        auto vocab_lines = synth::vocab_lines();
        mc.vocab_size = static_cast<int>(vocab_lines.size());
        WeightBundle model = synth::make_model(mc, cfg.base_seed + kSeedModel);

        fs::path mpath = resolve(cfg, cfg.model_path);
        write_artifact_with(mpath, [&](const std::string& p) { save_weights(model, p); });
        outputs.push_back(cfg.model_path);

        std::string vtext;
        for (const auto& line : vocab_lines) vtext += line + "\n";
        write_artifact(resolve(cfg, cfg.vocab_path), vtext);
        outputs.push_back(cfg.vocab_path);

        Dataset ds = synth::make_dataset(cfg.synth.per_op_n, cfg.base_seed + kSeedDataset);
        write_artifact(resolve(cfg, cfg.dataset_path), dataset_to_json(ds).dump(2) + "\n");
        outputs.push_back(cfg.dataset_path);
        log << "synth: wrote model (" << mc.n_layers << " layers, d=" << mc.d_model
            << "), vocab (" << mc.vocab_size << " tokens), dataset ("
            << ds.total() << " pairs)\n";
    }
    record_stage(cfg, "synth", started, outputs);
}

inline void stage_extract(const RunConfig& cfg, std::ostream& log) {
    std::string started = now_iso8601();
    if (cfg.plant) {
        fs::path dpath = fs::path(cfg.output_dir) / "deltas.act";
        if (!fs::exists(dpath))
            throw ValidationError("extract: plant mode but deltas.act missing; run synth");
        log << "extract: plant mode, deltas already synthesized\n";
        record_stage(cfg, "extract", started, {});
        return;
    }

    WeightBundle model = load_weights(resolve(cfg, cfg.model_path).string());
    Vocab vocab = load_vocab(resolve(cfg, cfg.vocab_path).string());
    Dataset ds = load_dataset(resolve(cfg, cfg.dataset_path).string(), cfg.strict_schema);
    for (const auto& w : ds.warnings) log << "extract: " << w << "\n";

    std::vector<HookPoint> hooks;
    for (int l = 0; l < model.config.n_layers; ++l)
        for (Component c : cfg.hooks) hooks.push_back({l, c});

    ExtractLog elog;
    ActivationStore store = extract(model, vocab, ds, hooks, &elog);
    for (const auto& m : elog.messages) log << "extract: " << m << "\n";
    store.model_hash = hash_file(resolve(cfg, cfg.model_path).string());

    fs::path apath = fs::path(cfg.output_dir) / "activations.act";
    write_artifact_with(apath, [&](const std::string& p) { save_store(store, p); });

    std::vector<DeltaMatrix> deltas;
    for (const auto& [op, pairs] : ds.groups)
        for (const auto& h : hooks)
            if (store.find(op, h, Variant::clean)) deltas.push_back(compute_deltas(store, op, h));
    fs::path dpath = fs::path(cfg.output_dir) / "deltas.act";
    write_artifact_with(dpath, [&](const std::string& p) {
        save_deltas(deltas, p, store.model_hash);
    });
    log << "extract: " << store.matrices.size() << " activation matrices, "
        << deltas.size() << " delta matrices\n";
    record_stage(cfg, "extract", started, {"activations.act", "deltas.act"});
}

inline void stage_subspaces(const RunConfig& cfg, std::ostream& log) {
    std::string started = now_iso8601();
    DeltaSet deltas = load_delta_set(cfg);

    std::vector<Subspace> out;
    for (const auto& [cell, by_op] : deltas.cells) {
        for (const auto& [op, d] : by_op) out.push_back(fit_subspace(d, cfg.k));

        // label subspace per cell when both label groups are present
        std::vector<const DeltaMatrix*> contra, neutral;
        for (const auto& [op, d] : by_op)
            (target_label(op) == NliLabel::CONTRADICTION ? contra : neutral).push_back(&d);
        if (!contra.empty() && !neutral.empty()) {
            auto stack = [](const std::vector<const DeltaMatrix*>& group) {
                long n = 0;
                for (const auto* d : group) n += d->rows.rows();
                DeltaMatrix s;
                s.hook = group.front()->hook;
                s.rows.resize(n, group.front()->rows.cols());
                long row = 0;
                for (const auto* d : group) {
                    s.rows.middleRows(row, d->rows.rows()) = d->rows;
                    row += d->rows.rows();
                }
                return s;
            };
            out.push_back(label_subspace(stack(contra), stack(neutral), cfg.k_label));
        }
    }
    fs::path spath = fs::path(cfg.output_dir) / "subspaces.act";
    write_artifact_with(spath, [&](const std::string& p) { save_subspaces(out, p); });
    log << "subspaces: fitted " << out.size() << " subspaces (k=" << cfg.k << ")\n";
    record_stage(cfg, "subspaces", started, {"subspaces.act"});
}

inline void stage_selectivity(const RunConfig& cfg, std::ostream& log) {
    std::string started = now_iso8601();
    DeltaSet deltas = load_delta_set(cfg);
    SubspaceSet subspaces = load_subspace_set(cfg);

    CsvWriter csv({"layer", "component", "operation", "n_on", "n_off", "rho", "mu_on",
                   "mu_off", "cohens_d", "p_random", "rho_resid", "overlap_label"});
    nlohmann::json cells = nlohmann::json::array();

    for (const auto& [cell, by_op] : deltas.cells) {
        auto [layer, comp] = cell;
        const Subspace* label_sub = subspaces.find("label", layer, comp);

        // residualised deltas and their refitted subspaces, when available
        std::map<Operation, DeltaMatrix> resid;
        std::map<Operation, Subspace> resid_sub;
        if (label_sub) {
            for (const auto& [op, d] : by_op) {
                DeltaMatrix r = residualise(d, *label_sub);
                try {
                    resid_sub.emplace(op, fit_subspace(r, cfg.k));
                } catch (const ValidationError&) {
                    // rank-deficient after residualisation; skip this op
                }
                resid.emplace(op, std::move(r));
            }
        }

        std::vector<Operation> ops;
        for (const auto& [op, d] : by_op) ops.push_back(op);

        double rho_sum = 0.0, d_sum = 0.0;
        int rho_count = 0;
        Eigen::MatrixXd sel_matrix(static_cast<long>(ops.size()),
                                   static_cast<long>(ops.size()));
        nlohmann::json per_op = nlohmann::json::array();

        for (std::size_t i = 0; i < ops.size(); ++i) {
            Operation op = ops[i];
            const Subspace* s = subspaces.find(to_string(op), layer, comp);
            if (!s)
                throw ValidationError(std::string("selectivity: missing subspace for ") +
                                      to_string(op));
            const DeltaMatrix& on = by_op.at(op);
            std::vector<const DeltaMatrix*> off;
            for (Operation o2 : ops)
                if (o2 != op) off.push_back(&by_op.at(o2));

            SelectivityReport rep = selectivity(on, off, *s);
            std::vector<double> on_e = projection_energies(on.rows, *s);
            std::vector<double> off_e;
            for (const auto* m : off) {
                auto e = projection_energies(m->rows, *s);
                off_e.insert(off_e.end(), e.begin(), e.end());
            }
            rep.cohens_d = cohens_d(on_e, off_e);
            rep.p_random = selectivity_null_random(
                on, off, *s, cfg.B_random,
                cfg.base_seed + 1000 * static_cast<std::uint64_t>(layer));

            for (std::size_t j = 0; j < ops.size(); ++j) {
                auto ee = projection_energies(by_op.at(ops[j]).rows, *s);
                double mean = 0.0;
                for (double x : ee) mean += x;
                sel_matrix(static_cast<long>(i), static_cast<long>(j)) =
                    mean / static_cast<double>(ee.size());
            }

            double rho_resid = kNaN;
            if (label_sub && resid_sub.count(op)) {
                std::vector<const DeltaMatrix*> off_r;
                bool ok = true;
                for (Operation o2 : ops)
                    if (o2 != op) {
                        if (!resid.count(o2)) { ok = false; break; }
                        off_r.push_back(&resid.at(o2));
                    }
                if (ok) {
                    try {
                        rho_resid =
                            selectivity(resid.at(op), off_r, resid_sub.at(op)).rho;
                    } catch (const ValidationError&) {
                    }
                }
            }
            double overlap = label_sub ? subspace_overlap(*label_sub, *s) : kNaN;

            rho_sum += rep.rho;
            d_sum += rep.cohens_d;
            ++rho_count;
            csv.write_row({std::to_string(layer), to_string(comp), to_string(op),
                           std::to_string(rep.n_on), std::to_string(rep.n_off),
                           csv_num(rep.rho), csv_num(rep.mu_on), csv_num(rep.mu_off),
                           csv_num(rep.cohens_d), csv_num(rep.p_random),
                           csv_num(rho_resid), csv_num(overlap)});
            nlohmann::json jo;
            jo["operation"] = to_string(op);
            jo["rho"] = rep.rho;
            jo["cohens_d"] = rep.cohens_d;
            jo["p_random"] = rep.p_random;
            jo["rho_resid"] = rho_resid;
            jo["overlap_label"] = overlap;
            per_op.push_back(jo);
        }

        // matrix-level shuffle test and diagnostics
        double p_shuffle = kNaN;
        if (ops.size() >= 2)
            p_shuffle = selectivity_null_shuffle(
                sel_matrix, cfg.B_shuffle,
                cfg.base_seed + kSeedShuffle +
                    1000 * static_cast<std::uint64_t>(layer) +
                    static_cast<std::uint64_t>(comp));

        // silhouette on rank-k projections and on PCA-2D
        long total_rows = 0;
        for (const auto& [op, d] : by_op) total_rows += d.rows.rows();
        Eigen::MatrixXd pooled(total_rows, deltas.d_model);
        std::vector<int> labels(static_cast<std::size_t>(total_rows));
        {
            long row = 0;
            int lab = 0;
            for (const auto& op : ops) {
                const auto& m = by_op.at(op).rows;
                pooled.middleRows(row, m.rows()) = m;
                for (long i = 0; i < m.rows(); ++i)
                    labels[static_cast<std::size_t>(row + i)] = lab;
                row += m.rows();
                ++lab;
            }
        }
        double sil_rank_k = kNaN, sil_pca2 = kNaN;
        if (ops.size() >= 2) {
            std::vector<const Subspace*> op_subs;
            for (const auto& op : ops)
                op_subs.push_back(subspaces.find(to_string(op), layer, comp));
            Eigen::MatrixXd feats = projected_features(pooled, op_subs);
            sil_rank_k = silhouette(feats, labels);

            Eigen::VectorXd mean = pooled.colwise().mean();
            Eigen::MatrixXd centered = pooled.rowwise() - mean.transpose();
            Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
            if (svd.singularValues().size() >= 2 &&
                svd.singularValues()[1] > 1e-10 * svd.singularValues()[0])
                sil_pca2 = silhouette(centered * svd.matrixV().leftCols(2), labels);
        }

        double label_var = kNaN;
        if (label_sub) {
            DeltaMatrix all;
            all.rows = pooled;
            label_var = variance_explained(all, *label_sub);
        }

        nlohmann::json jc;
        jc["layer"] = layer;
        jc["component"] = to_string(comp);
        jc["p_shuffle"] = p_shuffle;
        jc["silhouette_rank_k"] = sil_rank_k;
        jc["silhouette_pca2d"] = sil_pca2;
        jc["label_variance_share"] = label_var;
        jc["mean_rho"] = rho_count ? rho_sum / rho_count : kNaN;
        jc["mean_cohens_d"] = rho_count ? d_sum / rho_count : kNaN;
        jc["per_op"] = per_op;
        cells.push_back(jc);
    }

    write_artifact(fs::path(cfg.output_dir) / "selectivity.csv", csv.str());
    nlohmann::json summary;
    summary["cells"] = cells;
    write_artifact(fs::path(cfg.output_dir) / "selectivity_summary.json",
                   summary.dump(2) + "\n");
    log << "selectivity: " << cells.size() << " (layer, component) cells\n";
    record_stage(cfg, "selectivity", started,
                 {"selectivity.csv", "selectivity_summary.json"});
}

inline void stage_classify(const RunConfig& cfg, std::ostream& log) {
    std::string started = now_iso8601();
    DeltaSet deltas = load_delta_set(cfg);
    SubspaceSet subspaces = load_subspace_set(cfg);

    CsvWriter csv({"layer", "component", "mean_accuracy", "sd_accuracy",
                   "baseline_mean", "fold_accuracies"});
    CsvWriter wcsv({"layer", "component", "label_group", "mean_accuracy", "sd_accuracy",
                    "mean_accuracy_residualised"});
    nlohmann::json cells = nlohmann::json::array();

    for (const auto& [cell, by_op] : deltas.cells) {
        auto [layer, comp] = cell;
        std::vector<Operation> ops;
        for (const auto& [op, d] : by_op) ops.push_back(op);
        if (ops.size() < 2) continue;

        long total_rows = 0;
        for (const auto& [op, d] : by_op) total_rows += d.rows.rows();
        Eigen::MatrixXd pooled(total_rows, deltas.d_model);
        std::vector<int> y(static_cast<std::size_t>(total_rows));
        {
            long row = 0;
            for (std::size_t c = 0; c < ops.size(); ++c) {
                const auto& m = by_op.at(ops[c]).rows;
                pooled.middleRows(row, m.rows()) = m;
                for (long i = 0; i < m.rows(); ++i)
                    y[static_cast<std::size_t>(row + i)] = static_cast<int>(c);
                row += m.rows();
            }
        }

        std::vector<const Subspace*> op_subs;
        for (const auto& op : ops)
            op_subs.push_back(subspaces.find(to_string(op), layer, comp));
        Eigen::MatrixXd feats = projected_features(pooled, op_subs);

        std::uint64_t fold_seed = cfg.base_seed + kSeedFolds +
                                  1000 * static_cast<std::uint64_t>(layer) +
                                  static_cast<std::uint64_t>(comp);
        ClassifierReport rep =
            train_probe(feats, y, static_cast<int>(ops.size()), cfg.folds, fold_seed);

        // random-subspace chance reference
        double baseline_sum = 0.0;
        for (int b = 0; b < cfg.n_probe_baselines; ++b) {
            std::vector<Subspace> rand_subs;
            std::vector<const Subspace*> refs;
            for (std::size_t slot = 0; slot < ops.size(); ++slot)
                rand_subs.push_back(random_subspace(
                    deltas.d_model, cfg.k,
                    cfg.base_seed + 1000 * static_cast<std::uint64_t>(layer) +
                        static_cast<std::uint64_t>(b) * ops.size() + slot));
            for (const auto& s : rand_subs) refs.push_back(&s);
            Eigen::MatrixXd rf = projected_features(pooled, refs);
            baseline_sum +=
                train_probe(rf, y, static_cast<int>(ops.size()), cfg.folds, fold_seed)
                    .mean_accuracy;
        }
        rep.baseline_mean = baseline_sum / cfg.n_probe_baselines;

        std::string folds_str;
        for (std::size_t i = 0; i < rep.fold_accuracies.size(); ++i) {
            if (i) folds_str += ";";
            folds_str += format_double(rep.fold_accuracies[i]);
        }
        csv.write_row({std::to_string(layer), to_string(comp),
                       csv_num(rep.mean_accuracy), csv_num(rep.sd_accuracy),
                       csv_num(rep.baseline_mean), folds_str});

        nlohmann::json jc;
        jc["layer"] = layer;
        jc["component"] = to_string(comp);
        jc["mean_accuracy"] = rep.mean_accuracy;
        jc["sd_accuracy"] = rep.sd_accuracy;
        jc["baseline_mean"] = rep.baseline_mean;
        jc["fold_accuracies"] = rep.fold_accuracies;
        nlohmann::json conf = nlohmann::json::array();
        for (long i = 0; i < rep.confusion.rows(); ++i) {
            nlohmann::json r = nlohmann::json::array();
            for (long j = 0; j < rep.confusion.cols(); ++j) r.push_back(rep.confusion(i, j));
            conf.push_back(r);
        }
        jc["confusion"] = conf;

        // within-label probes, raw and label-residualised
        const Subspace* label_sub = subspaces.find("label", layer, comp);
        nlohmann::json within = nlohmann::json::array();
        for (NliLabel group : {NliLabel::CONTRADICTION, NliLabel::NEUTRAL}) {
            std::map<Operation, DeltaMatrix> group_deltas_raw;
            for (const auto& [op, d] : by_op)
                if (target_label(op) == group) group_deltas_raw.emplace(op, d);
            if (group_deltas_raw.size() != 3) continue;
            double mean = kNaN, sd = kNaN, mean_resid = kNaN;
            try {
                ClassifierReport wrep = within_label_probe(group_deltas_raw, group, cfg.k,
                                                           cfg.folds, fold_seed);
                mean = wrep.mean_accuracy;
                sd = wrep.sd_accuracy;
            } catch (const ValidationError& e) {
                log << "classify: within-label (" << to_string(group) << ") skipped: "
                    << e.what() << "\n";
            }
            if (label_sub) {
                try {
                    std::map<Operation, DeltaMatrix> group_resid;
                    for (const auto& [op, d] : group_deltas_raw)
                        group_resid.emplace(op, residualise(d, *label_sub));
                    mean_resid = within_label_probe(group_resid, group, cfg.k, cfg.folds,
                                                    fold_seed)
                                     .mean_accuracy;
                } catch (const ValidationError&) {
                }
            }
            wcsv.write_row({std::to_string(layer), to_string(comp), to_string(group),
                            csv_num(mean), csv_num(sd), csv_num(mean_resid)});
            nlohmann::json jw;
            jw["label_group"] = to_string(group);
            jw["mean_accuracy"] = mean;
            jw["sd_accuracy"] = sd;
            jw["mean_accuracy_residualised"] = mean_resid;
            within.push_back(jw);
        }
        jc["within_label"] = within;
        cells.push_back(jc);
    }

    write_artifact(fs::path(cfg.output_dir) / "classification.csv", csv.str());
    write_artifact(fs::path(cfg.output_dir) / "within_label.csv", wcsv.str());
    nlohmann::json summary;
    summary["cells"] = cells;
    write_artifact(fs::path(cfg.output_dir) / "classify_summary.json",
                   summary.dump(2) + "\n");
    log << "classify: " << cells.size() << " (layer, component) cells\n";
    record_stage(cfg, "classify", started,
                 {"classification.csv", "within_label.csv", "classify_summary.json"});
}

}  // namespace pipeline
}  // namespace opscope
