// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#include "blockquant/mixedprec.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "blockquant/errors.hpp"

namespace bq {

using nlohmann::json;

double SensitivityTable::diag_at(int layer, int bits) const {
    const auto it = diag.find({layer, bits});
    if (it == diag.end()) {
        throw load_error("sensitivity table is missing diag entry for layer " +
                         layer_names.at(static_cast<size_t>(layer)) + " at " + std::to_string(bits) +
                         " bits");
    }
    return it->second;
}

void SensitivityTable::check_monotone(double slack) const {
    for (int l = 0; l < layer_count(); ++l) {
        const double d8 = diag_at(l, 8);
        const double d4 = diag_at(l, 4);
        const double d2 = diag_at(l, 2);
        if (d8 > d4 + slack || d4 > d2 + slack) {
            throw numeric_error("sensitivity not monotone in bitwidth for layer " +
                                layer_names[static_cast<size_t>(l)]);
        }
    }
}

void HardwareTable::validate() const {
    if (constraint != "latency" && constraint != "size") {
        throw load_error("hardware table constraint must be 'latency' or 'size'");
    }
    for (const auto& layer : layers) {
        if (layer.elements <= 0) throw load_error("hardware table: nonpositive element count");
        if (constraint == "latency") {
            double prev = 0.0;
            for (int bits : search_bit_choices()) {
                const auto it = layer.latency_ms.find(bits);
                if (it == layer.latency_ms.end()) {
                    throw load_error("hardware table: missing latency for layer " + layer.id +
                                     " at " + std::to_string(bits) + " bits");
                }
                if (it->second <= 0.0) throw load_error("hardware table: nonpositive latency");
                if (it->second < prev) {
                    throw load_error("hardware table: latency must not increase as bits decrease (" +
                                     layer.id + ")");
                }
                prev = it->second;
            }
        }
    }
}

double hardware_measure(const BitConfig& c, const HardwareTable& table, int act_bits) {
    if (act_bits >= 0 && act_bits != table.act_bits) {
        throw load_error("hardware table was measured at " + std::to_string(table.act_bits) +
                         "-bit activations");
    }
    if (c.size() != table.layers.size()) {
        throw load_error("bit config length does not match hardware table");
    }
    double acc = 0.0;
    for (size_t i = 0; i < c.size(); ++i) {
        if (table.constraint == "size") {
            acc += static_cast<double>(table.layers[i].elements) * c[i] / 8.0;
        } else {
            const auto it = table.layers[i].latency_ms.find(c[i]);
            if (it == table.layers[i].latency_ms.end()) {
                throw load_error("hardware table: missing latency for layer " + table.layers[i].id +
                                 " at " + std::to_string(c[i]) + " bits");
            }
            acc += it->second;
        }
    }
    return table.constraint == "size" ? acc / (1024.0 * 1024.0) : acc;
}

double fitness(const BitConfig& c, const SensitivityTable& table) {
    if (static_cast<int>(c.size()) != table.layer_count()) {
        throw load_error("bit config length does not match sensitivity table");
    }
    double acc = 0.0;
    for (size_t i = 0; i < c.size(); ++i) {
        if (c[i] != 2) acc += table.diag_at(static_cast<int>(i), c[i]);
    }
    for (size_t g = 0; g < table.groups.size(); ++g) {
        const auto& members = table.groups[g];
        uint64_t mask = 0;
        for (size_t m = 0; m < members.size(); ++m) {
            if (c[static_cast<size_t>(members[m])] == 2) mask |= uint64_t{1} << m;
        }
        if (mask == 0) continue;
        if (g < table.group_has_offdiag.size() && !table.group_has_offdiag[g]) {
            for (size_t m = 0; m < members.size(); ++m) {
                if (mask & (uint64_t{1} << m)) acc += table.diag_at(members[m], 2);
            }
            continue;
        }
        const auto it = table.offdiag2.find({static_cast<int>(g), mask});
        if (it == table.offdiag2.end()) {
            throw load_error("sensitivity table is missing a 2-bit permutation entry (group " +
                             std::to_string(g) + ", mask " + std::to_string(mask) + ")");
        }
        acc += it->second;
    }
    return acc;
}

BitConfig crossover(const std::vector<BitConfig>& topk, std::mt19937_64& rng) {
    if (topk.empty()) throw usage_error("crossover: empty archive");
    const BitConfig& a = topk[rng() % topk.size()];
    const BitConfig& b = topk[rng() % topk.size()];
    BitConfig child(a.size());
    for (size_t i = 0; i < a.size(); ++i) child[i] = (rng() & 1) ? a[i] : b[i];
    return child;
}

BitConfig mutate(const BitConfig& parent, double p, std::mt19937_64& rng) {
    BitConfig child = parent;
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    const auto& choices = search_bit_choices();
    for (auto& gene : child) {
        if (coin(rng) < p) gene = choices[rng() % choices.size()];
    }
    return child;
}

namespace {

struct ScoredConfig {
    double fit;
    BitConfig c;
    bool operator<(const ScoredConfig& o) const {
        if (fit != o.fit) return fit < o.fit;
        return c < o.c;
    }
    bool operator==(const ScoredConfig& o) const { return fit == o.fit && c == o.c; }
};

constexpr int kStallLimit = 10000;

}  // namespace

GAResult ga_search(const SensitivityTable& table, const HardwareTable& hw, double delta,
                   const GAConfig& cfg, const AdmitHook* hook) {
    hw.validate();
    const int n = table.layer_count();
    if (static_cast<int>(hw.layers.size()) != n) {
        throw load_error("hardware and sensitivity tables disagree on layer count");
    }
    const BitConfig all2(static_cast<size_t>(n), 2);
    const double min_h = hardware_measure(all2, hw);
    if (min_h > delta) {
        throw constraint_error("infeasible constraint: minimal achievable H is " +
                               std::to_string(min_h));
    }
    std::mt19937_64 rng(cfg.seed);
    int stall = 0;
    auto admit = [&](const BitConfig& c, std::vector<BitConfig>& out) {
        const double h = hardware_measure(c, hw);
        if (h <= delta) {
            if (hook) (*hook)(c, h);
            out.push_back(c);
            stall = 0;
        } else if (++stall >= kStallLimit) {
            throw constraint_error("mixed-precision search stalled: " + std::to_string(kStallLimit) +
                                   " consecutive rejections");
        }
    };

    // initial population: per-gene Gaussian over the choice indices
    std::normal_distribution<double> gauss(1.0, 1.0);
    const auto& choices = search_bit_choices();
    std::vector<BitConfig> population;
    while (static_cast<int>(population.size()) < cfg.population) {
        BitConfig c(static_cast<size_t>(n));
        for (auto& gene : c) {
            const long idx = std::clamp(std::lround(gauss(rng)), 0L, 2L);
            gene = choices[static_cast<size_t>(idx)];
        }
        admit(c, population);
    }

    std::vector<ScoredConfig> archive;
    GAResult result;
    for (int gen = 0; gen < cfg.generations; ++gen) {
        for (const auto& c : population) archive.push_back({fitness(c, table), c});
        std::sort(archive.begin(), archive.end());
        archive.erase(std::unique(archive.begin(), archive.end()), archive.end());
        if (static_cast<int>(archive.size()) > cfg.topk) {
            archive.resize(static_cast<size_t>(cfg.topk));
        }
        result.log.push_back({gen, archive.front().fit, hardware_measure(archive.front().c, hw)});

        std::vector<BitConfig> parents;
        parents.reserve(archive.size());
        for (const auto& s : archive) parents.push_back(s.c);
        std::vector<BitConfig> next;
        const int half = cfg.population / 2;
        while (static_cast<int>(next.size()) < half) admit(crossover(parents, rng), next);
        while (static_cast<int>(next.size()) < cfg.population) {
            const BitConfig& parent = parents[rng() % parents.size()];
            admit(mutate(parent, cfg.mutation_p, rng), next);
        }
        population = std::move(next);
    }
    result.best = archive.front().c;
    result.best_fitness = archive.front().fit;
    result.hardware = hardware_measure(result.best, hw);
    for (const auto& s : archive) result.topk.push_back(s.c);
    return result;
}

std::pair<BitConfig, double> exhaustive_search(const SensitivityTable& table,
                                               const HardwareTable& hw, double delta) {
    hw.validate();
    const int n = table.layer_count();
    if (n > 12) throw usage_error("exhaustive_search is capped at 12 layers");
    if (static_cast<int>(hw.layers.size()) != n) {
        throw load_error("hardware and sensitivity tables disagree on layer count");
    }
    const auto& choices = search_bit_choices();
    std::vector<size_t> odo(static_cast<size_t>(n), 0);
    BitConfig best;
    double best_fit = std::numeric_limits<double>::infinity();
    BitConfig c(static_cast<size_t>(n));
    while (true) {
        for (int i = 0; i < n; ++i) c[static_cast<size_t>(i)] = choices[odo[static_cast<size_t>(i)]];
        if (hardware_measure(c, hw) <= delta) {
            const double fit = fitness(c, table);
            if (fit < best_fit) {
                best_fit = fit;
                best = c;
            }
        }
        int pos = n - 1;
        while (pos >= 0 && odo[static_cast<size_t>(pos)] == choices.size() - 1) {
            odo[static_cast<size_t>(pos)] = 0;
            --pos;
        }
        if (pos < 0) break;
        ++odo[static_cast<size_t>(pos)];
    }
    if (best.empty()) {
        throw constraint_error("infeasible constraint: no configuration satisfies the threshold");
    }
    return {best, best_fit};
}

FpOutputReference fp_output_reference(const NetworkModel& model, const CalibrationSet& calib) {
    FpOutputReference ref;
    for (int64_t b = 0; b < calib.batch_count(); ++b) {
        Graph g;
        ForwardTrace trace = forward_trace(g, model, g.constant(calib.batch_inputs[b]));
        NodeId loss = g.cross_entropy(trace.logits, calib.batch_labels[b]);
        g.backward(loss);
        ref.logits.push_back(g.value(trace.logits));
        ref.out_grads.push_back(g.grad(trace.logits));
    }
    return ref;
}

double output_degradation(const NetworkModel& model, const ModelQuantState& qs,
                          const CalibrationSet& calib, const FpOutputReference& ref) {
    double acc = 0.0;
    int64_t samples = 0;
    for (int64_t b = 0; b < calib.batch_count(); ++b) {
        const Tensor logits = forward_logits(model, calib.batch_inputs[b], &qs);
        const Tensor& fp = ref.logits[static_cast<size_t>(b)];
        const Tensor& grads = ref.out_grads[static_cast<size_t>(b)];
        for (int64_t i = 0; i < logits.numel(); ++i) {
            const double d = grads[i] * (logits[i] - fp[i]);
            acc += d * d;
        }
        samples += logits.dim(0);
    }
    return acc / static_cast<double>(samples);
}

namespace {

// Search-space groups: model blocks plus singletons for non-block layers,
// expressed in quantizable-layer index space.
struct GroupLayout {
    std::vector<int> model_layers;          // quantizable model layer per table index
    std::vector<std::vector<int>> groups;   // table indices per group
    std::vector<std::vector<int>> group_model_layers;
};

GroupLayout build_groups(const NetworkModel& model) {
    GroupLayout layout;
    layout.model_layers = model.quantizable_layers();
    std::map<int, int> table_index;
    for (size_t i = 0; i < layout.model_layers.size(); ++i) {
        table_index[layout.model_layers[i]] = static_cast<int>(i);
    }
    std::vector<std::pair<int, std::vector<int>>> ordered;  // (first layer, members)
    for (auto [first, last] : model.blocks) {
        std::vector<int> members;
        for (int l = first; l <= last; ++l) {
            if (model.layers[l].quantizable) members.push_back(table_index.at(l));
        }
        if (!members.empty()) ordered.push_back({first, std::move(members)});
    }
    for (int l = 0; l < model.layer_count(); ++l) {
        if (model.block_of(l) < 0 && model.layers[l].quantizable) {
            ordered.push_back({l, {table_index.at(l)}});
        }
    }
    std::sort(ordered.begin(), ordered.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto& [first, members] : ordered) {
        (void)first;
        std::vector<int> model_members;
        for (int idx : members) model_members.push_back(layout.model_layers[static_cast<size_t>(idx)]);
        layout.groups.push_back(std::move(members));
        layout.group_model_layers.push_back(std::move(model_members));
    }
    return layout;
}

ModelQuantState weight_only(const ModelQuantState& qs) {
    ModelQuantState out = qs;
    for (auto& l : out.layers) l.has_act = false;
    return out;
}

SensitivityTable measure_impl(const NetworkModel& model, const ModelQuantState* base,
                              const std::vector<std::pair<int, const ModelQuantState*>>& per_bit,
                              const CalibrationSet& calib, int offdiag_cap,
                              const std::string& reference) {
    const GroupLayout layout = build_groups(model);
    SensitivityTable table;
    table.reference = reference;
    for (int l : layout.model_layers) table.layer_names.push_back(model.layers[l].name);
    table.groups = layout.groups;
    const FpOutputReference ref = fp_output_reference(model, calib);
    ModelQuantState empty;
    empty.layers.assign(model.layers.size(), LayerQuantState{});
    const ModelQuantState& base_state = base ? *base : empty;

    for (auto [bits, src] : per_bit) {
        // identical assignments produce identical measurements, so the
        // all-reference case is evaluated once
        if (base && bits == 8) {
            const double v = output_degradation(model, base_state, calib, ref);
            for (size_t i = 0; i < layout.model_layers.size(); ++i) {
                table.diag[{static_cast<int>(i), bits}] = v;
            }
            continue;
        }
        for (size_t i = 0; i < layout.model_layers.size(); ++i) {
            const int ml = layout.model_layers[i];
            ModelQuantState cfg = base_state;
            cfg.layers[ml] = src->layers[ml];
            cfg.layers[ml].has_act = false;
            table.diag[{static_cast<int>(i), bits}] = output_degradation(model, cfg, calib, ref);
        }
    }

    const ModelQuantState* q2 = nullptr;
    for (auto [bits, src] : per_bit) {
        if (bits == 2) q2 = src;
    }
    table.group_has_offdiag.assign(table.groups.size(), false);
    if (q2) {
        for (size_t g = 0; g < table.groups.size(); ++g) {
            const auto& members = layout.group_model_layers[g];
            if (static_cast<int>(members.size()) > offdiag_cap) {
                std::cerr << "[blockquant] group of " << members.size()
                          << " layers exceeds the 2-bit permutation cap; falling back to "
                             "diagonal-only terms\n";
                continue;
            }
            table.group_has_offdiag[g] = true;
            const uint64_t subsets = uint64_t{1} << members.size();
            for (uint64_t mask = 1; mask < subsets; ++mask) {
                ModelQuantState cfg = base_state;
                for (size_t m = 0; m < members.size(); ++m) {
                    if (mask & (uint64_t{1} << m)) {
                        cfg.layers[members[m]] = q2->layers[members[m]];
                        cfg.layers[members[m]].has_act = false;
                    }
                }
                table.offdiag2[{static_cast<int>(g), mask}] =
                    output_degradation(model, cfg, calib, ref);
            }
        }
    }
    return table;
}

}  // namespace

SensitivityTable measure_sensitivities(const NetworkModel& model, const ModelQuantState& q2,
                                       const ModelQuantState& q4, const ModelQuantState& q8,
                                       const CalibrationSet& calib, int offdiag_cap) {
    for (int l : model.quantizable_layers()) {
        if (!q2.layers.at(l).enabled || !q4.layers.at(l).enabled || !q8.layers.at(l).enabled) {
            throw usage_error("measure_sensitivities requires calibrations at 2, 4 and 8 bits");
        }
    }
    const ModelQuantState b2 = weight_only(q2);
    const ModelQuantState b4 = weight_only(q4);
    const ModelQuantState b8 = weight_only(q8);
    return measure_impl(model, &b8, {{2, &b2}, {4, &b4}, {8, &b8}}, calib, offdiag_cap, "int8");
}

SensitivityTable measure_sensitivities_single(const NetworkModel& model, const ModelQuantState& qs,
                                              int bits, const CalibrationSet& calib,
                                              int offdiag_cap) {
    const ModelQuantState wq = weight_only(qs);
    return measure_impl(model, nullptr, {{bits, &wq}}, calib, offdiag_cap, "fp");
}

void save_sensitivity(const std::filesystem::path& path, const SensitivityTable& t) {
    json j;
    j["reference"] = t.reference;
    j["layers"] = t.layer_names;
    j["groups"] = t.groups;
    j["group_has_offdiag"] = std::vector<int>(t.group_has_offdiag.begin(), t.group_has_offdiag.end());
    json diag = json::object();
    for (const auto& [key, value] : t.diag) {
        diag[t.layer_names.at(static_cast<size_t>(key.first))][std::to_string(key.second)] = value;
    }
    j["diag"] = diag;
    json off = json::array();
    for (const auto& [key, value] : t.offdiag2) {
        json e;
        e["group"] = key.first;
        e["mask"] = key.second;
        json subset = json::array();
        const auto& members = t.groups.at(static_cast<size_t>(key.first));
        for (size_t m = 0; m < members.size(); ++m) {
            if (key.second & (uint64_t{1} << m)) {
                subset.push_back(t.layer_names.at(static_cast<size_t>(members[m])));
            }
        }
        e["subset"] = subset;
        e["value"] = value;
        off.push_back(e);
    }
    j["offdiag2"] = off;
    std::ofstream os(path);
    if (!os) throw load_error("cannot write " + path.string());
    os << j.dump(2) << "\n";
}

SensitivityTable load_sensitivity(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw load_error("cannot open " + path.string());
    json j;
    try {
        is >> j;
        SensitivityTable t;
        t.reference = j.value("reference", std::string("int8"));
        t.layer_names = j.at("layers").get<std::vector<std::string>>();
        t.groups = j.at("groups").get<std::vector<std::vector<int>>>();
        for (int v : j.value("group_has_offdiag", std::vector<int>(t.groups.size(), 1))) {
            t.group_has_offdiag.push_back(v != 0);
        }
        std::map<std::string, int> index;
        for (size_t i = 0; i < t.layer_names.size(); ++i) {
            index[t.layer_names[i]] = static_cast<int>(i);
        }
        for (auto it = j.at("diag").begin(); it != j.at("diag").end(); ++it) {
            const int layer = index.at(it.key());
            for (auto bit_it = it.value().begin(); bit_it != it.value().end(); ++bit_it) {
                t.diag[{layer, std::stoi(bit_it.key())}] = bit_it.value().get<double>();
            }
        }
        for (const auto& e : j.value("offdiag2", json::array())) {
            t.offdiag2[{e.at("group").get<int>(), e.at("mask").get<uint64_t>()}] =
                e.at("value").get<double>();
        }
        return t;
    } catch (const json::exception& e) {
        throw load_error("malformed sensitivity table " + path.string() + ": " + e.what());
    }
}

void save_hardware(const std::filesystem::path& path, const HardwareTable& t) {
    json j;
    j["constraint"] = t.constraint;
    j["act_bits"] = t.act_bits;
    json layers = json::array();
    for (const auto& layer : t.layers) {
        json jl;
        jl["id"] = layer.id;
        jl["elements"] = layer.elements;
        json lat = json::object();
        for (const auto& [bits, ms] : layer.latency_ms) lat[std::to_string(bits)] = ms;
        jl["latency_ms"] = lat;
        layers.push_back(jl);
    }
    j["layers"] = layers;
    std::ofstream os(path);
    if (!os) throw load_error("cannot write " + path.string());
    os << j.dump(2) << "\n";
}

HardwareTable load_hardware(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw load_error("cannot open " + path.string());
    json j;
    try {
        is >> j;
        HardwareTable t;
        t.constraint = j.at("constraint").get<std::string>();
        t.act_bits = j.value("act_bits", 8);
        for (const auto& jl : j.at("layers")) {
            HardwareTable::Layer layer;
            layer.id = jl.at("id").get<std::string>();
            layer.elements = jl.at("elements").get<int64_t>();
            if (jl.contains("latency_ms")) {
                for (auto it = jl["latency_ms"].begin(); it != jl["latency_ms"].end(); ++it) {
                    layer.latency_ms[std::stoi(it.key())] = it.value().get<double>();
                }
            }
            t.layers.push_back(std::move(layer));
        }
        t.validate();
        return t;
    } catch (const json::exception& e) {
        throw load_error("malformed hardware table " + path.string() + ": " + e.what());
    }
}

}  // namespace bq
