// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
#include "blockquant/container.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "blockquant/errors.hpp"

namespace bq {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is, const std::string& file) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw load_error("truncated file: " + file);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_f32(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(os, bits);
}

float read_f32(std::istream& is, const std::string& file) {
    const uint32_t bits = read_u32(is, file);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

void check_magic(std::istream& is, const char* magic, const std::string& file) {
    char buf[4];
    if (!is.read(buf, 4) || std::memcmp(buf, magic, 4) != 0) {
        throw load_error("bad magic in " + file);
    }
}

}  // namespace

void write_tensor(const fs::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw load_error("cannot open for writing: " + path.string());
    os.write("BQTN", 4);
    write_u32(os, static_cast<uint32_t>(t.rank()));
    for (int64_t e : t.shape()) write_u32(os, static_cast<uint32_t>(e));
    for (int64_t i = 0; i < t.numel(); ++i) write_f32(os, static_cast<float>(t[i]));
    if (!os) throw load_error("write failed: " + path.string());
}

Tensor read_tensor(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw load_error("cannot open: " + path.string());
    const std::string name = path.string();
    check_magic(is, "BQTN", name);
    const uint32_t rank = read_u32(is, name);
    if (rank > 8) throw load_error("implausible tensor rank in " + name);
    std::vector<int64_t> shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = read_u32(is, name);
    Tensor t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(read_f32(is, name));
    return t;
}

void write_dataset(const fs::path& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw load_error("cannot open for writing: " + path.string());
    os.write("BQTD", 4);
    const uint32_t count = static_cast<uint32_t>(ds.count());
    write_u32(os, count);
    const auto& shape = ds.inputs.shape();
    write_u32(os, static_cast<uint32_t>(shape.size() - 1));
    for (size_t i = 1; i < shape.size(); ++i) write_u32(os, static_cast<uint32_t>(shape[i]));
    for (int64_t i = 0; i < ds.inputs.numel(); ++i) write_f32(os, static_cast<float>(ds.inputs[i]));
    for (int label : ds.labels) write_u32(os, static_cast<uint32_t>(label));
    if (!os) throw load_error("write failed: " + path.string());
}

Dataset read_dataset(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw load_error("cannot open: " + path.string());
    const std::string name = path.string();
    check_magic(is, "BQTD", name);
    const uint32_t count = read_u32(is, name);
    const uint32_t rank = read_u32(is, name);
    if (count == 0) throw load_error("empty dataset: " + name);
    if (rank > 7) throw load_error("implausible sample rank in " + name);
    std::vector<int64_t> shape{static_cast<int64_t>(count)};
    for (uint32_t i = 0; i < rank; ++i) shape.push_back(read_u32(is, name));
    Dataset ds;
    ds.inputs = Tensor(shape);
    for (int64_t i = 0; i < ds.inputs.numel(); ++i) {
        ds.inputs[i] = static_cast<double>(read_f32(is, name));
    }
    ds.labels.resize(count);
    for (uint32_t i = 0; i < count; ++i) ds.labels[i] = static_cast<int>(read_u32(is, name));
    return ds;
}

namespace {

json shape_json(const Tensor& t) {
    json arr = json::array();
    for (int64_t e : t.shape()) arr.push_back(e);
    return arr;
}

std::string kind_str(LayerKind k) { return k == LayerKind::Linear ? "linear" : "conv2d"; }

LayerKind kind_from(const std::string& s) {
    if (s == "linear") return LayerKind::Linear;
    if (s == "conv2d") return LayerKind::Conv2d;
    throw load_error("unknown layer kind: " + s);
}

}  // namespace

void save_model(const fs::path& dir, const NetworkModel& model, const ModelQuantState* qs) {
    fs::create_directories(dir);
    json manifest;
    manifest["format"] = "bqmodel-v1";
    manifest["classes"] = model.num_classes;
    manifest["input_shape"] = model.input_shape;
    json layers = json::array();
    for (const auto& layer : model.layers) {
        json jl;
        jl["name"] = layer.name;
        jl["kind"] = kind_str(layer.kind);
        jl["quantizable"] = layer.quantizable;
        jl["weight_file"] = layer.name + ".weight.bqt";
        jl["weight_shape"] = shape_json(layer.weight);
        jl["bias_file"] = layer.name + ".bias.bqt";
        if (layer.kind == LayerKind::Conv2d) {
            jl["stride"] = layer.stride;
            jl["padding"] = layer.padding;
        }
        write_tensor(dir / (layer.name + ".weight.bqt"), layer.weight);
        write_tensor(dir / (layer.name + ".bias.bqt"), layer.bias);
        if (layer.bn) {
            json jb;
            jb["gamma_file"] = layer.name + ".bn_gamma.bqt";
            jb["beta_file"] = layer.name + ".bn_beta.bqt";
            jb["mean_file"] = layer.name + ".bn_mean.bqt";
            jb["var_file"] = layer.name + ".bn_var.bqt";
            jb["epsilon"] = layer.bn->epsilon;
            write_tensor(dir / (layer.name + ".bn_gamma.bqt"), layer.bn->gamma);
            write_tensor(dir / (layer.name + ".bn_beta.bqt"), layer.bn->beta);
            write_tensor(dir / (layer.name + ".bn_mean.bqt"), layer.bn->mean);
            write_tensor(dir / (layer.name + ".bn_var.bqt"), layer.bn->var);
            jl["bn"] = jb;
        }
        layers.push_back(jl);
    }
    manifest["layers"] = layers;
    json blocks = json::array();
    for (auto [f, l] : model.blocks) blocks.push_back(json::array({f, l}));
    manifest["blocks"] = blocks;
    json stages = json::array();
    for (auto [f, l] : model.stages) stages.push_back(json::array({f, l}));
    manifest["stages"] = stages;
    json links = json::array();
    for (const auto& link : model.residual_links) {
        links.push_back(json{{"from", link.from}, {"to", link.to}});
    }
    manifest["residual_links"] = links;
    manifest["meta"] = model.meta;
    if (qs && qs->any()) {
        json jq;
        for (int l = 0; l < model.layer_count(); ++l) {
            const LayerQuantState& ls = qs->layers[l];
            if (!ls.enabled && !ls.has_act) continue;
            const std::string& name = model.layers[l].name;
            json je;
            if (ls.enabled) {
                je["w_bits"] = ls.qp.bits;
                je["mode"] = ls.qp.mode == RoundingMode::AdaRound ? "adaround" : "nearest";
                je["per_channel"] = ls.qp.per_channel;
                je["step_file"] = name + ".qstep.bqt";
                write_tensor(dir / (name + ".qstep.bqt"), ls.qp.step);
                if (ls.qp.mode == RoundingMode::AdaRound) {
                    je["vround_file"] = name + ".vround.bqt";
                    write_tensor(dir / (name + ".vround.bqt"), ls.ada.v);
                }
            }
            if (ls.has_act) {
                je["act_bits"] = ls.act_bits;
                je["act_step_file"] = name + ".astep.bqt";
                write_tensor(dir / (name + ".astep.bqt"), Tensor::scalar(ls.act_step));
            }
            jq[name] = je;
        }
        manifest["quant"] = jq;
    }
    std::ofstream os(dir / "manifest.json");
    if (!os) throw load_error("cannot write manifest in " + dir.string());
    os << manifest.dump(2) << "\n";
}

LoadedModel load_model(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    if (!fs::exists(manifest_path)) throw load_error("manifest.json not found in " + dir.string());
    std::ifstream is(manifest_path);
    json manifest;
    try {
        is >> manifest;
    } catch (const json::exception& e) {
        throw load_error("malformed manifest.json in " + dir.string() + ": " + e.what());
    }
    LoadedModel out;
    NetworkModel& model = out.model;
    try {
        model.num_classes = manifest.at("classes").get<int>();
        model.input_shape = manifest.at("input_shape").get<std::vector<int64_t>>();
        for (const auto& jl : manifest.at("layers")) {
            LayerSpec layer;
            layer.name = jl.at("name").get<std::string>();
            layer.kind = kind_from(jl.at("kind").get<std::string>());
            layer.quantizable = jl.value("quantizable", true);
            layer.weight = read_tensor(dir / jl.at("weight_file").get<std::string>());
            layer.bias = read_tensor(dir / jl.at("bias_file").get<std::string>());
            if (jl.contains("weight_shape")) {
                const auto want = jl["weight_shape"].get<std::vector<int64_t>>();
                if (want != layer.weight.shape()) {
                    throw load_error("weight shape mismatch for " + layer.name + " in " +
                                     jl.at("weight_file").get<std::string>());
                }
            }
            layer.stride = jl.value("stride", 1);
            layer.padding = jl.value("padding", 0);
            if (jl.contains("bn")) {
                BatchNormSpec bn;
                const auto& jb = jl["bn"];
                bn.gamma = read_tensor(dir / jb.at("gamma_file").get<std::string>());
                bn.beta = read_tensor(dir / jb.at("beta_file").get<std::string>());
                bn.mean = read_tensor(dir / jb.at("mean_file").get<std::string>());
                bn.var = read_tensor(dir / jb.at("var_file").get<std::string>());
                bn.epsilon = jb.at("epsilon").get<double>();
                layer.bn = bn;
            }
            model.layers.push_back(std::move(layer));
        }
        for (const auto& jb : manifest.at("blocks")) {
            model.blocks.push_back({jb.at(0).get<int>(), jb.at(1).get<int>()});
        }
        if (manifest.contains("stages")) {
            for (const auto& js : manifest["stages"]) {
                model.stages.push_back({js.at(0).get<int>(), js.at(1).get<int>()});
            }
        }
        if (manifest.contains("residual_links")) {
            for (const auto& jr : manifest["residual_links"]) {
                model.residual_links.push_back({jr.at("from").get<int>(), jr.at("to").get<int>()});
            }
        }
        if (manifest.contains("meta")) {
            for (auto it = manifest["meta"].begin(); it != manifest["meta"].end(); ++it) {
                model.meta[it.key()] = it.value().get<double>();
            }
        }
        out.quant.layers.assign(model.layers.size(), LayerQuantState{});
        if (manifest.contains("quant")) {
            for (auto it = manifest["quant"].begin(); it != manifest["quant"].end(); ++it) {
                const int idx = model.layer_index(it.key());
                const json& je = it.value();
                LayerQuantState& ls = out.quant.layers[idx];
                if (je.contains("w_bits")) {
                    const int bits = je.at("w_bits").get<int>();
                    const bool per_channel = je.value("per_channel", false);
                    Tensor step = read_tensor(dir / je.at("step_file").get<std::string>());
                    const RoundingMode mode = je.value("mode", std::string("nearest")) == "adaround"
                                                  ? RoundingMode::AdaRound
                                                  : RoundingMode::Nearest;
                    ls.qp = QuantParams::weights(bits, std::move(step), per_channel, mode);
                    if (mode == RoundingMode::AdaRound) {
                        ls.ada.v = read_tensor(dir / je.at("vround_file").get<std::string>());
                    }
                    ls.enabled = true;
                }
                if (je.contains("act_bits")) {
                    ls.act_bits = je.at("act_bits").get<int>();
                    ls.act_step = read_tensor(dir / je.at("act_step_file").get<std::string>())[0];
                    ls.has_act = true;
                }
            }
        }
    } catch (const json::exception& e) {
        throw load_error("malformed manifest.json in " + dir.string() + ": " + e.what());
    }
    model.validate();
    return out;
}

}  // namespace bq
