// Copyright (C) 2026 The blockquant authors
// SPDX-License-Identifier: Apache-2.0
//
// Batch front-end: load model containers and calibration data, run
// calibration / mixed-precision search / evaluation / curvature checks,
// emit report artifacts. Exit codes: 0 ok, 2 load or input error,
// 3 infeasible constraint, 4 numeric failure, 5 precondition failure.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "blockquant/calibration.hpp"
#include "blockquant/container.hpp"
#include "blockquant/errors.hpp"
#include "blockquant/evalutil.hpp"
#include "blockquant/fixtures.hpp"
#include "blockquant/hessian.hpp"
#include "blockquant/mixedprec.hpp"
#include "blockquant/recon.hpp"
#include "blockquant/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Opts {
    std::string model, calib, data, out, config;
    std::string sensitivity, hardware, bit_config;
    std::vector<int> bits{8};
    int act_bits = 8;
    bool quant_acts = false;
    std::string granularity = "block";
    int iters = 2000;
    int batch_size = 32;
    int calib_size = 1024;
    uint64_t seed = 1;
    std::string profile = "desk";
    std::string first_last = "8";
    bool per_channel = false;
    bool fp_inputs = false;  // ablation: no quantized-input propagation
    double lr_round = 1e-3;
    double lr_step = 4e-5;
    double lambda_reg = 0.01;
    // search
    double delta = std::numeric_limits<double>::infinity();
    int population = 50;
    int generations = 100;
    double mutation = 0.1;
    int topk = 10;
    // verify
    std::vector<double> eps{1e-1, 1e-2, 1e-3, 1e-4};
    int samples = 256;
    std::string test;  // optional eval dataset for calibrate reports
};

json opts_json(const Opts& o, const std::string& command) {
    json j;
    j["command"] = command;
    j["model"] = o.model;
    j["calib"] = o.calib;
    j["data"] = o.data;
    j["out"] = o.out;
    j["bits"] = o.bits;
    j["act_bits"] = o.act_bits;
    j["quant_acts"] = o.quant_acts;
    j["granularity"] = o.granularity;
    j["iters"] = o.iters;
    j["batch_size"] = o.batch_size;
    j["calib_size"] = o.calib_size;
    j["seed"] = o.seed;
    j["profile"] = o.profile;
    j["first_last_bits"] = o.first_last;
    j["per_channel"] = o.per_channel;
    j["fp_inputs"] = o.fp_inputs;
    j["lr_round"] = o.lr_round;
    j["lr_step"] = o.lr_step;
    j["lambda_reg"] = o.lambda_reg;
    j["sensitivity"] = o.sensitivity;
    j["hardware"] = o.hardware;
    j["bit_config"] = o.bit_config;
    j["delta"] = std::isfinite(o.delta) ? json(o.delta) : json("inf");
    j["population"] = o.population;
    j["generations"] = o.generations;
    j["mutation"] = o.mutation;
    j["topk"] = o.topk;
    j["eps"] = o.eps;
    j["samples"] = o.samples;
    j["test"] = o.test;
    return j;
}

void apply_config_file(Opts& o, const std::string& path) {
    std::ifstream is(path);
    if (!is) throw bq::load_error("cannot open config file " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw bq::load_error("malformed config file " + path + ": " + e.what());
    }
    auto get = [&](const char* key, auto& target) {
        if (j.contains(key)) target = j[key].get<std::decay_t<decltype(target)>>();
    };
    get("model", o.model);
    get("calib", o.calib);
    get("data", o.data);
    get("out", o.out);
    get("bits", o.bits);
    get("act_bits", o.act_bits);
    get("quant_acts", o.quant_acts);
    get("granularity", o.granularity);
    get("iters", o.iters);
    get("batch_size", o.batch_size);
    get("calib_size", o.calib_size);
    get("seed", o.seed);
    get("profile", o.profile);
    get("first_last_bits", o.first_last);
    get("per_channel", o.per_channel);
    get("fp_inputs", o.fp_inputs);
    get("lr_round", o.lr_round);
    get("lr_step", o.lr_step);
    get("lambda_reg", o.lambda_reg);
    get("sensitivity", o.sensitivity);
    get("hardware", o.hardware);
    get("bit_config", o.bit_config);
    get("population", o.population);
    get("generations", o.generations);
    get("mutation", o.mutation);
    get("topk", o.topk);
    get("eps", o.eps);
    get("samples", o.samples);
    get("test", o.test);
    if (j.contains("delta")) {
        if (j["delta"].is_string()) {
            o.delta = std::numeric_limits<double>::infinity();
        } else {
            o.delta = j["delta"].get<double>();
        }
    }
}

bq::ReconConfig recon_config(const Opts& o, const bq::NetworkModel& model, int bits) {
    bq::ReconConfig cfg = o.profile == "paper" ? bq::ReconConfig::paper_profile() : bq::ReconConfig{};
    if (o.profile == "desk" || o.profile.empty()) cfg.iterations = o.iters;
    cfg.batch_size = o.batch_size;
    cfg.lr_round = o.lr_round;
    cfg.lr_step = o.lr_step;
    cfg.lambda_reg = o.lambda_reg;
    cfg.granularity = bq::granularity_from_string(o.granularity);
    cfg.weight_bits = bits;
    cfg.quantize_activations = o.quant_acts;
    cfg.act_bits = o.act_bits;
    cfg.first_last_8bit = o.first_last == "8";
    cfg.per_channel = o.per_channel;
    cfg.propagate_quantized = !o.fp_inputs;
    cfg.seed = o.seed;
    return cfg;
}

void write_report(const fs::path& path, json body, const Opts& o, const std::string& command) {
    body["version"] = bq::kVersion;
    body["run_config"] = opts_json(o, command);
    std::ofstream os(path);
    if (!os) throw bq::load_error("cannot write " + path.string());
    os << body.dump(2) << "\n";
}

json units_json(const bq::CalibrationResult& result) {
    json arr = json::array();
    for (const auto& u : result.units) {
        arr.push_back({{"unit", u.unit},
                       {"init_loss", u.init_loss},
                       {"final_loss", u.final_loss},
                       {"binarized_fraction", u.binarized_fraction}});
    }
    return arr;
}

int cmd_calibrate(const Opts& o) {
    const bq::LoadedModel loaded = bq::load_model(o.model);
    const bq::NetworkModel folded = bq::fold_bn(loaded.model);
    const bq::CalibrationSet calib =
        bq::load_calibration(o.calib, o.calib_size, o.seed, o.batch_size);
    fs::create_directories(o.out);

    std::vector<int> run_bits = o.bits;
    bq::ReconConfig mixed_cfg = recon_config(o, folded, 8);
    if (!o.bit_config.empty()) {
        std::ifstream is(o.bit_config);
        if (!is) throw bq::load_error("cannot open bit config " + o.bit_config);
        json j;
        try {
            is >> j;
        } catch (const json::exception& e) {
            throw bq::load_error("malformed bit config: " + std::string(e.what()));
        }
        mixed_cfg.layer_bits.assign(static_cast<size_t>(folded.layer_count()), 8);
        for (auto it = j.at("config").begin(); it != j.at("config").end(); ++it) {
            mixed_cfg.layer_bits[static_cast<size_t>(folded.layer_index(it.key()))] =
                it.value().get<int>();
        }
        run_bits.clear();
    }

    json report;
    report["units"] = json::array();
    std::map<int, bq::CalibrationResult> by_bits;

    auto run_one = [&](const bq::ReconConfig& cfg, const fs::path& dir, const std::string& tag) {
        bq::CalibrationResult result = bq::calibrate_model(folded, calib, cfg);
        bq::save_model(dir, folded, &result.quant);
        bq::write_calibration_csv(dir / "calibration_log.csv", result.log);
        if (!result.sensitivity.layer_names.empty()) {
            bq::save_sensitivity(dir / "sensitivity.json", result.sensitivity);
        }
        json entry;
        entry["tag"] = tag;
        entry["units"] = units_json(result);
        if (!o.test.empty()) {
            const bq::Dataset test = bq::read_dataset(o.test);
            const bq::EvalReport quant_eval = bq::evaluate(folded, &result.quant, test);
            const bq::EvalReport fp_eval = bq::evaluate(loaded.model, nullptr, test);
            entry["accuracy"] = quant_eval.top1;
            entry["fp_accuracy"] = fp_eval.top1;
            entry["size_mb"] = quant_eval.size_mb;
        }
        report["units"].push_back(entry);
        return result;
    };

    if (!o.bit_config.empty()) {
        run_one(mixed_cfg, o.out, "mixed");
    } else if (run_bits.size() == 1) {
        run_one(recon_config(o, folded, run_bits[0]), o.out, std::to_string(run_bits[0]) + "bit");
    } else {
        for (int bits : run_bits) {
            by_bits.emplace(bits, run_one(recon_config(o, folded, bits),
                                          fs::path(o.out) / ("q" + std::to_string(bits)),
                                          std::to_string(bits) + "bit"));
        }
        if (by_bits.count(2) && by_bits.count(4) && by_bits.count(8)) {
            const bq::SensitivityTable table = bq::measure_sensitivities(
                folded, by_bits.at(2).quant, by_bits.at(4).quant, by_bits.at(8).quant, calib);
            bq::save_sensitivity(fs::path(o.out) / "sensitivity.json", table);
        }
    }
    write_report(fs::path(o.out) / "report.json", std::move(report), o, "calibrate");
    return 0;
}

int cmd_search(const Opts& o) {
    const bq::SensitivityTable table = bq::load_sensitivity(o.sensitivity);
    const bq::HardwareTable hw = bq::load_hardware(o.hardware);
    bq::GAConfig cfg;
    cfg.population = o.population;
    cfg.generations = o.generations;
    cfg.mutation_p = o.mutation;
    cfg.topk = o.topk;
    cfg.seed = o.seed;
    const bq::GAResult result = bq::ga_search(table, hw, o.delta, cfg);
    fs::create_directories(o.out);
    json j;
    json cfg_map = json::object();
    for (size_t i = 0; i < result.best.size(); ++i) {
        cfg_map[table.layer_names[i]] = result.best[i];
    }
    j["config"] = cfg_map;
    j["fitness"] = result.best_fitness;
    j["hardware"] = result.hardware;
    j["constraint"] = hw.constraint;
    json gens = json::array();
    for (const auto& g : result.log) {
        gens.push_back({{"generation", g.generation},
                        {"best_fitness", g.best_fitness},
                        {"best_hardware", g.best_hardware}});
    }
    j["generations"] = gens;
    std::ofstream os(fs::path(o.out) / "bitconfig.json");
    if (!os) throw bq::load_error("cannot write bitconfig.json");
    os << j.dump(2) << "\n";
    os.close();
    write_report(fs::path(o.out) / "report.json",
                 json{{"fitness", result.best_fitness}, {"hardware", result.hardware}}, o, "search");
    std::cout << "best fitness " << result.best_fitness << " at H = " << result.hardware << "\n";
    return 0;
}

int cmd_eval(const Opts& o) {
    const bq::LoadedModel loaded = bq::load_model(o.model);
    const bq::Dataset ds = bq::read_dataset(o.data);
    const bool quantized = loaded.quant.any();
    bq::NetworkModel model = quantized ? bq::fold_bn(loaded.model) : loaded.model;
    const bq::EvalReport report = bq::evaluate(model, quantized ? &loaded.quant : nullptr, ds);
    std::cout << "samples        " << report.samples << "\n";
    std::cout << "top-1 accuracy " << report.top1 << "\n";
    std::cout << "mean CE loss   " << report.mean_ce << "\n";
    std::cout << "weight size    " << report.size_mb << " MB\n";
    std::cout << "layer bits:\n";
    for (const auto& [name, bits] : report.layer_bits) {
        std::cout << "  " << name << "  " << bits << "\n";
    }
    if (!o.out.empty()) {
        fs::create_directories(o.out);
        json j;
        j["samples"] = report.samples;
        j["top1"] = report.top1;
        j["mean_ce"] = report.mean_ce;
        j["size_mb"] = report.size_mb;
        json bits = json::object();
        for (const auto& [name, b] : report.layer_bits) bits[name] = b;
        j["layer_bits"] = bits;
        write_report(fs::path(o.out) / "eval.json", std::move(j), o, "eval");
    }
    return 0;
}

int cmd_verify(const Opts& o) {
    const bq::LoadedModel loaded = bq::load_model(o.model);
    const bq::NetworkModel model = bq::fold_bn(loaded.model);
    const bq::CalibrationSet calib = bq::load_calibration(o.data, o.samples, o.seed, o.samples);
    const bq::QuadraticReport report = bq::verify_theorem1(
        model, calib.batch_inputs[0], calib.batch_labels[0], o.eps, o.seed);
    if (!o.out.empty()) {
        fs::create_directories(o.out);
        bq::save_quadratic_report(fs::path(o.out) / "quadratic_report.json", report);
        write_report(fs::path(o.out) / "report.json",
                     json{{"grad_inf_norm", report.grad_inf_norm},
                          {"monotone_decreasing", report.monotone_decreasing}},
                     o, "verify");
    }
    std::cout << "grad_inf_norm " << report.grad_inf_norm << "\n";
    for (const auto& r : report.rungs) {
        std::cout << "eps " << r.eps << "  gn-vs-H " << r.rel_gn_vs_hessian << "  linearization "
                  << r.rel_linearization << "\n";
    }
    std::cout << (report.monotone_decreasing ? "monotone decrease: yes" : "monotone decrease: NO")
              << "\n";
    return report.monotone_decreasing ? 0 : 1;
}

int cmd_make_fixtures(const Opts& o) {
    bq::make_fixtures(o.out, o.seed);
    std::cout << "fixtures written to " << o.out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    Opts opts;
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--config") {
            try {
                apply_config_file(opts, argv[i + 1]);
            } catch (const bq::load_error& e) {
                std::cerr << "error: " << e.what() << "\n";
                return 2;
            }
        }
    }

    CLI::App app{"post-training quantization toolkit"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file; flags override its values");

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--seed", opts.seed);
        cmd->add_option("--out", opts.out);
        cmd->add_option("--config", config_path);
    };

    CLI::App* cal = app.add_subcommand("calibrate", "block-wise reconstruction calibration");
    cal->add_option("--model", opts.model)->required();
    cal->add_option("--calib", opts.calib)->required();
    cal->add_option("--bits", opts.bits)->delimiter(',');
    cal->add_option("--act-bits", opts.act_bits);
    cal->add_flag("--quant-acts", opts.quant_acts);
    cal->add_option("--granularity", opts.granularity)
        ->check(CLI::IsMember({"layer", "block", "stage", "net"}));
    cal->add_option("--iters", opts.iters);
    cal->add_option("--batch-size", opts.batch_size);
    cal->add_option("--calib-size", opts.calib_size);
    cal->add_option("--profile", opts.profile)->check(CLI::IsMember({"desk", "paper"}));
    cal->add_option("--first-last-bits", opts.first_last)->check(CLI::IsMember({"8", "follow"}));
    cal->add_flag("--per-channel", opts.per_channel);
    cal->add_flag("--fp-inputs", opts.fp_inputs);
    cal->add_option("--lr-round", opts.lr_round);
    cal->add_option("--lr-step", opts.lr_step);
    cal->add_option("--lambda", opts.lambda_reg);
    cal->add_option("--bit-config", opts.bit_config);
    cal->add_option("--test", opts.test);
    add_common(cal);
    cal->callback([&] { opts.out = opts.out.empty() ? "out" : opts.out; });

    CLI::App* sea = app.add_subcommand("search", "constrained mixed-precision bit search");
    sea->add_option("--sensitivity", opts.sensitivity)->required();
    sea->add_option("--hardware", opts.hardware)->required();
    sea->add_option("--delta", opts.delta);
    sea->add_option("--population", opts.population);
    sea->add_option("--generations", opts.generations);
    sea->add_option("--mutation", opts.mutation);
    sea->add_option("--topk", opts.topk);
    sea->add_option("--act-bits", opts.act_bits);
    add_common(sea);

    CLI::App* ev = app.add_subcommand("eval", "accuracy/loss/size report");
    ev->add_option("--model", opts.model)->required();
    ev->add_option("--data", opts.data)->required();
    add_common(ev);

    CLI::App* ver = app.add_subcommand("verify", "second-order transform checks");
    ver->add_option("--model", opts.model)->required();
    ver->add_option("--data", opts.data)->required();
    ver->add_option("--eps", opts.eps)->delimiter(',');
    ver->add_option("--samples", opts.samples);
    add_common(ver);

    CLI::App* mk = app.add_subcommand("make-fixtures", "generate toy models and datasets");
    mk->add_option("--out", opts.out)->required();
    mk->add_option("--seed", opts.seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (cal->parsed()) return cmd_calibrate(opts);
        if (sea->parsed()) return cmd_search(opts);
        if (ev->parsed()) return cmd_eval(opts);
        if (ver->parsed()) return cmd_verify(opts);
        if (mk->parsed()) return cmd_make_fixtures(opts);
    } catch (const bq::load_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const bq::constraint_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const bq::numeric_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const bq::precondition_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const bq::usage_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
