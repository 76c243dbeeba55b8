#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "a2q/accel.hpp"
#include "a2q/checkpoint.hpp"
#include "a2q/config.hpp"
#include "a2q/model.hpp"
#include "a2q/report.hpp"
#include "a2q/rng.hpp"
#include "a2q/runtime.hpp"

namespace fs = std::filesystem;
using namespace a2q;

namespace {

// ============================================================================
// Shared plumbing
// ============================================================================

struct Timer {
    std::chrono::steady_clock::time_point t0 =
        std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(
                   std::chrono::steady_clock::now() - t0)
            .count();
    }
};

QuantMode mode_from(const std::string& s) {
    if (s == "fp32") return QuantMode::fp32;
    if (s == "uniform_fixed") return QuantMode::uniform_fixed;
    if (s == "per_node_learned") return QuantMode::per_node_learned;
    return QuantMode::nns_bank;
}

std::string mode_name(QuantMode m) {
    switch (m) {
        case QuantMode::fp32: return "fp32";
        case QuantMode::uniform_fixed: return "uniform_fixed";
        case QuantMode::per_node_learned: return "per_node_learned";
        default: return "nns_bank";
    }
}

Dataset build_dataset(const ExperimentConfig& cfg) {
    if (cfg.dataset == "files")
        return load_graph(cfg.data_edges, cfg.data_features, cfg.data_split,
                          cfg.data_labels);
    if (cfg.synth_kind == "cora_scale")
        return synth_dataset(cora_scale_spec(cfg.synth_seed));
    SynthSpec spec;
    spec.n = cfg.synth_nodes;
    spec.exponent = cfg.synth_exponent;
    spec.classes = cfg.synth_classes;
    spec.feat_dim = cfg.synth_feat_dim;
    spec.edges_per_node = cfg.synth_edges_per_node;
    spec.homophily = cfg.synth_homophily;
    spec.train_per_class = cfg.synth_train_per_class;
    spec.val_count = cfg.synth_val;
    spec.test_count = cfg.synth_test;
    spec.seed = cfg.synth_seed;
    return synth_dataset(spec);
}

bool count_first_flag(const ExperimentConfig& cfg) {
    if (cfg.count_first_input == "true") return true;
    if (cfg.count_first_input == "false") return false;
    return cfg.quantize_first_input;
}

std::string checkpoint_path(const ExperimentConfig& cfg) {
    if (!cfg.checkpoint_path.empty()) return cfg.checkpoint_path;
    return (fs::path(cfg.out_dir) / "checkpoint.a2qc").string();
}

// Per-node tables are bound to the graph they were trained on.
void check_graph_compat(const Checkpoint& ckpt, const CsrGraph& g) {
    if (ckpt.qt.mode != QuantMode::per_node_learned) return;
    require(fingerprint(g) == ckpt.graph,
            "checkpoint: per-node quantizers are transductive and this "
            "graph differs from the training graph; train with quant.mode "
            "nns_bank or uniform_fixed for inductive use");
}

// Test accuracy through the path infer would use.
double deploy_test_acc(Checkpoint& ckpt, const Dataset& data,
                       std::vector<Assignment>* assigns_out) {
    const NormCoeffs nc = norm_coeffs(data.graph);
    if (ckpt.qt.mode == QuantMode::fp32) {
        Tape tape;
        forward(ckpt.model, ckpt.qt, data.graph, nc, data.features, {},
                &tape);
        return accuracy(tape.logits, data.split.test, data.split.labels);
    }
    const IntForwardResult res = int_forward(ckpt.model, ckpt.qt, data.graph,
                                             nc, data.features);
    if (assigns_out) *assigns_out = res.assigns;
    return accuracy(res.logits, data.split.test, data.split.labels);
}

// ============================================================================
// Commands
// ============================================================================

int cmd_train(const ExperimentConfig& cfg) {
    Timer timer;
    const Dataset data = build_dataset(cfg);
    const i32 classes = data.split.num_classes;
    const i32 feat = static_cast<i32>(data.features.cols);

    Rng seeds(cfg.seed);
    const u64 model_seed = seeds.next_u64();
    const u64 table_seed = seeds.next_u64();
    ModelParams model = init_model(
        cfg.model == "gcn" ? ModelKind::gcn : ModelKind::gin, feat,
        cfg.hidden_dim, classes, cfg.use_bn, cfg.quantize_first_input,
        model_seed);
    QuantTableOpts qopts;
    qopts.mode = mode_from(cfg.quant_mode);
    qopts.uniform_bits = cfg.uniform_bits;
    qopts.nns_groups = cfg.nns_groups;
    qopts.quantize_first_input = cfg.quantize_first_input;
    qopts.seed = table_seed;
    QuantTable qt = init_quant_table(model, data.graph.num_nodes, qopts,
                                     &data.features);

    TrainConfig tc;
    tc.epochs = cfg.epochs;
    tc.lr_weights = cfg.lr_weights;
    tc.lr_step = cfg.lr_step;
    tc.lr_bit = cfg.lr_bit;
    tc.weight_decay = cfg.weight_decay;
    tc.lambda = cfg.lambda;
    tc.m_target_kb = cfg.m_target_kb;
    tc.grad_mode =
        cfg.grad_mode == "global" ? GradMode::global : GradMode::local;
    tc.seed = cfg.seed;
    const TrainResult tr = train(model, qt, data, tc);

    Checkpoint ckpt;
    ckpt.model = std::move(model);
    ckpt.qt = std::move(qt);
    ckpt.graph = fingerprint(data.graph);
    ckpt.quantize_first_input = cfg.quantize_first_input;
    ckpt.config_hash = fnv1a_hex(canonical_config(cfg, false));
    fs::create_directories(cfg.out_dir);
    save_checkpoint(checkpoint_path(cfg), ckpt);

    RunRecord rec;
    rec.command = "train";
    rec.config_hash = ckpt.config_hash;
    rec.model = cfg.model;
    rec.mode = cfg.quant_mode;
    rec.grad_mode = cfg.grad_mode;
    rec.seed = cfg.seed;
    rec.history = tr.history;
    rec.final_train_acc = tr.final_train_acc;
    rec.final_val_acc = tr.final_val_acc;
    // Deployment accuracy: the integer path infer will use.
    std::vector<Assignment> assigns = tr.final_assign;
    rec.final_test_acc = deploy_test_acc(ckpt, data, &assigns);
    rec.avg_bits = ckpt.qt.mode == QuantMode::fp32
                       ? 32.0
                       : avg_bits(ckpt.qt, count_first_flag(cfg), &assigns);
    rec.compression =
        ckpt.qt.mode == QuantMode::fp32
            ? compression_ratio(32.0, data.graph.num_nodes, feat,
                                cfg.hidden_dim, 2.0, true, false)
            : compression_ratio(rec.avg_bits, data.graph.num_nodes, feat,
                                cfg.hidden_dim, 2.0, count_first_flag(cfg));
    if (ckpt.qt.mode != QuantMode::fp32) {
        const Workload w = build_workload(ckpt.model, ckpt.qt, data.graph,
                                          data.features, &assigns);
        rec.cycles = simulate(w, cfg.accel);
        rec.has_cycles = true;
    }
    rec.wall_clock_sec = timer.seconds();
    const std::string rec_path =
        (fs::path(cfg.out_dir) /
         ("run_train_s" + std::to_string(cfg.seed) + ".json"))
            .string();
    write_run_record(rec_path, rec);

    std::printf("trained %s/%s for %d epochs\n", cfg.model.c_str(),
                cfg.quant_mode.c_str(), cfg.epochs);
    std::printf("  train acc %.4f  val acc %.4f  test acc %.4f\n",
                rec.final_train_acc, rec.final_val_acc, rec.final_test_acc);
    std::printf("  avg bits %.3f  compression %.2fx\n", rec.avg_bits,
                rec.compression);
    if (rec.has_cycles)
        std::printf("  speedup vs int4 %.2fx\n",
                    rec.cycles.speedup_vs_int4);
    std::printf("  checkpoint %s\n  record %s\n",
                checkpoint_path(cfg).c_str(), rec_path.c_str());
    return 0;
}

int cmd_infer(const ExperimentConfig& cfg) {
    Timer timer;
    Checkpoint ckpt = load_checkpoint(checkpoint_path(cfg));
    const Dataset data = build_dataset(cfg);
    check_graph_compat(ckpt, data.graph);
    require(static_cast<i32>(data.features.cols) == ckpt.model.in_dim,
            "infer: dataset feature width does not match the checkpoint");

    const NormCoeffs nc = norm_coeffs(data.graph);
    RunRecord rec;
    rec.command = "infer";
    rec.config_hash = ckpt.config_hash;
    rec.model = cfg.model;
    rec.mode = mode_name(ckpt.qt.mode);
    rec.grad_mode = cfg.grad_mode;
    rec.seed = cfg.seed;
    std::vector<Assignment> assigns;
    if (ckpt.qt.mode == QuantMode::fp32) {
        Tape tape;
        forward(ckpt.model, ckpt.qt, data.graph, nc, data.features, {},
                &tape);
        rec.final_train_acc =
            accuracy(tape.logits, data.split.train, data.split.labels);
        if (!data.split.val.empty())
            rec.final_val_acc =
                accuracy(tape.logits, data.split.val, data.split.labels);
        rec.final_test_acc =
            accuracy(tape.logits, data.split.test, data.split.labels);
        rec.avg_bits = 32.0;
        rec.compression = compression_ratio(32.0, data.graph.num_nodes,
                                            ckpt.model.in_dim,
                                            ckpt.model.hidden_dim, 2.0, true,
                                            false);
    } else {
        const IntForwardResult res = int_forward(ckpt.model, ckpt.qt,
                                                 data.graph, nc,
                                                 data.features);
        assigns = res.assigns;
        rec.final_train_acc =
            accuracy(res.logits, data.split.train, data.split.labels);
        if (!data.split.val.empty())
            rec.final_val_acc =
                accuracy(res.logits, data.split.val, data.split.labels);
        rec.final_test_acc =
            accuracy(res.logits, data.split.test, data.split.labels);
        rec.avg_bits =
            avg_bits(ckpt.qt, count_first_flag(cfg), &assigns);
        rec.compression = compression_ratio(
            rec.avg_bits, data.graph.num_nodes, ckpt.model.in_dim,
            ckpt.model.hidden_dim, 2.0, count_first_flag(cfg));
    }
    rec.wall_clock_sec = timer.seconds();
    fs::create_directories(cfg.out_dir);
    const std::string rec_path =
        (fs::path(cfg.out_dir) /
         ("run_infer_s" + std::to_string(cfg.seed) + ".json"))
            .string();
    write_run_record(rec_path, rec);
    std::printf("inference (%s path)\n",
                ckpt.qt.mode == QuantMode::fp32 ? "float" : "fixed-point");
    std::printf("  train acc %.4f  val acc %.4f  test acc %.4f\n",
                rec.final_train_acc, rec.final_val_acc, rec.final_test_acc);
    std::printf("  record %s\n", rec_path.c_str());
    return 0;
}

int cmd_quantize(const ExperimentConfig& cfg) {
    Checkpoint ckpt = load_checkpoint(checkpoint_path(cfg));
    require(ckpt.qt.mode != QuantMode::fp32,
            "quantize: the checkpoint is fp32; train with a quantized "
            "quant.mode first");
    const Dataset data = build_dataset(cfg);
    check_graph_compat(ckpt, data.graph);
    const NormCoeffs nc = norm_coeffs(data.graph);
    const IntForwardResult res =
        int_forward(ckpt.model, ckpt.qt, data.graph, nc, data.features);

    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["config_hash"] = ckpt.config_hash;
    j["mode"] = mode_name(ckpt.qt.mode);
    const double bits =
        avg_bits(ckpt.qt, count_first_flag(cfg), &res.assigns);
    j["avg_bits"] = bits;
    j["compression_ratio"] = compression_ratio(
        bits, data.graph.num_nodes, ckpt.model.in_dim, ckpt.model.hidden_dim,
        2.0, count_first_flag(cfg));
    double storage_bits = 0.0;
    nlohmann::ordered_json sites = nlohmann::ordered_json::array();
    for (i32 s = 0; s < ckpt.qt.num_sites(); ++s) {
        std::vector<i64> histo(9, 0);
        const i64 n = data.graph.num_nodes;
        for (i64 i = 0; i < n; ++i) {
            const QuantParam p = ckpt.qt.node_param(
                s, static_cast<i32>(i), &res.assigns[s]);
            const i32 b = static_cast<i32>(round_half_away(p.bitwidth));
            ++histo[b];
            storage_bits +=
                static_cast<double>(b) * ckpt.qt.sites[s].dim;
        }
        nlohmann::ordered_json sj;
        sj["site"] = s;
        sj["dim"] = ckpt.qt.sites[s].dim;
        sj["unsigned"] = ckpt.qt.sites[s].unsigned_range;
        nlohmann::ordered_json hj;
        for (i32 b = 1; b <= 8; ++b)
            if (histo[b] > 0) hj[std::to_string(b)] = histo[b];
        sj["bit_histogram"] = std::move(hj);
        sites.push_back(std::move(sj));
    }
    j["sites"] = std::move(sites);
    j["feature_storage_kb"] = storage_bits / kBitsPerKb;
    fs::create_directories(cfg.out_dir);
    const std::string path =
        (fs::path(cfg.out_dir) / "quantized.json").string();
    std::ofstream out(path);
    require(out.good(), "quantize: cannot write " + path);
    out << j.dump(2) << "\n";
    std::printf("quantized package summary\n  avg bits %.3f  storage %.1f KB"
                "\n  %s\n",
                bits, storage_bits / kBitsPerKb, path.c_str());
    return 0;
}

int cmd_simulate(const ExperimentConfig& cfg) {
    Checkpoint ckpt = load_checkpoint(checkpoint_path(cfg));
    require(ckpt.qt.mode != QuantMode::fp32,
            "simulate: fp32 checkpoints have no bitwidths to simulate; "
            "train with a quantized quant.mode first");
    const Dataset data = build_dataset(cfg);
    check_graph_compat(ckpt, data.graph);
    const NormCoeffs nc = norm_coeffs(data.graph);
    const IntForwardResult res =
        int_forward(ckpt.model, ckpt.qt, data.graph, nc, data.features);
    const Workload w = build_workload(ckpt.model, ckpt.qt, data.graph,
                                      data.features, &res.assigns);
    const CycleReport rep = simulate(w, cfg.accel);
    fs::create_directories(cfg.out_dir);
    const std::string path =
        (fs::path(cfg.out_dir) / "cycle_report.json").string();
    std::ofstream out(path);
    require(out.good(), "simulate: cannot write " + path);
    out << cycle_report_json(rep, ckpt.config_hash);
    std::printf("simulated %lld cycles (update %lld, aggregate %lld)\n",
                static_cast<long long>(rep.total_cycles),
                static_cast<long long>(rep.cycles_update),
                static_cast<long long>(rep.cycles_aggregate));
    std::printf("  avg bits %.3f  speedup vs int4 %.2fx  energy %.3g pJ\n",
                rep.avg_bits, rep.speedup_vs_int4, rep.energy_pj);
    std::printf("  report %s\n", path.c_str());
    return 0;
}

int cmd_report(const ExperimentConfig& cfg) {
    const std::string dir =
        cfg.report_inputs.empty() ? cfg.out_dir : cfg.report_inputs;
    require(fs::is_directory(dir), "report: not a directory: " + dir);
    std::vector<std::string> paths;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (entry.is_regular_file() && name.rfind("run_", 0) == 0 &&
            entry.path().extension() == ".json")
            paths.push_back(entry.path().string());
    }
    std::sort(paths.begin(), paths.end());
    require(!paths.empty(), "report: no run_*.json records in " + dir);
    std::vector<RunRecord> records;
    for (const std::string& p : paths) {
        std::ifstream in(p);
        std::ostringstream buf;
        buf << in.rdbuf();
        records.push_back(parse_run_record(buf.str()));
    }
    fs::create_directories(cfg.out_dir);
    const std::string csv_path =
        (fs::path(cfg.out_dir) / "summary.csv").string();
    const std::string json_path =
        (fs::path(cfg.out_dir) / "summary.json").string();
    {
        std::ofstream out(csv_path);
        require(out.good(), "report: cannot write " + csv_path);
        out << sweep_csv(records);
    }
    {
        std::ofstream out(json_path);
        require(out.good(), "report: cannot write " + json_path);
        out << sweep_json(records);
    }
    std::printf("aggregated %zu records from %s\n", records.size(),
                dir.c_str());
    std::printf("%s", sweep_csv(records).c_str());
    std::printf("  %s\n  %s\n", csv_path.c_str(), json_path.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"aggregation-aware mixed-precision quantization for GNNs"};
    app.require_subcommand(1);
    std::string config_path;
    long long seed_override = -1;
    std::string out_override;

    const auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "experiment config file")
            ->required();
        sub->add_option("--seed", seed_override, "override train.seed");
        sub->add_option("--out", out_override, "override output directory");
    };
    CLI::App* train_cmd =
        app.add_subcommand("train", "train a model and save a checkpoint");
    CLI::App* quant_cmd = app.add_subcommand(
        "quantize", "summarize the quantized package of a checkpoint");
    CLI::App* infer_cmd = app.add_subcommand(
        "infer", "run fixed-point inference from a checkpoint");
    CLI::App* sim_cmd = app.add_subcommand(
        "simulate", "run the accelerator cycle/energy model");
    CLI::App* report_cmd = app.add_subcommand(
        "report", "aggregate run records into CSV + JSON");
    for (CLI::App* sub :
         {train_cmd, quant_cmd, infer_cmd, sim_cmd, report_cmd})
        add_common(sub);

    CLI11_PARSE(app, argc, argv);

    try {
        ExperimentConfig cfg = parse_config_file(config_path);
        if (seed_override >= 0) cfg.seed = static_cast<u64>(seed_override);
        if (!out_override.empty()) cfg.out_dir = out_override;
        if (*train_cmd) return cmd_train(cfg);
        if (*quant_cmd) return cmd_quantize(cfg);
        if (*infer_cmd) return cmd_infer(cfg);
        if (*sim_cmd) return cmd_simulate(cfg);
        return cmd_report(cfg);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
