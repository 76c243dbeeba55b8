#pragma once

#include <string>

#include "a2q/accel.hpp"
#include "a2q/common.hpp"

namespace a2q {

// Everything a run needs, parsed from key = value text. Unknown keys
// are errors so typos cannot silently fall back to defaults.
struct ExperimentConfig {
    // dataset
    std::string dataset = "synth"; // synth | files
    std::string synth_kind = "cora_scale"; // cora_scale | powerlaw
    i32 synth_nodes = 1000;
    double synth_exponent = 2.5;
    i32 synth_classes = 7;
    i32 synth_feat_dim = 64;
    i32 synth_edges_per_node = 2;
    double synth_homophily = 8.0;
    i32 synth_train_per_class = 20;
    i32 synth_val = 0;  // 0: half of the remainder
    i32 synth_test = 0; // 0: the rest
    u64 synth_seed = 1;
    std::string data_edges;
    std::string data_features;
    std::string data_split;
    std::string data_labels;

    // model
    std::string model = "gcn"; // gcn | gin
    i32 hidden_dim = 16;
    bool use_bn = false;

    // quantization
    std::string quant_mode = "per_node_learned";
    double uniform_bits = 4.0;
    i32 nns_groups = 1000;
    bool quantize_first_input = false;
    bool inductive = false;

    // training
    i32 epochs = 200;
    double lr_weights = 1e-2;
    double lr_step = 1e-4;
    double lr_bit = 1e-3;
    double weight_decay = 5e-4;
    double lambda = 1e-4;
    double m_target_kb = 0.0; // 0: memory penalty off
    std::string grad_mode = "local";
    u64 seed = 1;

    // accelerator
    AccelConfig accel;

    // reporting
    std::string out_dir = "out";
    std::string checkpoint_path;             // default: <out>/checkpoint.a2qc
    std::string report_inputs;               // directory for `report`
    std::string count_first_input = "auto"; // auto | true | false
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);

// Fixed-order key = value rendering of every semantic field; the
// config hash is FNV-1a over this with the seed excluded, so seed
// sweeps of one experiment share a hash.
std::string canonical_config(const ExperimentConfig& cfg, bool include_seed);

} // namespace a2q
