#include "a2q/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace a2q {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v, i32 line) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw error("config: expected true/false at line " + std::to_string(line) +
                ", got '" + v + "'");
}

double parse_num(const std::string& v, i32 line) {
    std::size_t used = 0;
    double x = 0;
    try {
        x = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size())
        throw error("config: expected a number at line " +
                    std::to_string(line) + ", got '" + v + "'");
    return x;
}

i64 parse_int(const std::string& v, i32 line) {
    const double x = parse_num(v, line);
    if (x != std::floor(x) || std::abs(x) > 9.0e18)
        throw error("config: expected an integer at line " +
                    std::to_string(line) + ", got '" + v + "'");
    return static_cast<i64>(x);
}

void validate(const ExperimentConfig& c) {
    require(c.dataset == "synth" || c.dataset == "files",
            "config: dataset must be synth or files");
    require(c.synth_kind == "cora_scale" || c.synth_kind == "powerlaw",
            "config: synth.kind must be cora_scale or powerlaw");
    if (c.dataset == "files")
        require(!c.data_edges.empty() && !c.data_features.empty() &&
                    !c.data_split.empty() && !c.data_labels.empty(),
                "config: dataset files needs data.edges, data.features, "
                "data.split and data.labels");
    require(c.model == "gcn" || c.model == "gin",
            "config: model must be gcn or gin");
    require(c.quant_mode == "fp32" || c.quant_mode == "uniform_fixed" ||
                c.quant_mode == "per_node_learned" ||
                c.quant_mode == "nns_bank",
            "config: unknown quant.mode '" + c.quant_mode + "'");
    require(c.grad_mode == "global" || c.grad_mode == "local",
            "config: train.grad_mode must be global or local");
    require(c.count_first_input == "auto" || c.count_first_input == "true" ||
                c.count_first_input == "false",
            "config: report.count_first_input must be auto, true or false");
    require(c.hidden_dim > 0, "config: hidden_dim must be positive");
    require(c.epochs >= 1, "config: train.epochs must be at least 1");
    require(c.lr_weights > 0 && c.lr_step > 0 && c.lr_bit > 0,
            "config: learning rates must be positive");
    require(c.lambda >= 0, "config: train.lambda must be non-negative");
    require(c.uniform_bits >= 1 && c.uniform_bits <= 8,
            "config: quant.uniform_bits must lie in [1, 8]");
    require(c.nns_groups >= 1, "config: quant.nns_groups must be positive");
    // A per-node table is bound to one node set; a bank generalizes.
    if (c.quant_mode == "nns_bank")
        require(c.inductive,
                "config: quant.mode nns_bank is for inductive use; set "
                "quant.inductive = true");
    if (c.quant_mode == "per_node_learned")
        require(!c.inductive,
                "config: quant.mode per_node_learned is transductive; it "
                "cannot be marked inductive");
}

} // namespace

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig c;
    std::istringstream in(text);
    std::string raw;
    i32 line = 0;
    while (std::getline(in, raw)) {
        ++line;
        const auto hash = raw.find('#');
        if (hash != std::string::npos) raw.erase(hash);
        const std::string s = trim(raw);
        if (s.empty()) continue;
        const auto eq = s.find('=');
        require(eq != std::string::npos,
                "config: missing '=' at line " + std::to_string(line));
        const std::string key = trim(s.substr(0, eq));
        const std::string val = trim(s.substr(eq + 1));
        require(!key.empty(),
                "config: empty key at line " + std::to_string(line));

        if (key == "dataset") c.dataset = val;
        else if (key == "synth.kind") c.synth_kind = val;
        else if (key == "synth.nodes")
            c.synth_nodes = static_cast<i32>(parse_int(val, line));
        else if (key == "synth.exponent") c.synth_exponent = parse_num(val, line);
        else if (key == "synth.classes")
            c.synth_classes = static_cast<i32>(parse_int(val, line));
        else if (key == "synth.feat_dim")
            c.synth_feat_dim = static_cast<i32>(parse_int(val, line));
        else if (key == "synth.edges_per_node")
            c.synth_edges_per_node = static_cast<i32>(parse_int(val, line));
        else if (key == "synth.homophily") c.synth_homophily = parse_num(val, line);
        else if (key == "synth.train_per_class")
            c.synth_train_per_class = static_cast<i32>(parse_int(val, line));
        else if (key == "synth.val")
            c.synth_val = static_cast<i32>(parse_int(val, line));
        else if (key == "synth.test")
            c.synth_test = static_cast<i32>(parse_int(val, line));
        else if (key == "synth.seed")
            c.synth_seed = static_cast<u64>(parse_int(val, line));
        else if (key == "data.edges") c.data_edges = val;
        else if (key == "data.features") c.data_features = val;
        else if (key == "data.split") c.data_split = val;
        else if (key == "data.labels") c.data_labels = val;
        else if (key == "model") c.model = val;
        else if (key == "hidden_dim")
            c.hidden_dim = static_cast<i32>(parse_int(val, line));
        else if (key == "use_bn") c.use_bn = parse_bool(val, line);
        else if (key == "quant.mode") c.quant_mode = val;
        else if (key == "quant.uniform_bits") c.uniform_bits = parse_num(val, line);
        else if (key == "quant.nns_groups")
            c.nns_groups = static_cast<i32>(parse_int(val, line));
        else if (key == "quant.first_input")
            c.quantize_first_input = parse_bool(val, line);
        else if (key == "quant.inductive") c.inductive = parse_bool(val, line);
        else if (key == "train.epochs")
            c.epochs = static_cast<i32>(parse_int(val, line));
        else if (key == "train.lr_weights") c.lr_weights = parse_num(val, line);
        else if (key == "train.lr_step") c.lr_step = parse_num(val, line);
        else if (key == "train.lr_bit") c.lr_bit = parse_num(val, line);
        else if (key == "train.weight_decay")
            c.weight_decay = parse_num(val, line);
        else if (key == "train.lambda") c.lambda = parse_num(val, line);
        else if (key == "train.m_target_kb") c.m_target_kb = parse_num(val, line);
        else if (key == "train.grad_mode") c.grad_mode = val;
        else if (key == "train.seed")
            c.seed = static_cast<u64>(parse_int(val, line));
        else if (key == "accel.num_pes")
            c.accel.num_pes = static_cast<i32>(parse_int(val, line));
        else if (key == "accel.macs_per_pe")
            c.accel.macs_per_pe = static_cast<i32>(parse_int(val, line));
        else if (key == "accel.weight_bits")
            c.accel.weight_bits = static_cast<i32>(parse_int(val, line));
        else if (key == "accel.input_buffer_bytes")
            c.accel.input_buffer_bytes = parse_int(val, line);
        else if (key == "accel.output_buffer_bytes")
            c.accel.output_buffer_bytes = parse_int(val, line);
        else if (key == "accel.edge_buffer_bytes")
            c.accel.edge_buffer_bytes = parse_int(val, line);
        else if (key == "accel.weight_buffer_bytes")
            c.accel.weight_buffer_bytes = parse_int(val, line);
        else if (key == "accel.int_mac_pj")
            c.accel.energy.int_mac_pj = parse_num(val, line);
        else if (key == "accel.float_mul_pj")
            c.accel.energy.float_mul_pj = parse_num(val, line);
        else if (key == "accel.sram_access_pj_per_bit")
            c.accel.energy.sram_access_pj_per_bit = parse_num(val, line);
        else if (key == "accel.dram_access_pj_per_bit")
            c.accel.energy.dram_access_pj_per_bit = parse_num(val, line);
        else if (key == "accel.sort_nodes")
            c.accel.sort_nodes = parse_bool(val, line);
        else if (key == "out") c.out_dir = val;
        else if (key == "checkpoint") c.checkpoint_path = val;
        else if (key == "report.inputs") c.report_inputs = val;
        else if (key == "report.count_first_input") c.count_first_input = val;
        else
            throw error("config: unknown key '" + key + "' at line " +
                        std::to_string(line));
    }
    validate(c);
    return c;
}

ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

std::string canonical_config(const ExperimentConfig& c, bool include_seed) {
    std::ostringstream o;
    o.precision(17);
    o << "dataset=" << c.dataset << "\n";
    if (c.dataset == "synth") {
        o << "synth.kind=" << c.synth_kind << "\n";
        if (c.synth_kind == "powerlaw") {
            o << "synth.nodes=" << c.synth_nodes << "\n"
              << "synth.exponent=" << c.synth_exponent << "\n"
              << "synth.classes=" << c.synth_classes << "\n"
              << "synth.feat_dim=" << c.synth_feat_dim << "\n"
              << "synth.edges_per_node=" << c.synth_edges_per_node << "\n"
              << "synth.homophily=" << c.synth_homophily << "\n"
              << "synth.train_per_class=" << c.synth_train_per_class << "\n"
              << "synth.val=" << c.synth_val << "\n"
              << "synth.test=" << c.synth_test << "\n";
        }
        o << "synth.seed=" << c.synth_seed << "\n";
    } else {
        o << "data.edges=" << c.data_edges << "\n"
          << "data.features=" << c.data_features << "\n"
          << "data.split=" << c.data_split << "\n"
          << "data.labels=" << c.data_labels << "\n";
    }
    o << "model=" << c.model << "\n"
      << "hidden_dim=" << c.hidden_dim << "\n"
      << "use_bn=" << (c.use_bn ? "true" : "false") << "\n"
      << "quant.mode=" << c.quant_mode << "\n"
      << "quant.uniform_bits=" << c.uniform_bits << "\n"
      << "quant.nns_groups=" << c.nns_groups << "\n"
      << "quant.first_input=" << (c.quantize_first_input ? "true" : "false")
      << "\n"
      << "quant.inductive=" << (c.inductive ? "true" : "false") << "\n"
      << "train.epochs=" << c.epochs << "\n"
      << "train.lr_weights=" << c.lr_weights << "\n"
      << "train.lr_step=" << c.lr_step << "\n"
      << "train.lr_bit=" << c.lr_bit << "\n"
      << "train.weight_decay=" << c.weight_decay << "\n"
      << "train.lambda=" << c.lambda << "\n"
      << "train.m_target_kb=" << c.m_target_kb << "\n"
      << "train.grad_mode=" << c.grad_mode << "\n";
    if (include_seed) o << "train.seed=" << c.seed << "\n";
    return o.str();
}

} // namespace a2q
