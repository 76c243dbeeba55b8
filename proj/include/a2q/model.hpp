#pragma once

#include <optional>
#include <vector>

#include "a2q/common.hpp"
#include "a2q/graph.hpp"
#include "a2q/matrix.hpp"
#include "a2q/nns.hpp"
#include "a2q/quant.hpp"

namespace a2q {

// ============================================================================
// Model parameters
// ============================================================================

enum class ModelKind { gcn, gin };
enum class QuantMode { fp32, uniform_fixed, per_node_learned, nns_bank };
enum class GradMode { global, local };

// One linear transform. Weights are quantized per column with a
// learnable step and a fixed 4-bit signed code range.
struct LinearLayer {
    Matrix w; // fan_in x fan_out
    std::vector<double> bias;
    std::vector<double> w_step;
};

struct BatchNorm {
    std::vector<double> gamma;
    std::vector<double> beta;
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
    double eps = 1e-5;
};

// Two-layer GNN. GCN: layer l is relu(rescale(adj_sum(rescale(X W))) +
// bias), no activation on the output layer. GIN: layer l aggregates
// (1+eps) x_i + sum_{j in N(i)} x_j and updates with a two-linear MLP
// (internal relu, optional BN after it).
struct ModelParams {
    ModelKind kind = ModelKind::gcn;
    i32 in_dim = 0;
    i32 hidden_dim = 16;
    i32 out_dim = 0;
    bool use_bn = false; // GIN MLPs only
    std::vector<LinearLayer> linears; // GCN: 2, GIN: 4
    std::vector<double> gin_eps;      // per layer (GIN)
    std::vector<BatchNorm> bns;       // per layer (GIN with use_bn)
    // Aggregation-input quantizer steps, per layer, per column: the
    // update output (GCN) or layer input (GIN) is re-quantized with
    // these shared 4-bit quantizers before any neighbor sum, so the
    // aggregation itself stays in integers. The layer-0 entry is empty
    // when the raw input feeds the aggregation unquantized.
    std::vector<std::vector<double>> agg_steps;

    i32 num_layers() const { return 2; }
};

inline constexpr double kWeightBits = 4.0;

// quantize_first_input controls whether the raw input features pass
// through a quantizer before their first use (a per-node site for GCN,
// the layer-0 aggregation quantizer for GIN). Binary bag-of-words
// inputs are typically left unquantized.
ModelParams init_model(ModelKind kind, i32 in_dim, i32 hidden_dim, i32 out_dim,
                       bool use_bn, bool quantize_first_input, u64 seed);

// ============================================================================
// Quantization table
// ============================================================================

// One quantization site = the input feature map of one linear layer.
struct SiteSpec {
    i32 dim = 0;
    bool unsigned_range = false;
    bool first_input = false; // quantizes the raw input features directly
};

// Per-node quantizers for every site, in one of three modes:
//   uniform_fixed:    one shared (step, fixed bitwidth) per site
//   per_node_learned: per-node (step, bitwidth) per site
//   nns_bank:         m candidate quantizers per site, nodes select by
//                     nearest q_max at every forward pass
// fp32 disables quantization everywhere (sites stay empty).
struct QuantTable {
    QuantMode mode = QuantMode::fp32;
    std::vector<SiteSpec> sites;
    std::vector<std::vector<double>> steps; // [site][node], or [site][0] uniform
    std::vector<std::vector<double>> bits;
    double uniform_bits = 4.0;
    std::vector<ParamBank> banks; // nns_bank only

    i32 num_sites() const { return static_cast<i32>(sites.size()); }
    QuantParam node_param(i32 site, i32 node,
                          const Assignment* assign = nullptr) const;
};

struct QuantTableOpts {
    QuantMode mode = QuantMode::per_node_learned;
    double uniform_bits = 4.0;
    i32 nns_groups = 1000;
    bool quantize_first_input = false;
    u64 seed = 1;
};

// The raw features, when given, decide the signedness of a first-input
// site: non-negative data gets the one-sided code range.
QuantTable init_quant_table(const ModelParams& model, i32 num_nodes,
                            const QuantTableOpts& opts,
                            const NodeFeatures* x0 = nullptr);

// ============================================================================
// Forward / backward
// ============================================================================

struct ForwardOpts {
    bool training = false;    // batch BN stats + running-stat update
    bool record_codes = false;
};

// Everything backward needs, plus the per-site integer codes when
// requested (used by the runtime equivalence checks).
struct SiteTape {
    bool active = false;
    Matrix pre;
    Matrix post;
    std::vector<std::uint8_t> sat;
    std::vector<double> eff_step; // per node
    std::vector<double> eff_bit;
    Assignment assign;            // nns mode
    std::vector<i32> codes;       // record_codes
};

struct ColQuantTape {
    bool active = false;
    Matrix pre;
    Matrix post;
    std::vector<std::uint8_t> sat;
    std::vector<i32> codes;
};

struct WeightQuant {
    Matrix wq;
    std::vector<std::uint8_t> sat;
};

struct BnTape {
    Matrix xhat;
    std::vector<double> inv_std;
    std::vector<double> mean;
};

struct Tape {
    std::vector<SiteTape> sites;      // one per per-node site
    std::vector<ColQuantTape> aggq;   // one per layer
    std::vector<WeightQuant> wq;      // one per linear
    std::vector<Matrix> relu_out;     // post-relu maps
    std::vector<BnTape> bn;           // per layer (GIN with use_bn)
    std::vector<Matrix> bn_out;       // BN outputs (GIN with use_bn)
    std::vector<Matrix> gin_h;        // post-aggregation maps (GIN)
    std::vector<Matrix> layer_out;    // per-layer outputs feeding the next layer
    bool bn_training = false;
    Matrix logits;
};

Matrix forward(ModelParams& model, const QuantTable& qt, const CsrGraph& g,
               const NormCoeffs& nc, const NodeFeatures& x0,
               const ForwardOpts& opts, Tape* tape);

// Task loss: mean negative log-likelihood over the train-mask nodes.
struct NllResult {
    double loss = 0.0;
    Matrix dlogits; // zero outside the mask
};
NllResult nll_loss(const Matrix& logits, const std::vector<i32>& mask,
                   const std::vector<i32>& labels);

double accuracy(const Matrix& logits, const std::vector<i32>& mask,
                const std::vector<i32>& labels);

// Parameter gradients mirroring the model / table layout.
struct Grads {
    std::vector<Matrix> d_w;
    std::vector<std::vector<double>> d_bias;
    std::vector<std::vector<double>> d_w_step;
    std::vector<std::vector<double>> d_agg_step;
    std::vector<double> d_gin_eps;
    std::vector<std::vector<double>> d_bn_gamma;
    std::vector<std::vector<double>> d_bn_beta;
    // Feature-site parameter grads: per node (per_node mode), single
    // entry (uniform), or per group (nns, already accumulated).
    std::vector<std::vector<double>> d_site_step;
    std::vector<std::vector<double>> d_site_bit;
    // Per-site fraction of nodes whose dL/dx_q row is exactly zero.
    std::vector<double> site_zero_rows;
};

struct BackwardOpts {
    GradMode grad_mode = GradMode::global;
    // Memory penalty; applied to feature bitwidths when lambda > 0 and
    // the mode carries learnable bits.
    double lambda = 0.0;
    double m_target_kb = 0.0;
    // Skip the input-gradient matmul for the first site when nothing
    // upstream consumes it (local mode keeps this off the hot path).
    bool need_first_input_grad = true;
};

Grads backward(const ModelParams& model, const QuantTable& qt,
               const CsrGraph& g, const NormCoeffs& nc,
               const NodeFeatures& x0, const Tape& tape,
               const Matrix& dlogits, const BackwardOpts& opts);

// Fraction of nodes whose task-gradient row w.r.t. the quantized
// features is exactly zero at the last quantization site.
double zero_grad_fraction(ModelParams& model, const QuantTable& qt,
                          const CsrGraph& g, const NormCoeffs& nc,
                          const NodeFeatures& x0, const DatasetSplit& split);

// ============================================================================
// Training
// ============================================================================

struct TrainConfig {
    i32 epochs = 200;
    double lr_weights = 1e-2;
    double lr_step = 1e-4;
    double lr_bit = 1e-3;
    double weight_decay = 5e-4; // applied to weight matrices only
    double lambda = 1e-4;
    double m_target_kb = 0.0;   // <= 0 disables the memory penalty
    GradMode grad_mode = GradMode::global;
    u64 seed = 1;
    bool record_history = true;
};

struct EpochStats {
    i32 epoch = 0;
    double loss = 0.0;
    double task_loss = 0.0;
    double memory_kb = 0.0;
    double val_acc = 0.0;
    double avg_bits = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> history;
    double final_train_acc = 0.0;
    double final_val_acc = 0.0;
    double final_test_acc = 0.0;
    double avg_bits = 0.0;
    // Site assignments from the final evaluation forward (nns mode).
    std::vector<Assignment> final_assign;
};

TrainResult train(ModelParams& model, QuantTable& qt, const Dataset& data,
                  const TrainConfig& cfg);

// Dimension-weighted mean of the rounded per-node bitwidths over all
// per-node sites. Sites quantizing the raw input are skipped when
// count_first_input is false; 32.0 is reported for fp32 tables. nns
// tables need the node-to-group assignments of a forward pass.
double avg_bits(const QuantTable& qt, bool count_first_input,
                const std::vector<Assignment>* assigns = nullptr);

// Continuous per-node bitwidths per site plus matching dims, as fed to
// the memory penalty.
void collect_feature_bits(const QuantTable& qt,
                          const std::vector<Assignment>* assigns,
                          std::vector<std::vector<double>>& bits,
                          std::vector<double>& dims);

} // namespace a2q
