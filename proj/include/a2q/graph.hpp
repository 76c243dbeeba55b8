#pragma once

#include <string>
#include <utility>
#include <vector>

#include "a2q/common.hpp"
#include "a2q/matrix.hpp"

namespace a2q {

// ============================================================================
// Graph storage
// ============================================================================

// Canonical undirected graph in CSR form: symmetric, duplicate-free,
// column indices sorted within each row, one self-loop per node.
struct CsrGraph {
    i32 num_nodes = 0;
    std::vector<i64> row_ptr; // size num_nodes + 1
    std::vector<i32> col_idx;
    bool has_self_loops = false;

    i64 nnz() const { return static_cast<i64>(col_idx.size()); }
    i64 degree(i32 node) const { return row_ptr[node + 1] - row_ptr[node]; }
    // Entries of the symmetrized adjacency excluding the self-loop diagonal.
    i64 nnz_without_self_loops() const {
        return has_self_loops ? nnz() - num_nodes : nnz();
    }
};

// Symmetric normalization coefficients (d_i + 1 self-loop included).
struct NormCoeffs {
    std::vector<double> inv_sqrt_deg;
};

struct DatasetSplit {
    std::vector<i32> train;
    std::vector<i32> val;
    std::vector<i32> test;
    std::vector<i32> labels; // one per node, -1 where unlabeled
    i32 num_classes = 0;
};

struct Dataset {
    CsrGraph graph;
    NodeFeatures features;
    DatasetSplit split;
};

// Builds the canonical CSR from an undirected edge list. Both
// directions of every edge are inserted; a repeated pair (in either
// orientation) is an error. Self-loops are added exactly once when
// requested, merging with any explicit (u, u) input edges.
CsrGraph csr_from_edges(i32 num_nodes,
                        const std::vector<std::pair<i32, i32>>& edges,
                        bool add_self_loops = true);

// Recovers the undirected edge list (u < v pairs, self-loops dropped).
std::vector<std::pair<i32, i32>> undirected_edges(const CsrGraph& g);

NormCoeffs norm_coeffs(const CsrGraph& g);

enum class AggregateMode { gcn_norm, gin_sum };

// Reference aggregation:
//   gcn_norm: h_i = sum_{j in N(i) u {i}} (d_i d_j)^(-1/2) x_j
//   gin_sum:  h_i = (1 + eps) x_i + sum_{j in N(i)} x_j  (no self term in the sum)
NodeFeatures aggregate(const CsrGraph& g, const NodeFeatures& x,
                       AggregateMode mode, const NormCoeffs* coeffs = nullptr,
                       double eps = 0.0);

// ============================================================================
// On-disk formats
// ============================================================================

// Edge file: one "src dst" pair per line, '#' starts a comment.
// Feature file: magic "A2QF", u32 N, u32 F (little endian), then N*F
// float32 row-major. Split file: lines "train:", "val:", "test:" each
// followed by space-separated node ids. Labels file: one integer per
// node per line, -1 meaning unlabeled.
Dataset load_graph(const std::string& edge_path,
                   const std::string& feature_path,
                   const std::string& split_path,
                   const std::string& labels_path);

std::vector<std::pair<i32, i32>> load_edge_list(const std::string& path);
NodeFeatures load_features(const std::string& path);
DatasetSplit load_split(const std::string& split_path,
                        const std::string& labels_path, i32 num_nodes);

void save_edge_list(const std::string& path, const CsrGraph& g);
void save_features(const std::string& path, const NodeFeatures& x);
void save_split(const std::string& split_path, const std::string& labels_path,
                const DatasetSplit& split);

// ============================================================================
// Synthetic graphs
// ============================================================================

// Preferential-attachment graph with tunable tail exponent. Each new
// node attaches `edges_per_node` edges to existing nodes drawn with
// probability proportional to degree + a, a = (exponent - 3) *
// edges_per_node (weights floored at a small positive constant), which
// targets a degree tail ~ k^(-exponent).
CsrGraph synth_powerlaw(i32 n, double exponent, u64 seed,
                        i32 edges_per_node = 2);

// Community-structured dataset on a power-law graph: class labels drawn
// uniformly, attachment biased toward same-class targets, binary
// topic-block features, per-class train split.
struct SynthSpec {
    i32 n = 200;
    double exponent = 2.5;
    i32 classes = 4;
    i32 feat_dim = 32;
    i32 edges_per_node = 2;
    // Same-class attachment weight multiplier; 1 = no community structure.
    double homophily = 8.0;
    double topic_on = 0.5;   // P(feature = 1) inside the class topic block
    double topic_off = 0.02; // P(feature = 1) outside it
    // When positive, random degree-biased edges are added (or growth
    // stops early) so the undirected edge count matches exactly.
    i64 target_undirected_edges = 0;
    i32 train_per_class = 10;
    i32 val_count = 0;   // 0 = half of the remainder
    i32 test_count = 0;  // 0 = rest
    u64 seed = 1;
};

Dataset synth_dataset(const SynthSpec& spec);

// Citation-scale preset: 2708 nodes, 1433 binary features, 7 classes,
// 5278 undirected edges, 20 training nodes per class, 500 val, 1000 test.
SynthSpec cora_scale_spec(u64 seed);

} // namespace a2q
