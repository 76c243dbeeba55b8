#pragma once

#include <vector>

#include "a2q/graph.hpp"
#include "a2q/model.hpp"
#include "a2q/runtime.hpp"

namespace a2q {

// ============================================================================
// Configuration
// ============================================================================

// Per-op energies are config inputs (45 nm-class defaults), not ground
// truth; every energy output is relative to this table.
struct EnergyTable {
    double int_mac_pj = 0.2;
    double float_mul_pj = 3.7; // 18.5x the int MAC
    double sram_access_pj_per_bit = 0.156;
    double dram_access_pj_per_bit = 7.0;
};

struct AccelConfig {
    i32 num_pes = 256;
    i32 macs_per_pe = 16;
    i32 weight_bits = 4;
    i64 input_buffer_bytes = 2 * 1024 * 1024;
    i64 output_buffer_bytes = 2 * 1024 * 1024;
    i64 edge_buffer_bytes = 256 * 1024;
    i64 weight_buffer_bytes = 256 * 1024;
    EnergyTable energy;
    bool sort_nodes = true; // ablation flag: schedule in natural order
};

// ============================================================================
// Workload
// ============================================================================

// One integer matmul stage: N rows at per-row input bitwidths.
struct UpdateStage {
    i64 n = 0;
    i64 f_in = 0;
    i64 f_out = 0;
    std::vector<i32> bits; // rounded per-node bits of the input map
};

struct AggregateStage {
    i64 f = 0; // width of the aggregated code matrix
};

struct Workload {
    std::vector<UpdateStage> updates;
    std::vector<AggregateStage> aggs;
    const CsrGraph* graph = nullptr;
    OpCounts ops;
};

// Derives the stage list from a trained model: per-node bits from the
// quant table (nns mode needs the assignments of a forward pass);
// an unquantized first input contributes the bit-length of its raw
// integer codes.
Workload build_workload(const ModelParams& model, const QuantTable& qt,
                        const CsrGraph& g, const NodeFeatures& x0,
                        const std::vector<Assignment>* assigns);

// ============================================================================
// Cycle model
// ============================================================================

// Bit-serial MACs in lockstep over one tile: ceil(f_in / macs_per_pe)
// input chunks, max_bits cycles each, one output column at a time.
i64 cycles_update(i32 max_bits, i64 f_in, i64 f_out, i32 macs_per_pe);

// Accumulation only; the straggler row of the tile dominates.
i64 cycles_aggregate(const std::vector<i64>& tile_degrees, i64 f,
                     i32 macs_per_pe);

// Tiles of num_pes rows. Update phase sorts by bitwidth descending,
// aggregate phase by in-degree descending; `sorted = false` keeps the
// natural node order.
std::vector<std::vector<i32>> schedule_update_tiles(
    const std::vector<i32>& bits, i32 num_pes, bool sorted);
std::vector<std::vector<i64>> schedule_aggregate_tiles(
    const std::vector<i64>& degrees, i32 num_pes, bool sorted);

// ============================================================================
// Report
// ============================================================================

struct CycleReport {
    i64 cycles_update = 0;
    i64 cycles_aggregate = 0;
    i64 total_cycles = 0;
    double dram_bits = 0;
    double sram_bits = 0;
    double energy_pj = 0;
    double speedup_vs_int4 = 1.0;
    double avg_bits = 0;
};

double energy_estimate(const OpCounts& ops, double sram_bits,
                       double dram_bits, const EnergyTable& table);

CycleReport simulate(const Workload& w, const AccelConfig& cfg);

} // namespace a2q
