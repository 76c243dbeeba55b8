#include "a2q/accel.hpp"

#include <algorithm>
#include <cmath>

namespace a2q {

namespace {

i64 ceil_div(i64 a, i64 b) { return (a + b - 1) / b; }

i32 bit_length(i64 max_abs, bool any_negative) {
    i32 b = 1;
    while ((i64(1) << b) - 1 < max_abs) ++b;
    return b + (any_negative ? 1 : 0);
}

std::vector<i32> site_bits(const QuantTable& qt, i32 si, i64 n,
                           const std::vector<Assignment>* assigns) {
    std::vector<i32> bits(n);
    switch (qt.mode) {
        case QuantMode::uniform_fixed: {
            const i32 b =
                static_cast<i32>(round_half_away(qt.uniform_bits));
            std::fill(bits.begin(), bits.end(), b);
            break;
        }
        case QuantMode::per_node_learned:
            for (i64 i = 0; i < n; ++i)
                bits[i] =
                    static_cast<i32>(round_half_away(qt.bits[si][i]));
            break;
        case QuantMode::nns_bank: {
            require(assigns && si < static_cast<i32>(assigns->size()) &&
                        static_cast<i64>((*assigns)[si].size()) == n,
                    "build_workload: nns mode needs assignments");
            for (i64 i = 0; i < n; ++i)
                bits[i] = static_cast<i32>(round_half_away(
                    qt.banks[si].bitwidths[(*assigns)[si][i]]));
            break;
        }
        default:
            throw error("build_workload: fp32 has no bitwidths to model");
    }
    return bits;
}

// Raw integral inputs are bit-serial at the width of their own codes.
std::vector<i32> raw_input_bits(const NodeFeatures& x0) {
    std::vector<i32> bits(x0.rows);
    for (std::size_t i = 0; i < x0.rows; ++i) {
        i64 max_abs = 0;
        bool neg = false;
        for (std::size_t j = 0; j < x0.cols; ++j) {
            const double v = x0.at(i, j);
            require(v == std::floor(v),
                    "build_workload: unquantized first input must be "
                    "integral");
            if (v < 0.0) neg = true;
            max_abs = std::max(max_abs,
                               static_cast<i64>(std::abs(v)));
        }
        bits[i] = bit_length(std::max<i64>(max_abs, 1), neg);
    }
    return bits;
}

double map_bits(const UpdateStage& s) {
    double total = 0;
    for (i32 b : s.bits) total += static_cast<double>(b);
    return total * static_cast<double>(s.f_in);
}

} // namespace

// ============================================================================
// Workload construction
// ============================================================================

Workload build_workload(const ModelParams& model, const QuantTable& qt,
                        const CsrGraph& g, const NodeFeatures& x0,
                        const std::vector<Assignment>* assigns) {
    require(qt.mode != QuantMode::fp32,
            "build_workload: fp32 has no bitwidths to model");
    Workload w;
    w.graph = &g;
    w.ops = op_counts(model, qt, g);
    const i64 n = g.num_nodes;
    if (model.kind == ModelKind::gcn) {
        const bool q0 = qt.sites.front().first_input;
        UpdateStage u0{n, model.in_dim, model.hidden_dim, {}};
        u0.bits = q0 ? site_bits(qt, 0, n, assigns) : raw_input_bits(x0);
        UpdateStage u1{n, model.hidden_dim, model.out_dim, {}};
        u1.bits = site_bits(qt, q0 ? 1 : 0, n, assigns);
        w.updates = {std::move(u0), std::move(u1)};
        w.aggs = {{model.hidden_dim}, {model.out_dim}};
    } else {
        const i64 h = model.hidden_dim;
        const i64 dims[4][2] = {{model.in_dim, h},
                                {h, h},
                                {h, h},
                                {h, model.out_dim}};
        for (i32 s = 0; s < 4; ++s) {
            UpdateStage u{n, dims[s][0], dims[s][1], {}};
            u.bits = site_bits(qt, s, n, assigns);
            w.updates.push_back(std::move(u));
        }
        w.aggs = {{model.in_dim}, {h}};
    }
    return w;
}

// ============================================================================
// Cycle model
// ============================================================================

i64 cycles_update(i32 max_bits, i64 f_in, i64 f_out, i32 macs_per_pe) {
    if (f_in == 0 || f_out == 0) return 0;
    return ceil_div(f_in, macs_per_pe) * static_cast<i64>(max_bits) * f_out;
}

i64 cycles_aggregate(const std::vector<i64>& tile_degrees, i64 f,
                     i32 macs_per_pe) {
    if (f == 0 || tile_degrees.empty()) return 0;
    i64 worst = 0;
    for (i64 d : tile_degrees)
        worst = std::max(worst, d * ceil_div(f, macs_per_pe));
    return worst;
}

std::vector<std::vector<i32>> schedule_update_tiles(
    const std::vector<i32>& bits, i32 num_pes, bool sorted) {
    std::vector<i32> order = bits;
    if (sorted) std::sort(order.begin(), order.end(), std::greater<>());
    std::vector<std::vector<i32>> tiles;
    for (std::size_t at = 0; at < order.size(); at += num_pes) {
        const std::size_t end =
            std::min(order.size(), at + static_cast<std::size_t>(num_pes));
        tiles.emplace_back(order.begin() + at, order.begin() + end);
    }
    return tiles;
}

std::vector<std::vector<i64>> schedule_aggregate_tiles(
    const std::vector<i64>& degrees, i32 num_pes, bool sorted) {
    std::vector<i64> order = degrees;
    if (sorted) std::sort(order.begin(), order.end(), std::greater<>());
    std::vector<std::vector<i64>> tiles;
    for (std::size_t at = 0; at < order.size(); at += num_pes) {
        const std::size_t end =
            std::min(order.size(), at + static_cast<std::size_t>(num_pes));
        tiles.emplace_back(order.begin() + at, order.begin() + end);
    }
    return tiles;
}

// ============================================================================
// Energy and report
// ============================================================================

double energy_estimate(const OpCounts& ops, double sram_bits,
                       double dram_bits, const EnergyTable& table) {
    return ops.int_total() * table.int_mac_pj +
           ops.float_total() * table.float_mul_pj +
           sram_bits * table.sram_access_pj_per_bit +
           dram_bits * table.dram_access_pj_per_bit;
}

namespace {

struct Phases {
    i64 update = 0;
    i64 aggregate = 0;
};

Phases run_cycles(const Workload& w, const AccelConfig& cfg) {
    Phases ph;
    for (const UpdateStage& s : w.updates) {
        const auto tiles =
            schedule_update_tiles(s.bits, cfg.num_pes, cfg.sort_nodes);
        for (const auto& t : tiles) {
            const i32 mb = *std::max_element(t.begin(), t.end());
            ph.update += cycles_update(mb, s.f_in, s.f_out, cfg.macs_per_pe);
        }
    }
    std::vector<i64> degrees(w.graph->num_nodes);
    for (i32 u = 0; u < w.graph->num_nodes; ++u)
        degrees[u] = w.graph->degree(u);
    const auto tiles =
        schedule_aggregate_tiles(degrees, cfg.num_pes, cfg.sort_nodes);
    for (const AggregateStage& s : w.aggs)
        for (const auto& t : tiles)
            ph.aggregate += cycles_aggregate(t, s.f, cfg.macs_per_pe);
    return ph;
}

} // namespace

CycleReport simulate(const Workload& w, const AccelConfig& cfg) {
    require(w.graph != nullptr, "simulate: workload has no graph");
    require(!w.updates.empty(), "simulate: empty workload");
    CycleReport rep;
    const Phases ph = run_cycles(w, cfg);
    rep.cycles_update = ph.update;
    rep.cycles_aggregate = ph.aggregate;
    rep.total_cycles = ph.update + ph.aggregate;

    // DRAM: first input map read once, weights read once per stage,
    // logits written once; intermediate maps live in the swapped
    // input/output buffers and pay one extra round trip per tile that
    // overflows the input buffer.
    double dram = map_bits(w.updates.front());
    for (const UpdateStage& s : w.updates)
        dram += static_cast<double>(s.f_in * s.f_out * cfg.weight_bits) +
                static_cast<double>(s.f_out) * 32.0;
    dram += static_cast<double>(w.updates.back().n *
                                w.updates.back().f_out) *
            32.0;
    const double cap =
        static_cast<double>(cfg.input_buffer_bytes) * 8.0;
    for (std::size_t s = 1; s < w.updates.size(); ++s) {
        const auto tiles = schedule_update_tiles(w.updates[s].bits,
                                                 cfg.num_pes, cfg.sort_nodes);
        double offset = 0;
        for (const auto& t : tiles) {
            double tb = 0;
            for (i32 b : t) tb += static_cast<double>(b);
            tb *= static_cast<double>(w.updates[s].f_in);
            if (offset >= cap) dram += 2.0 * tb;
            offset += tb;
        }
    }
    rep.dram_bits = dram;

    // SRAM: every operand read and result written once per stage.
    double sram = 0;
    for (std::size_t s = 0; s < w.updates.size(); ++s) {
        const UpdateStage& u = w.updates[s];
        sram += map_bits(u);
        sram += static_cast<double>(u.f_in * u.f_out * cfg.weight_bits);
        const double out_width = s + 1 < w.updates.size()
                                     ? static_cast<double>(cfg.weight_bits)
                                     : 32.0;
        sram += static_cast<double>(u.n * u.f_out) * out_width;
    }
    for (const AggregateStage& a : w.aggs) {
        sram += static_cast<double>(w.graph->nnz()) *
                static_cast<double>(a.f) *
                static_cast<double>(cfg.weight_bits);
        sram += static_cast<double>(w.graph->num_nodes) *
                static_cast<double>(a.f) *
                static_cast<double>(cfg.weight_bits);
    }
    rep.sram_bits = sram;
    rep.energy_pj =
        energy_estimate(w.ops, rep.sram_bits, rep.dram_bits, cfg.energy);

    double num = 0, den = 0;
    for (const UpdateStage& s : w.updates) {
        for (i32 b : s.bits)
            num += static_cast<double>(b) * static_cast<double>(s.f_in);
        den += static_cast<double>(s.n * s.f_in);
    }
    rep.avg_bits = den > 0 ? num / den : 0.0;

    Workload base = w;
    for (UpdateStage& s : base.updates)
        std::fill(s.bits.begin(), s.bits.end(), 4);
    const Phases bp = run_cycles(base, cfg);
    rep.speedup_vs_int4 =
        static_cast<double>(bp.update + bp.aggregate) /
        static_cast<double>(rep.total_cycles);
    return rep;
}

} // namespace a2q
