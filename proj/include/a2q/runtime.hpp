#pragma once

#include <vector>

#include "a2q/graph.hpp"
#include "a2q/matrix.hpp"
#include "a2q/model.hpp"
#include "a2q/quant.hpp"

namespace a2q {

// ============================================================================
// Fixed-point tensors
// ============================================================================

// Integer codes plus the scales that dequantize them. Exactly one of
// row_scales (per-node steps) or col_scales (per-column weight steps)
// is populated. row_bits is storage accounting only; empty means the
// weight convention (4 bits everywhere).
struct FixedMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<i64> codes;
    std::vector<double> row_scales;
    std::vector<double> col_scales;
    std::vector<i32> row_bits;
    bool unsigned_range = false;

    i64 at(std::size_t r, std::size_t c) const { return codes[r * cols + c]; }
    i64& at(std::size_t r, std::size_t c) { return codes[r * cols + c]; }
    // scale × code, exactly
    Matrix dequant() const;
    // every code representable in its row's (or the 4-bit weight) range
    void validate() const;
};

// Re-quantization target for the elementwise pass after an integer op:
// either one (step, bitwidth) per output row (a per-node site) or one
// step per output column with the fixed 4-bit signed weight range.
struct RequantSpec {
    bool per_row = true;
    std::vector<double> steps;
    std::vector<double> bits; // per-row only; ignored for per-column
    bool unsigned_range = false;
};

// Per-channel multiplier/offset of a folded affine stage (BN or bias
// divided by the next step size).
struct FusedAffine {
    std::vector<double> mult;
    std::vector<double> offset;
};

// ============================================================================
// Fused stages
// ============================================================================

// Integer product X̄·W̄ in 64-bit accumulators, then one elementwise
// pass: value = row_scale × col_scale × dot, re-quantized to `next`
// codes by the standard quantize rule. Row scales may carry folded
// normalization factors.
FixedMatrix fuse_update(const FixedMatrix& x, const FixedMatrix& w,
                        const RequantSpec& next);

// Integer-only accumulation over CSR rows (self-loops as stored), then
// one elementwise pass: value = fused_norm[row] × col_scale × sum,
// re-quantized to `next` codes.
FixedMatrix int_aggregate(const CsrGraph& g, const FixedMatrix& b,
                          const std::vector<double>& fused_norm,
                          const RequantSpec& next);

// Dense variant of the same pass with no re-quantization (last layer).
Matrix int_aggregate_values(const CsrGraph& g, const FixedMatrix& b,
                            const std::vector<double>& fused_norm);

// BN with frozen statistics pre-merged: gamma' = γ/sqrt(var+eps),
// theta' = β − mean·gamma'.
FusedAffine merge_bn(const BatchNorm& bn);

// Folds a merged affine stage into the next quantizer: multiplier
// γ/next_step and offset θ/next_step per channel.
FusedAffine fold_bn(const std::vector<double>& gamma,
                    const std::vector<double>& theta,
                    const std::vector<double>& next_step);
FusedAffine fold_bn(const std::vector<double>& gamma,
                    const std::vector<double>& theta, double next_step);

// ============================================================================
// Whole-network fixed-point forward
// ============================================================================

struct IntForwardResult {
    Matrix logits;
    std::vector<std::vector<i32>> site_codes; // per site, N × dim
    std::vector<std::vector<i32>> agg_codes;  // per layer (empty if skipped)
    std::vector<Assignment> assigns;          // per site (nns mode only)
};

// Runs the whole network on integer matmul/aggregation with one float
// elementwise pass per stage. Requires a quantized table; the float
// training path covers fp32. When the first input is unquantized, x0
// must be exactly integral (codes with scale 1).
IntForwardResult int_forward(const ModelParams& model, const QuantTable& qt,
                             const CsrGraph& g, const NormCoeffs& nc,
                             const NodeFeatures& x0);

// ============================================================================
// Operation counts
// ============================================================================

struct OpCounts {
    double int_update = 0;    // integer MACs in X̄·W̄ stages
    double int_aggregate = 0; // integer adds in Ã accumulation
    double float_elemwise = 0;
    double float_nns = 0; // selection compares
    double int_total() const { return int_update + int_aggregate; }
    double float_total() const { return float_elemwise + float_nns; }
};

OpCounts op_counts(const ModelParams& model, const QuantTable& qt,
                   const CsrGraph& g);

} // namespace a2q
