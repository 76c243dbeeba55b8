#include "a2q/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

namespace a2q {

namespace {

constexpr i32 kWCode = 7; // 4-bit signed weight/aggregation codes

// 8-bit × 4-bit products summed over any practical inner dimension stay
// far inside a 64-bit accumulator.
static_assert(255LL * 7LL * (1LL << 40) < std::numeric_limits<i64>::max(),
              "accumulator too narrow for supported shapes");

// Standard quantize rule on an already-rescaled value.
i64 qcode(double v, double step, i32 max_code) {
    const double a = std::abs(v);
    const double thr = step * max_code;
    i64 code;
    if (a < thr)
        code = static_cast<i64>(std::floor(a / step + 0.5));
    else
        code = max_code;
    return v < 0.0 ? -code : code;
}

struct RowQuant {
    double step;
    i32 max_code;
};

RowQuant row_quant(const QuantParam& p) {
    const QuantLevels lv = effective_levels(p);
    return {p.step, lv.max_code};
}

std::vector<i64> int_matmul(const FixedMatrix& x, const FixedMatrix& w) {
    require(x.cols == w.rows, "int matmul: inner dimensions differ");
    require(x.cols < (1u << 24), "int matmul: inner dimension too large");
    std::vector<i64> out(x.rows * w.cols, 0);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const i64* xr = x.codes.data() + i * x.cols;
        i64* or_ = out.data() + i * w.cols;
        for (std::size_t k = 0; k < x.cols; ++k) {
            const i64 xv = xr[k];
            if (xv == 0) continue;
            const i64* wr = w.codes.data() + k * w.cols;
            for (std::size_t j = 0; j < w.cols; ++j) or_[j] += xv * wr[j];
        }
    }
    return out;
}

std::vector<i64> int_row_sum(const CsrGraph& g, const FixedMatrix& b,
                             bool skip_self) {
    require(b.rows == static_cast<std::size_t>(g.num_nodes),
            "int aggregation: row count does not match graph");
    std::vector<i64> out(b.rows * b.cols, 0);
    for (i32 u = 0; u < g.num_nodes; ++u) {
        i64* ou = out.data() + static_cast<std::size_t>(u) * b.cols;
        for (i64 e = g.row_ptr[u]; e < g.row_ptr[u + 1]; ++e) {
            const i32 v = g.col_idx[e];
            if (skip_self && v == u) continue;
            const i64* bv =
                b.codes.data() + static_cast<std::size_t>(v) * b.cols;
            for (std::size_t c = 0; c < b.cols; ++c) ou[c] += bv[c];
        }
    }
    return out;
}

// Raw input treated as codes with scale one; anything non-integral
// cannot enter the integer pipeline.
FixedMatrix codes_from_raw(const Matrix& x0) {
    FixedMatrix fm;
    fm.rows = x0.rows;
    fm.cols = x0.cols;
    fm.codes.resize(x0.data.size());
    for (std::size_t e = 0; e < x0.data.size(); ++e) {
        const double v = x0.data[e];
        require(v == std::floor(v) && std::abs(v) <= 255.0,
                "int_forward: unquantized first input must hold small "
                "integers; enable first-input quantization for real-valued "
                "features");
        fm.codes[e] = static_cast<i64>(v);
    }
    fm.row_scales.assign(x0.rows, 1.0);
    fm.row_bits.assign(x0.rows, 32);
    return fm;
}

} // namespace

// ============================================================================
// FixedMatrix
// ============================================================================

Matrix FixedMatrix::dequant() const {
    Matrix out(rows, cols);
    const bool by_row = !row_scales.empty();
    require(by_row || !col_scales.empty(), "dequant: no scales");
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
            out.at(i, j) = static_cast<double>(codes[i * cols + j]) *
                           (by_row ? row_scales[i] : col_scales[j]);
    return out;
}

void FixedMatrix::validate() const {
    require(codes.size() == rows * cols, "FixedMatrix: size mismatch");
    for (std::size_t i = 0; i < rows; ++i) {
        const i32 b = row_bits.empty() ? 4 : row_bits[i];
        if (b >= 32) continue;
        const i64 hi = unsigned_range ? (i64(1) << b) - 1
                                      : (i64(1) << (b - 1)) - 1;
        const i64 lo = unsigned_range ? 0 : -hi;
        for (std::size_t j = 0; j < cols; ++j) {
            const i64 c = codes[i * cols + j];
            require(c >= lo && c <= hi,
                    "FixedMatrix: code outside its row bitwidth");
        }
    }
}

// ============================================================================
// Fused stages
// ============================================================================

FixedMatrix fuse_update(const FixedMatrix& x, const FixedMatrix& w,
                        const RequantSpec& next) {
    require(!x.row_scales.empty() && !w.col_scales.empty(),
            "fuse_update: x needs row scales and w needs column scales");
    const std::vector<i64> dot = int_matmul(x, w);
    FixedMatrix out;
    out.rows = x.rows;
    out.cols = w.cols;
    out.codes.resize(out.rows * out.cols);
    if (next.per_row) {
        require(next.steps.size() == out.rows && next.bits.size() == out.rows,
                "fuse_update: per-row requant size mismatch");
        out.row_scales = next.steps;
        out.unsigned_range = next.unsigned_range;
        out.row_bits.resize(out.rows);
    } else {
        require(next.steps.size() == out.cols,
                "fuse_update: per-column requant size mismatch");
        out.col_scales = next.steps;
    }
    for (std::size_t i = 0; i < out.rows; ++i) {
        RowQuant rq{0.0, kWCode};
        if (next.per_row) {
            rq = row_quant({next.steps[i], next.bits[i], next.unsigned_range});
            out.row_bits[i] = static_cast<i32>(round_half_away(next.bits[i]));
        }
        for (std::size_t j = 0; j < out.cols; ++j) {
            const double v = x.row_scales[i] * w.col_scales[j] *
                             static_cast<double>(dot[i * out.cols + j]);
            out.at(i, j) = next.per_row ? qcode(v, rq.step, rq.max_code)
                                        : qcode(v, next.steps[j], kWCode);
        }
    }
    return out;
}

FixedMatrix int_aggregate(const CsrGraph& g, const FixedMatrix& b,
                          const std::vector<double>& fused_norm,
                          const RequantSpec& next) {
    require(fused_norm.size() == b.rows, "int_aggregate: norm size mismatch");
    require(!b.col_scales.empty(), "int_aggregate: b needs column scales");
    const std::vector<i64> sum = int_row_sum(g, b, false);
    FixedMatrix out;
    out.rows = b.rows;
    out.cols = b.cols;
    out.codes.resize(sum.size());
    if (next.per_row) {
        require(next.steps.size() == out.rows && next.bits.size() == out.rows,
                "int_aggregate: per-row requant size mismatch");
        out.row_scales = next.steps;
        out.unsigned_range = next.unsigned_range;
        out.row_bits.resize(out.rows);
    } else {
        require(next.steps.size() == out.cols,
                "int_aggregate: per-column requant size mismatch");
        out.col_scales = next.steps;
    }
    for (std::size_t i = 0; i < out.rows; ++i) {
        RowQuant rq{0.0, kWCode};
        if (next.per_row) {
            rq = row_quant({next.steps[i], next.bits[i], next.unsigned_range});
            out.row_bits[i] = static_cast<i32>(round_half_away(next.bits[i]));
        }
        for (std::size_t j = 0; j < out.cols; ++j) {
            const double v = fused_norm[i] * b.col_scales[j] *
                             static_cast<double>(sum[i * out.cols + j]);
            out.at(i, j) = next.per_row ? qcode(v, rq.step, rq.max_code)
                                        : qcode(v, next.steps[j], kWCode);
        }
    }
    return out;
}

Matrix int_aggregate_values(const CsrGraph& g, const FixedMatrix& b,
                            const std::vector<double>& fused_norm) {
    require(fused_norm.size() == b.rows, "int_aggregate: norm size mismatch");
    require(!b.col_scales.empty(), "int_aggregate: b needs column scales");
    const std::vector<i64> sum = int_row_sum(g, b, false);
    Matrix out(b.rows, b.cols);
    for (std::size_t i = 0; i < b.rows; ++i)
        for (std::size_t j = 0; j < b.cols; ++j)
            out.at(i, j) = fused_norm[i] * b.col_scales[j] *
                           static_cast<double>(sum[i * b.cols + j]);
    return out;
}

FusedAffine merge_bn(const BatchNorm& bn) {
    FusedAffine fa;
    fa.mult.resize(bn.gamma.size());
    fa.offset.resize(bn.gamma.size());
    for (std::size_t c = 0; c < bn.gamma.size(); ++c) {
        const double inv_std = 1.0 / std::sqrt(bn.running_var[c] + bn.eps);
        fa.mult[c] = bn.gamma[c] * inv_std;
        fa.offset[c] = bn.beta[c] - bn.running_mean[c] * fa.mult[c];
    }
    return fa;
}

FusedAffine fold_bn(const std::vector<double>& gamma,
                    const std::vector<double>& theta,
                    const std::vector<double>& next_step) {
    require(gamma.size() == theta.size() && gamma.size() == next_step.size(),
            "fold_bn: size mismatch");
    FusedAffine fa;
    fa.mult.resize(gamma.size());
    fa.offset.resize(gamma.size());
    for (std::size_t c = 0; c < gamma.size(); ++c) {
        require(next_step[c] > 0.0, "fold_bn: zero next step");
        fa.mult[c] = gamma[c] / next_step[c];
        fa.offset[c] = theta[c] / next_step[c];
    }
    return fa;
}

FusedAffine fold_bn(const std::vector<double>& gamma,
                    const std::vector<double>& theta, double next_step) {
    return fold_bn(gamma, theta,
                   std::vector<double>(gamma.size(), next_step));
}

// ============================================================================
// Whole-network forward
// ============================================================================

namespace {

FixedMatrix weight_codes(const LinearLayer& lin) {
    FixedMatrix w;
    w.rows = lin.w.rows;
    w.cols = lin.w.cols;
    w.codes.resize(w.rows * w.cols);
    w.col_scales = lin.w_step;
    for (std::size_t i = 0; i < w.rows; ++i)
        for (std::size_t j = 0; j < w.cols; ++j)
            w.at(i, j) = qcode(lin.w.at(i, j), lin.w_step[j], kWCode);
    return w;
}

void record_codes(const FixedMatrix& fm, std::vector<i32>& out) {
    out.resize(fm.codes.size());
    for (std::size_t e = 0; e < fm.codes.size(); ++e)
        out[e] = static_cast<i32>(fm.codes[e]);
}

// Per-node requant of a dense value matrix at site `si`, with inline
// group selection in nns mode (on the same pre values the float path
// sees).
FixedMatrix requant_site(const QuantTable& qt, i32 si, const Matrix& vals,
                         Assignment& assign) {
    FixedMatrix out;
    out.rows = vals.rows;
    out.cols = vals.cols;
    out.codes.resize(vals.data.size());
    out.row_scales.resize(vals.rows);
    out.row_bits.resize(vals.rows);
    out.unsigned_range = qt.sites[si].unsigned_range;
    if (qt.mode == QuantMode::nns_bank) assign = select(qt.banks[si], vals);
    for (std::size_t i = 0; i < vals.rows; ++i) {
        const QuantParam p =
            qt.node_param(si, static_cast<i32>(i), &assign);
        const RowQuant rq = row_quant(p);
        out.row_scales[i] = p.step;
        out.row_bits[i] = static_cast<i32>(round_half_away(p.bitwidth));
        const double* src = vals.data.data() + i * vals.cols;
        for (std::size_t j = 0; j < vals.cols; ++j) {
            require(!out.unsigned_range || src[j] >= 0.0,
                    "int_forward: negative input to unsigned site quantizer");
            out.at(i, j) = qcode(src[j], rq.step, rq.max_code);
        }
    }
    return out;
}

FixedMatrix colquant_codes(const Matrix& vals,
                           const std::vector<double>& steps) {
    FixedMatrix out;
    out.rows = vals.rows;
    out.cols = vals.cols;
    out.codes.resize(vals.data.size());
    out.col_scales = steps;
    for (std::size_t i = 0; i < vals.rows; ++i)
        for (std::size_t j = 0; j < vals.cols; ++j)
            out.at(i, j) = qcode(vals.at(i, j), steps[j], kWCode);
    return out;
}

} // namespace

IntForwardResult int_forward(const ModelParams& model, const QuantTable& qt,
                             const CsrGraph& g, const NormCoeffs& nc,
                             const NodeFeatures& x0) {
    require(qt.mode != QuantMode::fp32,
            "int_forward: fp32 checkpoints have no integer path");
    require(static_cast<i64>(x0.rows) == g.num_nodes,
            "int_forward: feature rows do not match graph");
    require(static_cast<i32>(x0.cols) == model.in_dim,
            "int_forward: feature dim does not match model");
    const i32 layers = model.num_layers();
    IntForwardResult res;
    res.site_codes.resize(qt.num_sites());
    res.agg_codes.resize(layers);
    res.assigns.resize(qt.num_sites());

    std::vector<FixedMatrix> wq;
    for (const LinearLayer& lin : model.linears)
        wq.push_back(weight_codes(lin));

    if (model.kind == ModelKind::gcn) {
        const bool q0 = qt.sites.front().first_input;
        FixedMatrix x;
        if (q0) {
            x = requant_site(qt, 0, x0, res.assigns[0]);
            record_codes(x, res.site_codes[0]);
        } else {
            x = codes_from_raw(x0);
        }
        for (i32 l = 0; l < layers; ++l) {
            // Right-side D^{-1/2} folds into the row scales of the
            // update product.
            FixedMatrix xin = std::move(x);
            for (std::size_t i = 0; i < xin.rows; ++i)
                xin.row_scales[i] *= nc.inv_sqrt_deg[i];
            RequantSpec agg_rq;
            agg_rq.per_row = false;
            agg_rq.steps = model.agg_steps[l];
            FixedMatrix b = fuse_update(xin, wq[l], agg_rq);
            record_codes(b, res.agg_codes[l]);
            const std::vector<i64> sum = int_row_sum(g, b, false);
            // Elementwise pass: left D^{-1/2}, bias, ReLU, requantize.
            Matrix vals(b.rows, b.cols);
            for (std::size_t i = 0; i < b.rows; ++i) {
                const double dn = nc.inv_sqrt_deg[i];
                for (std::size_t j = 0; j < b.cols; ++j) {
                    double v = dn * model.agg_steps[l][j] *
                                   static_cast<double>(sum[i * b.cols + j]) +
                               model.linears[l].bias[j];
                    if (l + 1 < layers && v < 0.0) v = 0.0;
                    vals.at(i, j) = v;
                }
            }
            if (l + 1 < layers) {
                const i32 si = q0 ? l + 1 : l;
                x = requant_site(qt, si, vals, res.assigns[si]);
                record_codes(x, res.site_codes[si]);
            } else {
                res.logits = std::move(vals);
            }
        }
        return res;
    }

    // GIN
    const FusedAffine bn0 = model.use_bn ? merge_bn(model.bns[0])
                                         : FusedAffine{};
    const FusedAffine bn1 = model.use_bn && model.bns.size() > 1
                                ? merge_bn(model.bns[1])
                                : FusedAffine{};
    FixedMatrix agg;
    if (!model.agg_steps[0].empty()) {
        agg = colquant_codes(x0, model.agg_steps[0]);
        record_codes(agg, res.agg_codes[0]);
    } else {
        agg = codes_from_raw(x0);
        agg.col_scales.assign(x0.cols, 1.0);
        agg.row_scales.clear();
    }
    for (i32 l = 0; l < layers; ++l) {
        const FusedAffine& bnf = l == 0 ? bn0 : bn1;
        const std::vector<i64> nsum = int_row_sum(g, agg, true);
        const double one_eps = 1.0 + model.gin_eps[l];
        Matrix hvals(agg.rows, agg.cols);
        for (std::size_t i = 0; i < agg.rows; ++i)
            for (std::size_t j = 0; j < agg.cols; ++j)
                hvals.at(i, j) =
                    agg.col_scales[j] *
                    (one_eps * static_cast<double>(agg.at(i, j)) +
                     static_cast<double>(nsum[i * agg.cols + j]));
        const i32 si_h = 2 * l, si_z = 2 * l + 1;
        FixedMatrix h = requant_site(qt, si_h, hvals, res.assigns[si_h]);
        record_codes(h, res.site_codes[si_h]);

        const std::vector<i64> p1 = int_matmul(h, wq[2 * l]);
        const std::size_t fo1 = wq[2 * l].cols;
        Matrix zvals(h.rows, fo1);
        for (std::size_t i = 0; i < h.rows; ++i) {
            const double rs = h.row_scales[i];
            for (std::size_t j = 0; j < fo1; ++j) {
                double u = rs * model.linears[2 * l].w_step[j] *
                               static_cast<double>(p1[i * fo1 + j]) +
                           model.linears[2 * l].bias[j];
                if (u < 0.0) u = 0.0;
                if (model.use_bn) u = bnf.mult[j] * u + bnf.offset[j];
                zvals.at(i, j) = u;
            }
        }
        FixedMatrix z = requant_site(qt, si_z, zvals, res.assigns[si_z]);
        record_codes(z, res.site_codes[si_z]);

        const std::vector<i64> p2 = int_matmul(z, wq[2 * l + 1]);
        const std::size_t fo2 = wq[2 * l + 1].cols;
        Matrix out(z.rows, fo2);
        for (std::size_t i = 0; i < z.rows; ++i) {
            const double rs = z.row_scales[i];
            for (std::size_t j = 0; j < fo2; ++j)
                out.at(i, j) = rs * model.linears[2 * l + 1].w_step[j] *
                                   static_cast<double>(p2[i * fo2 + j]) +
                               model.linears[2 * l + 1].bias[j];
        }
        if (l + 1 < layers) {
            agg = colquant_codes(out, model.agg_steps[l + 1]);
            record_codes(agg, res.agg_codes[l + 1]);
        } else {
            res.logits = std::move(out);
        }
    }
    return res;
}

// ============================================================================
// Operation counts
// ============================================================================

OpCounts op_counts(const ModelParams& model, const QuantTable& qt,
                   const CsrGraph& g) {
    OpCounts oc;
    const double n = static_cast<double>(g.num_nodes);
    if (g.num_nodes == 0) return oc;
    for (const LinearLayer& lin : model.linears)
        oc.int_update += n * static_cast<double>(lin.w.rows) *
                         static_cast<double>(lin.w.cols);
    const i32 layers = model.num_layers();
    if (model.kind == ModelKind::gcn) {
        for (i32 l = 0; l < layers; ++l) {
            const double f = static_cast<double>(model.linears[l].w.cols);
            oc.int_aggregate += static_cast<double>(g.nnz()) * f;
            oc.float_elemwise += 2.0 * n * f; // fuse requant + norm pass
        }
    } else {
        const double nnz_n = static_cast<double>(g.nnz_without_self_loops());
        for (i32 l = 0; l < layers; ++l) {
            const double fi =
                static_cast<double>(model.linears[2 * l].w.rows);
            const double fm =
                static_cast<double>(model.linears[2 * l].w.cols);
            const double fo =
                static_cast<double>(model.linears[2 * l + 1].w.cols);
            oc.int_aggregate += nnz_n * fi;
            // h pass (with the epsilon product), z pass, output pass
            oc.float_elemwise += 2.0 * n * fi + n * fm + n * fo;
        }
    }
    if (qt.mode == QuantMode::nns_bank) {
        const double m = static_cast<double>(qt.banks.front().groups());
        const double cmp = std::ceil(std::log2(std::max(m, 2.0)));
        oc.float_nns = n * cmp * static_cast<double>(qt.num_sites());
    }
    return oc;
}

} // namespace a2q
