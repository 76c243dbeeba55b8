#include "a2q/model.hpp"

#include <algorithm>
#include <cmath>

#include "a2q/rng.hpp"

namespace a2q {

namespace {

constexpr double kLn2 = 0.69314718055994530942;
constexpr i32 kWeightMaxCode = 7; // 4-bit signed

// ============================================================================
// Small dense helpers
// ============================================================================

void rowscale(const Matrix& in, const std::vector<double>& c, Matrix& out) {
    out.rows = in.rows;
    out.cols = in.cols;
    out.data.resize(in.data.size());
    for (std::size_t i = 0; i < in.rows; ++i) {
        const double s = c[i];
        const double* src = in.data.data() + i * in.cols;
        double* dst = out.data.data() + i * in.cols;
        for (std::size_t j = 0; j < in.cols; ++j) dst[j] = s * src[j];
    }
}

// Plain adjacency row sum over all stored entries (self-loop included).
Matrix adj_row_sum(const CsrGraph& g, const Matrix& x) {
    Matrix h(x.rows, x.cols, 0.0);
    for (i32 u = 0; u < g.num_nodes; ++u) {
        double* hu = h.data.data() + static_cast<std::size_t>(u) * x.cols;
        for (i64 e = g.row_ptr[u]; e < g.row_ptr[u + 1]; ++e) {
            const double* xv = x.data.data() +
                               static_cast<std::size_t>(g.col_idx[e]) * x.cols;
            for (std::size_t c = 0; c < x.cols; ++c) hu[c] += xv[c];
        }
    }
    return h;
}

void add_bias_rows(Matrix& m, const std::vector<double>& bias) {
    for (std::size_t i = 0; i < m.rows; ++i) {
        double* row = m.data.data() + i * m.cols;
        for (std::size_t j = 0; j < m.cols; ++j) row[j] += bias[j];
    }
}

Matrix relu(const Matrix& in) {
    Matrix out = in;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return out;
}

std::vector<double> colsum(const Matrix& m) {
    std::vector<double> s(m.cols, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) s[j] += m.at(i, j);
    return s;
}

// ============================================================================
// Quantizer application (same arithmetic as the scalar ops, inlined
// over matrices)
// ============================================================================

struct RowLevels {
    double step;
    double max_code;
    double threshold;
    double dbit_factor; // d x_q / d b at the clamp, per unit sign(x)
};

RowLevels row_levels(const QuantParam& p) {
    const QuantLevels lv = effective_levels(p);
    const double rb = round_half_away(p.bitwidth);
    const double pw = p.unsigned_range ? std::exp2(rb) : std::exp2(rb - 1.0);
    return {p.step, static_cast<double>(lv.max_code), lv.threshold,
            pw * kLn2 * p.step};
}

void site_quant(const QuantTable& qt, i32 si, const Matrix& in, SiteTape& t,
                bool record_codes) {
    const std::size_t n = in.rows, f = in.cols;
    t.active = true;
    t.pre = in;
    t.post.rows = n;
    t.post.cols = f;
    t.post.data.resize(n * f);
    t.sat.assign(n * f, 0);
    t.eff_step.resize(n);
    t.eff_bit.resize(n);
    if (record_codes)
        t.codes.resize(n * f);
    else
        t.codes.clear();
    if (qt.mode == QuantMode::nns_bank)
        t.assign = select(qt.banks[si], in);
    const bool unsigned_range = qt.sites[si].unsigned_range;
    for (std::size_t i = 0; i < n; ++i) {
        const QuantParam p = qt.node_param(si, static_cast<i32>(i),
                                           &t.assign);
        t.eff_step[i] = p.step;
        t.eff_bit[i] = p.bitwidth;
        const RowLevels lv = row_levels(p);
        const double* src = in.data.data() + i * f;
        double* dst = t.post.data.data() + i * f;
        for (std::size_t j = 0; j < f; ++j) {
            const double v = src[j];
            require(!unsigned_range || v >= 0.0,
                    "forward: negative input to unsigned site quantizer");
            const double a = std::abs(v);
            double code;
            if (a < lv.threshold) {
                code = std::floor(a / lv.step + 0.5);
            } else {
                code = lv.max_code;
                t.sat[i * f + j] = 1;
            }
            if (v < 0.0) code = -code;
            dst[j] = lv.step * code;
            if (record_codes) t.codes[i * f + j] = static_cast<i32>(code);
        }
    }
}

void col_quant(const Matrix& in, const std::vector<double>& steps,
               ColQuantTape& t, bool record_codes) {
    require(steps.size() == in.cols, "col_quant: step count mismatch");
    const std::size_t n = in.rows, f = in.cols;
    t.active = true;
    t.pre = in;
    t.post.rows = n;
    t.post.cols = f;
    t.post.data.resize(n * f);
    t.sat.assign(n * f, 0);
    if (record_codes)
        t.codes.resize(n * f);
    else
        t.codes.clear();
    for (std::size_t i = 0; i < n; ++i) {
        const double* src = in.data.data() + i * f;
        double* dst = t.post.data.data() + i * f;
        for (std::size_t j = 0; j < f; ++j) {
            const double s = steps[j];
            const double thr = s * kWeightMaxCode;
            const double v = src[j];
            const double a = std::abs(v);
            double code;
            if (a < thr) {
                code = std::floor(a / s + 0.5);
            } else {
                code = kWeightMaxCode;
                t.sat[i * f + j] = 1;
            }
            if (v < 0.0) code = -code;
            dst[j] = s * code;
            if (record_codes) t.codes[i * f + j] = static_cast<i32>(code);
        }
    }
}

void weight_quant(const LinearLayer& lin, WeightQuant& wq) {
    const std::size_t n = lin.w.rows, f = lin.w.cols;
    wq.wq.rows = n;
    wq.wq.cols = f;
    wq.wq.data.resize(n * f);
    wq.sat.assign(n * f, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const double* src = lin.w.data.data() + i * f;
        double* dst = wq.wq.data.data() + i * f;
        for (std::size_t j = 0; j < f; ++j) {
            const double s = lin.w_step[j];
            const double thr = s * kWeightMaxCode;
            const double v = src[j];
            const double a = std::abs(v);
            double code;
            if (a < thr) {
                code = std::floor(a / s + 0.5);
            } else {
                code = kWeightMaxCode;
                wq.sat[i * f + j] = 1;
            }
            if (v < 0.0) code = -code;
            dst[j] = s * code;
        }
    }
}

// ============================================================================
// Batch norm
// ============================================================================

void bn_forward(BatchNorm& bn, const Matrix& in, bool training, BnTape& t,
                Matrix& out) {
    const std::size_t n = in.rows, f = in.cols;
    out.rows = n;
    out.cols = f;
    out.data.resize(n * f);
    t.xhat.rows = n;
    t.xhat.cols = f;
    t.xhat.data.resize(n * f);
    t.inv_std.resize(f);
    t.mean.resize(f);
    if (training) {
        require(n >= 2, "bn_forward: batch statistics need at least 2 rows");
        for (std::size_t c = 0; c < f; ++c) {
            double mean = 0.0;
            for (std::size_t i = 0; i < n; ++i) mean += in.at(i, c);
            mean /= static_cast<double>(n);
            double var = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = in.at(i, c) - mean;
                var += d * d;
            }
            var /= static_cast<double>(n);
            t.mean[c] = mean;
            t.inv_std[c] = 1.0 / std::sqrt(var + bn.eps);
            bn.running_mean[c] =
                (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * mean;
            bn.running_var[c] = (1.0 - bn.momentum) * bn.running_var[c] +
                                bn.momentum * var * static_cast<double>(n) /
                                    static_cast<double>(n - 1);
        }
    } else {
        for (std::size_t c = 0; c < f; ++c) {
            t.mean[c] = bn.running_mean[c];
            t.inv_std[c] = 1.0 / std::sqrt(bn.running_var[c] + bn.eps);
        }
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < f; ++c) {
            const double xh = (in.at(i, c) - t.mean[c]) * t.inv_std[c];
            t.xhat.at(i, c) = xh;
            out.at(i, c) = bn.gamma[c] * xh + bn.beta[c];
        }
}

void bn_backward(const BatchNorm& bn, const BnTape& t, bool training,
                 const Matrix& dout, Matrix& din, std::vector<double>& dgamma,
                 std::vector<double>& dbeta) {
    const std::size_t n = dout.rows, f = dout.cols;
    din.rows = n;
    din.cols = f;
    din.data.resize(n * f);
    dgamma.assign(f, 0.0);
    dbeta.assign(f, 0.0);
    for (std::size_t c = 0; c < f; ++c) {
        double sg = 0.0, sb = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            sg += dout.at(i, c) * t.xhat.at(i, c);
            sb += dout.at(i, c);
        }
        dgamma[c] = sg;
        dbeta[c] = sb;
        if (training) {
            const double k = bn.gamma[c] * t.inv_std[c] /
                             static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i)
                din.at(i, c) = k * (static_cast<double>(n) * dout.at(i, c) -
                                    sb - t.xhat.at(i, c) * sg);
        } else {
            const double k = bn.gamma[c] * t.inv_std[c];
            for (std::size_t i = 0; i < n; ++i)
                din.at(i, c) = k * dout.at(i, c);
        }
    }
}

} // namespace

// ============================================================================
// Initialization
// ============================================================================

QuantParam QuantTable::node_param(i32 site, i32 node,
                                  const Assignment* assign) const {
    const SiteSpec& spec = sites[site];
    switch (mode) {
        case QuantMode::uniform_fixed:
            return {steps[site][0], uniform_bits, spec.unsigned_range};
        case QuantMode::per_node_learned:
            return {steps[site][node], bits[site][node], spec.unsigned_range};
        case QuantMode::nns_bank: {
            require(assign != nullptr && !assign->empty(),
                    "node_param: nns mode needs an assignment");
            return banks[site].param((*assign)[node]);
        }
        default:
            throw error("node_param: fp32 table has no quantizers");
    }
}

ModelParams init_model(ModelKind kind, i32 in_dim, i32 hidden_dim, i32 out_dim,
                       bool use_bn, bool quantize_first_input, u64 seed) {
    require(in_dim > 0 && hidden_dim > 0 && out_dim > 0,
            "init_model: dimensions must be positive");
    ModelParams m;
    m.kind = kind;
    m.in_dim = in_dim;
    m.hidden_dim = hidden_dim;
    m.out_dim = out_dim;
    m.use_bn = kind == ModelKind::gin && use_bn;
    Rng rng(seed);

    const auto make_linear = [&rng](i32 fi, i32 fo) {
        LinearLayer lin;
        lin.w = Matrix(fi, fo);
        const double bound = 1.0 / std::sqrt(static_cast<double>(fi));
        for (double& v : lin.w.data) v = rng.uniform(-bound, bound);
        lin.bias.resize(fo);
        for (double& v : lin.bias) v = rng.uniform(-bound, bound);
        lin.w_step.resize(fo);
        return lin;
    };

    if (kind == ModelKind::gcn) {
        m.linears.push_back(make_linear(in_dim, hidden_dim));
        m.linears.push_back(make_linear(hidden_dim, out_dim));
    } else {
        m.linears.push_back(make_linear(in_dim, hidden_dim));
        m.linears.push_back(make_linear(hidden_dim, hidden_dim));
        m.linears.push_back(make_linear(hidden_dim, hidden_dim));
        m.linears.push_back(make_linear(hidden_dim, out_dim));
        m.gin_eps.assign(2, 0.0);
        if (m.use_bn) {
            m.bns.resize(2);
            for (BatchNorm& bn : m.bns) {
                bn.gamma.assign(hidden_dim, 1.0);
                bn.beta.assign(hidden_dim, 0.0);
                bn.running_mean.assign(hidden_dim, 0.0);
                bn.running_var.assign(hidden_dim, 1.0);
            }
        }
    }

    const auto draw_step = [&rng] {
        return std::max(rng.normal(0.01, 0.01), kStepMin);
    };
    for (LinearLayer& lin : m.linears)
        for (double& s : lin.w_step) s = draw_step();

    // Aggregation-input quantizer dims: the update output for GCN, the
    // layer input for GIN.
    m.agg_steps.resize(2);
    const i32 agg_dim0 = kind == ModelKind::gcn ? hidden_dim : in_dim;
    const i32 agg_dim1 = kind == ModelKind::gcn ? out_dim : hidden_dim;
    const bool first_agg = kind == ModelKind::gcn || quantize_first_input;
    if (first_agg) {
        m.agg_steps[0].resize(agg_dim0);
        for (double& s : m.agg_steps[0]) s = draw_step();
    }
    m.agg_steps[1].resize(agg_dim1);
    for (double& s : m.agg_steps[1]) s = draw_step();
    return m;
}

QuantTable init_quant_table(const ModelParams& model, i32 num_nodes,
                            const QuantTableOpts& opts,
                            const NodeFeatures* x0) {
    QuantTable qt;
    qt.mode = opts.mode;
    qt.uniform_bits = opts.uniform_bits;
    if (opts.mode == QuantMode::fp32) return qt;

    const auto data_non_negative = [x0] {
        if (!x0) return false;
        for (double v : x0->data)
            if (v < 0.0) return false;
        return true;
    };

    if (model.kind == ModelKind::gcn) {
        if (opts.quantize_first_input)
            qt.sites.push_back({model.in_dim, data_non_negative(), true});
        qt.sites.push_back({model.hidden_dim, true, false});
    } else {
        // H sites see raw aggregation output (any sign); the Z sites are
        // post-relu, but BN can shift them negative again.
        qt.sites.push_back({model.in_dim, false, false});
        qt.sites.push_back({model.hidden_dim, !model.use_bn, false});
        qt.sites.push_back({model.hidden_dim, false, false});
        qt.sites.push_back({model.hidden_dim, !model.use_bn, false});
    }

    Rng rng(opts.seed);
    const i32 nsites = qt.num_sites();
    if (opts.mode == QuantMode::nns_bank) {
        require(opts.nns_groups >= 1, "init_quant_table: nns_groups < 1");
        for (i32 s = 0; s < nsites; ++s)
            qt.banks.push_back(bank_init(opts.nns_groups, rng.next_u64(),
                                         qt.sites[s].unsigned_range));
    } else {
        const i32 per_site =
            opts.mode == QuantMode::uniform_fixed ? 1 : num_nodes;
        qt.steps.resize(nsites);
        qt.bits.resize(nsites);
        for (i32 s = 0; s < nsites; ++s) {
            qt.steps[s].resize(per_site);
            for (double& v : qt.steps[s])
                v = std::max(rng.normal(0.01, 0.01), kStepMin);
            const double b = opts.mode == QuantMode::uniform_fixed
                                 ? opts.uniform_bits
                                 : 4.0;
            qt.bits[s].assign(per_site,
                              clamp_bitwidth(b, qt.sites[s].unsigned_range));
        }
    }
    return qt;
}

// ============================================================================
// Forward
// ============================================================================

Matrix forward(ModelParams& model, const QuantTable& qt, const CsrGraph& g,
               const NormCoeffs& nc, const NodeFeatures& x0,
               const ForwardOpts& opts, Tape* tape) {
    require(static_cast<i64>(x0.rows) == g.num_nodes,
            "forward: feature rows do not match graph");
    require(static_cast<i32>(x0.cols) == model.in_dim,
            "forward: feature dim does not match model");
    const bool quant = qt.mode != QuantMode::fp32;
    Tape local;
    Tape& t = tape ? *tape : local;
    const i32 layers = model.num_layers();
    t.sites.assign(qt.sites.size(), {});
    t.aggq.assign(layers, {});
    t.wq.assign(model.linears.size(), {});
    t.relu_out.assign(layers, {});
    t.bn.assign(model.use_bn ? layers : 0, {});
    t.bn_out.assign(model.use_bn ? layers : 0, {});
    t.gin_h.assign(model.kind == ModelKind::gin ? layers : 0, {});
    t.layer_out.assign(layers, {});
    t.bn_training = opts.training;

    if (quant)
        for (std::size_t j = 0; j < model.linears.size(); ++j)
            weight_quant(model.linears[j], t.wq[j]);
    const auto wmat = [&](std::size_t j) -> const Matrix& {
        return quant ? t.wq[j].wq : model.linears[j].w;
    };

    const Matrix* cur = &x0;
    if (model.kind == ModelKind::gcn) {
        for (i32 l = 0; l < layers; ++l) {
            const i32 si =
                quant ? (qt.sites.front().first_input ? l : l - 1) : -1;
            const Matrix* xin = cur;
            if (si >= 0 && quant) {
                site_quant(qt, si, *cur, t.sites[si], opts.record_codes);
                xin = &t.sites[si].post;
            }
            Matrix b = matmul(*xin, wmat(l));
            Matrix bn_scaled;
            rowscale(b, nc.inv_sqrt_deg, bn_scaled);
            const Matrix* agg_in = &bn_scaled;
            if (quant) {
                col_quant(bn_scaled, model.agg_steps[l], t.aggq[l],
                          opts.record_codes);
                agg_in = &t.aggq[l].post;
            }
            Matrix summed = adj_row_sum(g, *agg_in);
            Matrix out;
            rowscale(summed, nc.inv_sqrt_deg, out);
            add_bias_rows(out, model.linears[l].bias);
            if (l + 1 < layers) {
                t.relu_out[l] = relu(out);
                t.layer_out[l] = t.relu_out[l];
                cur = &t.layer_out[l];
            } else {
                t.logits = std::move(out);
            }
        }
    } else {
        for (i32 l = 0; l < layers; ++l) {
            const Matrix* ain = cur;
            if (quant && !model.agg_steps[l].empty()) {
                col_quant(*cur, model.agg_steps[l], t.aggq[l],
                          opts.record_codes);
                ain = &t.aggq[l].post;
            }
            t.gin_h[l] = aggregate(g, *ain, AggregateMode::gin_sum, nullptr,
                                   model.gin_eps[l]);
            const i32 si_h = 2 * l, si_z = 2 * l + 1;
            const Matrix* hin = &t.gin_h[l];
            if (quant) {
                site_quant(qt, si_h, t.gin_h[l], t.sites[si_h],
                           opts.record_codes);
                hin = &t.sites[si_h].post;
            }
            Matrix u = matmul(*hin, wmat(2 * l));
            add_bias_rows(u, model.linears[2 * l].bias);
            t.relu_out[l] = relu(u);
            const Matrix* zin = &t.relu_out[l];
            if (model.use_bn) {
                bn_forward(model.bns[l], t.relu_out[l], opts.training,
                           t.bn[l], t.bn_out[l]);
                zin = &t.bn_out[l];
            }
            const Matrix* zq = zin;
            if (quant) {
                site_quant(qt, si_z, *zin, t.sites[si_z], opts.record_codes);
                zq = &t.sites[si_z].post;
            }
            Matrix out = matmul(*zq, wmat(2 * l + 1));
            add_bias_rows(out, model.linears[2 * l + 1].bias);
            if (l + 1 < layers) {
                t.layer_out[l] = std::move(out);
                cur = &t.layer_out[l];
            } else {
                t.logits = std::move(out);
            }
        }
    }
    return t.logits;
}

// ============================================================================
// Loss and metrics
// ============================================================================

NllResult nll_loss(const Matrix& logits, const std::vector<i32>& mask,
                   const std::vector<i32>& labels) {
    require(!mask.empty(), "nll_loss: empty mask");
    require(labels.size() == logits.rows, "nll_loss: label count mismatch");
    NllResult r;
    r.dlogits = Matrix(logits.rows, logits.cols, 0.0);
    const double inv = 1.0 / static_cast<double>(mask.size());
    for (i32 id : mask) {
        const i32 y = labels[id];
        require(y >= 0 && y < static_cast<i32>(logits.cols),
                "nll_loss: label out of range for node " + std::to_string(id));
        const double* row = logits.data.data() + id * logits.cols;
        double mx = row[0];
        for (std::size_t c = 1; c < logits.cols; ++c) mx = std::max(mx, row[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < logits.cols; ++c)
            z += std::exp(row[c] - mx);
        const double lse = mx + std::log(z);
        r.loss += (lse - row[y]) * inv;
        double* drow = r.dlogits.data.data() + id * logits.cols;
        for (std::size_t c = 0; c < logits.cols; ++c)
            drow[c] = std::exp(row[c] - lse) * inv;
        drow[y] -= inv;
    }
    return r;
}

double accuracy(const Matrix& logits, const std::vector<i32>& mask,
                const std::vector<i32>& labels) {
    require(!mask.empty(), "accuracy: empty mask");
    i64 hits = 0;
    for (i32 id : mask) {
        const double* row = logits.data.data() + id * logits.cols;
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.cols; ++c)
            if (row[c] > row[best]) best = c;
        if (static_cast<i32>(best) == labels[id]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(mask.size());
}

// ============================================================================
// Backward
// ============================================================================

namespace {

// Parameter gradients and STE input gradient for one per-node site.
// Global mode chains dL/dx_q into (step, bitwidth); local mode
// differentiates the site's own mean absolute error instead. The
// returned fraction counts rows of dpost that are exactly zero.
double site_backward(const QuantTable& qt, i32 si, const SiteTape& t,
                     const Matrix& dpost, GradMode gm, bool want_input_grad,
                     std::vector<double>& d_step_n,
                     std::vector<double>& d_bit_n, Matrix* dpre) {
    const std::size_t n = t.pre.rows, f = t.pre.cols;
    const bool uniform = qt.mode == QuantMode::uniform_fixed;
    const bool effective_global = uniform || gm == GradMode::global;
    d_step_n.assign(uniform ? 1 : n, 0.0);
    d_bit_n.assign(uniform ? 1 : n, 0.0);
    if (dpre && want_input_grad) {
        dpre->rows = n;
        dpre->cols = f;
        dpre->data.resize(n * f);
    }
    std::size_t zero_rows = 0;
    const bool have_dpost = dpost.rows == n;
    for (std::size_t i = 0; i < n; ++i) {
        const QuantParam p = qt.node_param(si, static_cast<i32>(i), &t.assign);
        const RowLevels lv = row_levels(p);
        const double* pre = t.pre.data.data() + i * f;
        const double* post = t.post.data.data() + i * f;
        const double* up =
            have_dpost ? dpost.data.data() + i * f : nullptr;
        double* dp = (dpre && want_input_grad)
                         ? dpre->data.data() + i * f
                         : nullptr;
        double acc_s = 0.0, acc_b = 0.0;
        bool row_zero = true;
        for (std::size_t j = 0; j < f; ++j) {
            const std::uint8_t sat = t.sat[i * f + j];
            const double x = pre[j];
            double g_s, g_b;
            if (sat) {
                const double sg = sign_of(x);
                g_s = sg * lv.max_code;
                g_b = sg * lv.dbit_factor;
            } else {
                g_s = (post[j] - x) / lv.step;
                g_b = 0.0;
            }
            if (effective_global) {
                const double u = up ? up[j] : 0.0;
                acc_s += u * g_s;
                acc_b += u * g_b;
            } else {
                const double sg_err = sign_of(post[j] - x);
                acc_s += sg_err * g_s;
                acc_b += sg_err * g_b;
            }
            if (up && up[j] != 0.0) row_zero = false;
            if (dp) dp[j] = std::abs(x) <= lv.threshold ? up[j] : 0.0;
        }
        if (!effective_global) {
            acc_s /= static_cast<double>(f);
            acc_b /= static_cast<double>(f);
        }
        if (uniform) {
            d_step_n[0] += acc_s;
        } else {
            d_step_n[i] = acc_s;
            d_bit_n[i] = acc_b;
        }
        if (up && row_zero) ++zero_rows;
    }
    return have_dpost ? static_cast<double>(zero_rows) /
                            static_cast<double>(n)
                      : -1.0;
}

// Per-column weight-style quantizer backward (4-bit signed): fills
// d_step per column and the STE-masked input gradient.
void colquant_backward(const Matrix& pre, const Matrix& post,
                       const std::vector<std::uint8_t>& sat,
                       const std::vector<double>& steps, const Matrix& dpost,
                       std::vector<double>& d_step, Matrix* dpre) {
    const std::size_t n = pre.rows, f = pre.cols;
    d_step.assign(f, 0.0);
    if (dpre) {
        dpre->rows = n;
        dpre->cols = f;
        dpre->data.resize(n * f);
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < f; ++j) {
            const double s = steps[j];
            const double x = pre.at(i, j);
            const double u = dpost.at(i, j);
            double g_s;
            if (sat[i * f + j]) {
                g_s = sign_of(x) * kWeightMaxCode;
            } else {
                g_s = (post.at(i, j) - x) / s;
            }
            d_step[j] += u * g_s;
            if (dpre)
                dpre->at(i, j) =
                    std::abs(x) <= s * kWeightMaxCode ? u : 0.0;
        }
}

Matrix relu_backward(const Matrix& relu_out, const Matrix& dout) {
    Matrix din = dout;
    for (std::size_t i = 0; i < din.data.size(); ++i)
        if (relu_out.data[i] <= 0.0) din.data[i] = 0.0;
    return din;
}

} // namespace

Grads backward(const ModelParams& model, const QuantTable& qt,
               const CsrGraph& g, const NormCoeffs& nc,
               const NodeFeatures& x0, const Tape& tape,
               const Matrix& dlogits, const BackwardOpts& opts) {
    const bool quant = qt.mode != QuantMode::fp32;
    const i32 layers = model.num_layers();
    Grads gr;
    gr.d_w.resize(model.linears.size());
    gr.d_bias.resize(model.linears.size());
    gr.d_w_step.resize(model.linears.size());
    gr.d_agg_step.resize(layers);
    gr.d_gin_eps.assign(model.gin_eps.size(), 0.0);
    gr.d_bn_gamma.resize(model.bns.size());
    gr.d_bn_beta.resize(model.bns.size());
    const i32 nsites = qt.num_sites();
    std::vector<std::vector<double>> step_n(nsites), bit_n(nsites);
    gr.site_zero_rows.assign(nsites, -1.0);

    // Input actually seen by linear j.
    const auto lin_in = [&](std::size_t j) -> const Matrix& {
        if (model.kind == ModelKind::gcn) {
            const i32 si =
                quant ? (qt.sites.front().first_input ? static_cast<i32>(j)
                                                      : static_cast<i32>(j) - 1)
                      : -1;
            if (si >= 0 && quant) return tape.sites[si].post;
            return j == 0 ? x0 : tape.relu_out[j - 1];
        }
        if (quant) return tape.sites[j].post;
        const i32 l = static_cast<i32>(j) / 2;
        if (j % 2 == 0) return tape.gin_h[l];
        return model.use_bn ? tape.bn_out[l] : tape.relu_out[l];
    };

    Matrix dcur = dlogits;
    if (model.kind == ModelKind::gcn) {
        for (i32 l = layers - 1; l >= 0; --l) {
            Matrix dout = l + 1 < layers
                              ? relu_backward(tape.relu_out[l], dcur)
                              : std::move(dcur);
            gr.d_bias[l] = colsum(dout);
            Matrix dsummed;
            rowscale(dout, nc.inv_sqrt_deg, dsummed);
            Matrix dagg_post = adj_row_sum(g, dsummed);
            Matrix dbn_scaled;
            if (quant) {
                colquant_backward(tape.aggq[l].pre, tape.aggq[l].post,
                                  tape.aggq[l].sat, model.agg_steps[l],
                                  dagg_post, gr.d_agg_step[l], &dbn_scaled);
            } else {
                dbn_scaled = std::move(dagg_post);
            }
            Matrix db;
            rowscale(dbn_scaled, nc.inv_sqrt_deg, db);
            gr.d_w[l] = matmul_at_b(lin_in(l), db);
            if (quant) {
                colquant_backward(model.linears[l].w, tape.wq[l].wq,
                                  tape.wq[l].sat, model.linears[l].w_step, gr.d_w[l],
                                  gr.d_w_step[l], nullptr);
                // STE mask on the weight gradient itself
                const std::size_t wn = model.linears[l].w.data.size();
                const std::size_t wc = model.linears[l].w.cols;
                for (std::size_t e = 0; e < wn; ++e) {
                    const double wv = model.linears[l].w.data[e];
                    const double thr =
                        model.linears[l].w_step[e % wc] * kWeightMaxCode;
                    if (std::abs(wv) > thr) gr.d_w[l].data[e] = 0.0;
                }
            }
            const i32 si = quant ? (qt.sites.front().first_input ? l : l - 1)
                                 : -1;
            const bool need_below =
                l > 0 ||
                (si >= 0 && opts.grad_mode == GradMode::global &&
                 opts.need_first_input_grad);
            if (!need_below) break;
            Matrix dxq = matmul_a_bt(db, quant ? tape.wq[l].wq
                                               : model.linears[l].w);
            if (si >= 0) {
                Matrix dpre;
                gr.site_zero_rows[si] = site_backward(
                    qt, si, tape.sites[si], dxq, opts.grad_mode, l > 0,
                    step_n[si], bit_n[si], &dpre);
                dcur = std::move(dpre);
            } else {
                dcur = std::move(dxq);
            }
        }
        // Local mode never chains into the first site; take its
        // parameter gradients straight from the tape.
        if (quant && qt.sites.front().first_input &&
            opts.grad_mode == GradMode::local) {
            Matrix none;
            site_backward(qt, 0, tape.sites[0], none, opts.grad_mode, false,
                          step_n[0], bit_n[0], nullptr);
        }
    } else {
        for (i32 l = layers - 1; l >= 0; --l) {
            const i32 j2 = 2 * l + 1, j1 = 2 * l;
            const i32 si_z = 2 * l + 1, si_h = 2 * l;
            Matrix dout = std::move(dcur);
            gr.d_bias[j2] = colsum(dout);
            gr.d_w[j2] = matmul_at_b(lin_in(j2), dout);
            Matrix dzq = matmul_a_bt(dout, quant ? tape.wq[j2].wq
                                                 : model.linears[j2].w);
            Matrix dz;
            if (quant) {
                Matrix dpre;
                gr.site_zero_rows[si_z] = site_backward(
                    qt, si_z, tape.sites[si_z], dzq, opts.grad_mode, true,
                    step_n[si_z], bit_n[si_z], &dpre);
                dz = std::move(dpre);
            } else {
                dz = std::move(dzq);
            }
            Matrix dr;
            if (model.use_bn) {
                bn_backward(model.bns[l], tape.bn[l], tape.bn_training, dz,
                            dr, gr.d_bn_gamma[l], gr.d_bn_beta[l]);
            } else {
                dr = std::move(dz);
            }
            Matrix du = relu_backward(tape.relu_out[l], dr);
            gr.d_bias[j1] = colsum(du);
            gr.d_w[j1] = matmul_at_b(lin_in(j1), du);
            Matrix dhq = matmul_a_bt(du, quant ? tape.wq[j1].wq
                                               : model.linears[j1].w);
            Matrix dh;
            if (quant) {
                Matrix dpre;
                gr.site_zero_rows[si_h] = site_backward(
                    qt, si_h, tape.sites[si_h], dhq, opts.grad_mode, true,
                    step_n[si_h], bit_n[si_h], &dpre);
                dh = std::move(dpre);
            } else {
                dh = std::move(dhq);
            }
            // d eps: the aggregation input that was actually summed.
            const Matrix& ain = tape.aggq[l].active
                                    ? tape.aggq[l].post
                                    : (l == 0 ? x0 : tape.layer_out[l - 1]);
            double deps = 0.0;
            for (std::size_t e = 0; e < dh.data.size(); ++e)
                deps += dh.data[e] * ain.data[e];
            gr.d_gin_eps[l] = deps;
            Matrix dain = aggregate(g, dh, AggregateMode::gin_sum, nullptr,
                                    model.gin_eps[l]);
            if (tape.aggq[l].active) {
                Matrix dpre;
                colquant_backward(tape.aggq[l].pre, tape.aggq[l].post,
                                  tape.aggq[l].sat, model.agg_steps[l], dain,
                                  gr.d_agg_step[l], l > 0 ? &dpre : nullptr);
                if (l > 0) dcur = std::move(dpre);
            } else if (l > 0) {
                dcur = std::move(dain);
            }
        }
        if (quant) {
            // Weight quantizer backward for all four linears.
            for (std::size_t j = 0; j < model.linears.size(); ++j) {
                colquant_backward(model.linears[j].w, tape.wq[j].wq,
                                  tape.wq[j].sat, model.linears[j].w_step,
                                  gr.d_w[j], gr.d_w_step[j], nullptr);
                const std::size_t wc = model.linears[j].w.cols;
                for (std::size_t e = 0; e < gr.d_w[j].data.size(); ++e) {
                    const double wv = model.linears[j].w.data[e];
                    const double thr =
                        model.linears[j].w_step[e % wc] * kWeightMaxCode;
                    if (std::abs(wv) > thr) gr.d_w[j].data[e] = 0.0;
                }
            }
        }
    }

    // Memory penalty on feature bitwidths.
    if (quant && opts.lambda > 0.0 && opts.m_target_kb > 0.0 &&
        (qt.mode == QuantMode::per_node_learned ||
         qt.mode == QuantMode::nns_bank)) {
        std::vector<Assignment> assigns;
        for (const SiteTape& st : tape.sites) assigns.push_back(st.assign);
        std::vector<std::vector<double>> bits;
        std::vector<double> dims;
        collect_feature_bits(qt, &assigns, bits, dims);
        const MemoryLoss ml = memory_loss(bits, dims, opts.m_target_kb);
        for (i32 s = 0; s < nsites; ++s)
            for (std::size_t i = 0; i < bit_n[s].size(); ++i)
                bit_n[s][i] += opts.lambda * ml.grads[s][i];
    }

    // Fold per-node site grads into their parameter layout.
    gr.d_site_step.resize(nsites);
    gr.d_site_bit.resize(nsites);
    for (i32 s = 0; s < nsites; ++s) {
        if (qt.mode == QuantMode::nns_bank) {
            const GroupGrads gg = accumulate_group_grads(
                tape.sites[s].assign, step_n[s], bit_n[s],
                qt.banks[s].groups());
            gr.d_site_step[s] = gg.d_step;
            gr.d_site_bit[s] = gg.d_bitwidth;
        } else {
            gr.d_site_step[s] = std::move(step_n[s]);
            gr.d_site_bit[s] = std::move(bit_n[s]);
        }
    }
    return gr;
}

double zero_grad_fraction(ModelParams& model, const QuantTable& qt,
                          const CsrGraph& g, const NormCoeffs& nc,
                          const NodeFeatures& x0, const DatasetSplit& split) {
    require(qt.mode != QuantMode::fp32,
            "zero_grad_fraction: needs quantization sites");
    Tape tape;
    forward(model, qt, g, nc, x0, {}, &tape);
    const NllResult nr = nll_loss(tape.logits, split.train, split.labels);
    BackwardOpts bo;
    bo.grad_mode = GradMode::global;
    const Grads gr = backward(model, qt, g, nc, x0, tape, nr.dlogits, bo);
    return gr.site_zero_rows.back();
}

// ============================================================================
// Reporting helpers
// ============================================================================

void collect_feature_bits(const QuantTable& qt,
                          const std::vector<Assignment>* assigns,
                          std::vector<std::vector<double>>& bits,
                          std::vector<double>& dims) {
    bits.clear();
    dims.clear();
    for (i32 s = 0; s < qt.num_sites(); ++s) {
        dims.push_back(static_cast<double>(qt.sites[s].dim));
        if (qt.mode == QuantMode::per_node_learned) {
            bits.push_back(qt.bits[s]);
        } else if (qt.mode == QuantMode::nns_bank) {
            require(assigns && s < static_cast<i32>(assigns->size()) &&
                        !(*assigns)[s].empty(),
                    "collect_feature_bits: nns mode needs assignments");
            std::vector<double> b((*assigns)[s].size());
            for (std::size_t i = 0; i < b.size(); ++i)
                b[i] = qt.banks[s].bitwidths[(*assigns)[s][i]];
            bits.push_back(std::move(b));
        } else {
            throw error("collect_feature_bits: mode has no per-node bits");
        }
    }
}

double avg_bits(const QuantTable& qt, bool count_first_input,
                const std::vector<Assignment>* assigns) {
    if (qt.mode == QuantMode::fp32) return 32.0;
    double num = 0.0, den = 0.0;
    for (i32 s = 0; s < qt.num_sites(); ++s) {
        if (!count_first_input && qt.sites[s].first_input) continue;
        const double dim = static_cast<double>(qt.sites[s].dim);
        if (qt.mode == QuantMode::uniform_fixed) {
            num += dim * round_half_away(qt.uniform_bits);
            den += dim;
            continue;
        }
        if (qt.mode == QuantMode::per_node_learned) {
            for (double b : qt.bits[s]) num += dim * round_half_away(b);
            den += dim * static_cast<double>(qt.bits[s].size());
        } else {
            require(assigns && s < static_cast<i32>(assigns->size()) &&
                        !(*assigns)[s].empty(),
                    "avg_bits: nns mode needs assignments");
            for (i32 grp : (*assigns)[s])
                num += dim * round_half_away(qt.banks[s].bitwidths[grp]);
            den += dim * static_cast<double>((*assigns)[s].size());
        }
    }
    require(den > 0.0, "avg_bits: no sites counted");
    return num / den;
}

// ============================================================================
// Training
// ============================================================================

namespace {

enum class PGroup { weights, steps, bits };

struct Slot {
    double* p = nullptr;
    const double* g = nullptr;
    std::size_t n = 0;
    PGroup grp = PGroup::weights;
    bool decay = false;
    double bit_lo = 0.0; // bits group: lower clamp (signedness-dependent)
};

// Fixed walk over every trainable tensor; gradients (when given) are
// visited in the same order.
std::vector<Slot> make_slots(ModelParams& m, QuantTable& qt, Grads* gr) {
    std::vector<Slot> out;
    const auto push = [&out](double* p, std::size_t n, PGroup grp, bool decay,
                             const double* g, double bit_lo = 0.0) {
        out.push_back({p, g, n, grp, decay, bit_lo});
    };
    for (std::size_t j = 0; j < m.linears.size(); ++j) {
        push(m.linears[j].w.data.data(), m.linears[j].w.data.size(),
             PGroup::weights, true, gr ? gr->d_w[j].data.data() : nullptr);
        push(m.linears[j].bias.data(), m.linears[j].bias.size(),
             PGroup::weights, false, gr ? gr->d_bias[j].data() : nullptr);
    }
    if (!m.gin_eps.empty())
        push(m.gin_eps.data(), m.gin_eps.size(), PGroup::weights, false,
             gr ? gr->d_gin_eps.data() : nullptr);
    for (std::size_t l = 0; l < m.bns.size(); ++l) {
        push(m.bns[l].gamma.data(), m.bns[l].gamma.size(), PGroup::weights,
             false, gr ? gr->d_bn_gamma[l].data() : nullptr);
        push(m.bns[l].beta.data(), m.bns[l].beta.size(), PGroup::weights,
             false, gr ? gr->d_bn_beta[l].data() : nullptr);
    }
    if (qt.mode == QuantMode::fp32) return out;
    for (std::size_t j = 0; j < m.linears.size(); ++j)
        push(m.linears[j].w_step.data(), m.linears[j].w_step.size(),
             PGroup::steps, false, gr ? gr->d_w_step[j].data() : nullptr);
    for (std::size_t l = 0; l < m.agg_steps.size(); ++l) {
        if (m.agg_steps[l].empty()) continue;
        push(m.agg_steps[l].data(), m.agg_steps[l].size(), PGroup::steps,
             false, gr ? gr->d_agg_step[l].data() : nullptr);
    }
    for (i32 s = 0; s < qt.num_sites(); ++s) {
        const double lo = bit_min(qt.sites[s].unsigned_range);
        if (qt.mode == QuantMode::nns_bank) {
            push(qt.banks[s].steps.data(), qt.banks[s].steps.size(),
                 PGroup::steps, false,
                 gr ? gr->d_site_step[s].data() : nullptr);
            push(qt.banks[s].bitwidths.data(), qt.banks[s].bitwidths.size(),
                 PGroup::bits, false, gr ? gr->d_site_bit[s].data() : nullptr,
                 lo);
        } else {
            push(qt.steps[s].data(), qt.steps[s].size(), PGroup::steps, false,
                 gr ? gr->d_site_step[s].data() : nullptr);
            if (qt.mode == QuantMode::per_node_learned)
                push(qt.bits[s].data(), qt.bits[s].size(), PGroup::bits,
                     false, gr ? gr->d_site_bit[s].data() : nullptr, lo);
        }
    }
    return out;
}

} // namespace

TrainResult train(ModelParams& model, QuantTable& qt, const Dataset& data,
                  const TrainConfig& cfg) {
    require(cfg.epochs >= 1, "train: epochs must be positive");
    const NormCoeffs nc = norm_coeffs(data.graph);
    TrainResult res;

    std::vector<AdamState> states;
    {
        const auto slots = make_slots(model, qt, nullptr);
        states.resize(slots.size());
        for (std::size_t i = 0; i < slots.size(); ++i)
            states[i].resize(slots[i].n);
    }
    const bool has_bits = qt.mode == QuantMode::per_node_learned ||
                          qt.mode == QuantMode::nns_bank;
    const bool penalty =
        has_bits && cfg.lambda > 0.0 && cfg.m_target_kb > 0.0;

    Tape tape;
    for (i32 epoch = 0; epoch < cfg.epochs; ++epoch) {
        ForwardOpts fo;
        fo.training = true;
        forward(model, qt, data.graph, nc, data.features, fo, &tape);
        const NllResult nr =
            nll_loss(tape.logits, data.split.train, data.split.labels);

        double mem_kb = 0.0, mem_loss_v = 0.0;
        if (penalty) {
            std::vector<Assignment> assigns;
            for (const SiteTape& st : tape.sites)
                assigns.push_back(st.assign);
            std::vector<std::vector<double>> bits;
            std::vector<double> dims;
            collect_feature_bits(qt, &assigns, bits, dims);
            const MemoryLoss ml = memory_loss(bits, dims, cfg.m_target_kb);
            mem_kb = ml.current_kb;
            mem_loss_v = ml.loss;
        }

        BackwardOpts bo;
        bo.grad_mode = cfg.grad_mode;
        bo.lambda = penalty ? cfg.lambda : 0.0;
        bo.m_target_kb = penalty ? cfg.m_target_kb : 0.0;
        bo.need_first_input_grad = cfg.grad_mode == GradMode::global;
        Grads gr = backward(model, qt, data.graph, nc, data.features, tape,
                            nr.dlogits, bo);

        auto slots = make_slots(model, qt, &gr);
        for (std::size_t i = 0; i < slots.size(); ++i) {
            AdamConfig ac;
            ac.lr = slots[i].grp == PGroup::weights  ? cfg.lr_weights
                    : slots[i].grp == PGroup::steps ? cfg.lr_step
                                                    : cfg.lr_bit;
            ac.weight_decay = slots[i].decay ? cfg.weight_decay : 0.0;
            adam_step({slots[i].p, slots[i].n}, {slots[i].g, slots[i].n},
                      states[i], ac);
            if (slots[i].grp == PGroup::steps)
                for (std::size_t k = 0; k < slots[i].n; ++k)
                    slots[i].p[k] = clamp_step(slots[i].p[k]);
            if (slots[i].grp == PGroup::bits)
                for (std::size_t k = 0; k < slots[i].n; ++k) {
                    double b = slots[i].p[k];
                    if (b < slots[i].bit_lo) b = slots[i].bit_lo;
                    if (b > kBitMax) b = kBitMax;
                    slots[i].p[k] = b;
                }
        }
        if (qt.mode == QuantMode::nns_bank)
            for (ParamBank& bank : qt.banks) bank_refresh(bank);

        if (cfg.record_history) {
            EpochStats st;
            st.epoch = epoch;
            st.task_loss = nr.loss;
            st.memory_kb = mem_kb;
            st.loss = nr.loss + cfg.lambda * mem_loss_v;
            st.val_acc = data.split.val.empty()
                             ? 0.0
                             : accuracy(tape.logits, data.split.val,
                                        data.split.labels);
            std::vector<Assignment> assigns;
            for (const SiteTape& stp : tape.sites)
                assigns.push_back(stp.assign);
            st.avg_bits = qt.mode == QuantMode::fp32
                              ? 32.0
                              : avg_bits(qt, true, &assigns);
            res.history.push_back(st);
        }
    }

    // Final metrics from a clean evaluation pass.
    Tape eval_tape;
    forward(model, qt, data.graph, nc, data.features, {}, &eval_tape);
    res.final_train_acc =
        accuracy(eval_tape.logits, data.split.train, data.split.labels);
    if (!data.split.val.empty())
        res.final_val_acc =
            accuracy(eval_tape.logits, data.split.val, data.split.labels);
    if (!data.split.test.empty())
        res.final_test_acc =
            accuracy(eval_tape.logits, data.split.test, data.split.labels);
    for (const SiteTape& st : eval_tape.sites)
        res.final_assign.push_back(st.assign);
    res.avg_bits = qt.mode == QuantMode::fp32
                       ? 32.0
                       : avg_bits(qt, true, &res.final_assign);
    return res;
}

} // namespace a2q
