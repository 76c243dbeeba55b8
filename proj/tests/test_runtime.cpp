#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "a2q/runtime.hpp"
#include "a2q/rng.hpp"

using namespace a2q;

namespace {

FixedMatrix fixed_rows(std::size_t r, std::size_t c, std::vector<i64> codes,
                       std::vector<double> row_scales,
                       std::vector<i32> row_bits = {},
                       bool unsigned_range = false) {
    FixedMatrix m;
    m.rows = r;
    m.cols = c;
    m.codes = std::move(codes);
    m.row_scales = std::move(row_scales);
    m.row_bits = std::move(row_bits);
    m.unsigned_range = unsigned_range;
    return m;
}

FixedMatrix fixed_cols(std::size_t r, std::size_t c, std::vector<i64> codes,
                       std::vector<double> col_scales) {
    FixedMatrix m;
    m.rows = r;
    m.cols = c;
    m.codes = std::move(codes);
    m.col_scales = std::move(col_scales);
    return m;
}

i64 quant_code(double v, const QuantParam& p) {
    std::vector<double> x = {v};
    return quantize(x, p).codes[0];
}

} // namespace

// ============================================================================
// FixedMatrix basics
// ============================================================================

TEST_CASE("dequant is scale times code exactly") {
    const FixedMatrix r =
        fixed_rows(2, 2, {1, -2, 3, -4}, {0.5, 0.25}, {4, 4});
    const Matrix rv = r.dequant();
    CHECK(rv.at(0, 0) == 0.5);
    CHECK(rv.at(0, 1) == -1.0);
    CHECK(rv.at(1, 0) == 0.75);
    CHECK(rv.at(1, 1) == -1.0);

    const FixedMatrix c = fixed_cols(2, 2, {1, -2, 3, -4}, {0.5, 0.25});
    const Matrix cv = c.dequant();
    CHECK(cv.at(0, 0) == 0.5);
    CHECK(cv.at(0, 1) == -0.5);
    CHECK(cv.at(1, 0) == 1.5);
    CHECK(cv.at(1, 1) == -1.0);
}

TEST_CASE("validate enforces the tagged code ranges") {
    CHECK_NOTHROW(fixed_rows(1, 2, {7, -7}, {0.1}, {4}).validate());
    CHECK_THROWS_AS(fixed_rows(1, 2, {8, 0}, {0.1}, {4}).validate(), error);
    CHECK_THROWS_AS(fixed_rows(1, 1, {-1}, {0.1}, {4}, true).validate(),
                    error);
    CHECK_NOTHROW(fixed_rows(1, 1, {15}, {0.1}, {4}, true).validate());
    CHECK_THROWS_AS(fixed_rows(1, 1, {16}, {0.1}, {4}, true).validate(),
                    error);
    // Empty row_bits means the 4-bit signed weight convention.
    CHECK_NOTHROW(fixed_cols(1, 1, {7}, {0.1}).validate());
    CHECK_THROWS_AS(fixed_cols(1, 1, {8}, {0.1}).validate(), error);
}

// ============================================================================
// fuse_update
// ============================================================================

TEST_CASE("fused update reproduces the hand-worked 2x2 chain") {
    const FixedMatrix x =
        fixed_rows(2, 2, {3, 0, 0, -7}, {0.1, 0.1}, {4, 4});
    const FixedMatrix w = fixed_cols(2, 1, {1, 1}, {0.5});
    RequantSpec next;
    next.per_row = true;
    next.steps = {0.05, 0.05};
    next.bits = {4.0, 4.0};
    const FixedMatrix out = fuse_update(x, w, next);
    REQUIRE(out.rows == 2);
    REQUIRE(out.cols == 1);
    CHECK(out.at(0, 0) == 3);  // 0.1*0.5*3  = 0.15  -> 0.15/0.05
    CHECK(out.at(1, 0) == -7); // 0.1*0.5*-7 = -0.35 -> -0.35/0.05
    CHECK(out.row_scales == std::vector<double>{0.05, 0.05});
    CHECK(out.row_bits == std::vector<i32>{4, 4});
}

TEST_CASE("identity weights with unit scales pass codes through") {
    Rng rng(3);
    const std::size_t n = 5;
    std::vector<i64> codes(n * n);
    for (i64& c : codes)
        c = static_cast<i64>(rng.uniform_index(15)) - 7;
    const FixedMatrix x =
        fixed_rows(n, n, codes, std::vector<double>(n, 1.0),
                   std::vector<i32>(n, 4));
    std::vector<i64> eye(n * n, 0);
    for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1;
    const FixedMatrix w = fixed_cols(n, n, eye, std::vector<double>(n, 1.0));
    RequantSpec next;
    next.steps.assign(n, 1.0);
    next.bits.assign(n, 8.0);
    const FixedMatrix out = fuse_update(x, w, next);
    CHECK(out.codes == x.codes);
}

TEST_CASE("fused update matches the float-path oracle") {
    Rng rng(17);
    for (int t = 0; t < 50; ++t) {
        const std::size_t n = 8, k = 8, m = 8;
        FixedMatrix x;
        x.rows = n;
        x.cols = k;
        x.codes.resize(n * k);
        for (i64& c : x.codes)
            c = static_cast<i64>(rng.uniform_index(15)) - 7;
        x.row_scales.resize(n);
        for (double& s : x.row_scales) s = rng.uniform(0.02, 0.3);
        x.row_bits.assign(n, 4);

        FixedMatrix w;
        w.rows = k;
        w.cols = m;
        w.codes.resize(k * m);
        for (i64& c : w.codes)
            c = static_cast<i64>(rng.uniform_index(15)) - 7;
        w.col_scales.resize(m);
        for (double& s : w.col_scales) s = rng.uniform(0.02, 0.3);

        const bool per_row = t % 2 == 0;
        RequantSpec next;
        next.per_row = per_row;
        if (per_row) {
            next.steps.resize(n);
            next.bits.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                next.steps[i] = rng.uniform(0.05, 0.5);
                next.bits[i] = 2.0 + static_cast<double>(rng.uniform_index(7));
            }
            next.unsigned_range = false;
        } else {
            next.steps.resize(m);
            for (double& s : next.steps) s = rng.uniform(0.05, 0.5);
        }

        const FixedMatrix got = fuse_update(x, w, next);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
                double dot = 0.0;
                for (std::size_t c = 0; c < k; ++c)
                    dot += static_cast<double>(x.at(i, c)) *
                           static_cast<double>(w.at(c, j));
                const double value = x.row_scales[i] * w.col_scales[j] * dot;
                const QuantParam p =
                    per_row
                        ? QuantParam{next.steps[i], next.bits[i], false}
                        : QuantParam{next.steps[j], kWeightBits, false};
                CHECK(got.at(i, j) == quant_code(value, p));
            }
    }
}

TEST_CASE("fused update rejects mismatched shapes") {
    const FixedMatrix x = fixed_rows(2, 3, {1, 2, 3, 4, 5, 6}, {1.0, 1.0});
    const FixedMatrix w = fixed_cols(2, 2, {1, 0, 0, 1}, {1.0, 1.0});
    RequantSpec next;
    next.steps = {1.0, 1.0};
    next.bits = {8.0, 8.0};
    CHECK_THROWS_AS((void)fuse_update(x, w, next), error);
}

// ============================================================================
// int_aggregate
// ============================================================================

TEST_CASE("identity adjacency with unit norms passes codes through") {
    const CsrGraph g = csr_from_edges(3, {});
    const FixedMatrix b =
        fixed_cols(3, 2, {3, -1, 0, 5, -7, 2}, {1.0, 1.0});
    RequantSpec next;
    next.steps.assign(3, 1.0);
    next.bits.assign(3, 8.0);
    const FixedMatrix out =
        int_aggregate(g, b, std::vector<double>(3, 1.0), next);
    CHECK(out.codes == b.codes);
}

TEST_CASE("aggregation matches the dense float oracle on a 3-node path") {
    const CsrGraph g = csr_from_edges(3, {{0, 1}, {1, 2}});
    const FixedMatrix b =
        fixed_cols(3, 2, {1, -2, 3, 4, -5, 6}, {0.1, 0.2});
    const std::vector<double> fused_norm = {0.5, 0.25, 1.0};
    RequantSpec next;
    next.steps = {0.05, 0.1, 0.2};
    next.bits = {4.0, 4.0, 4.0};
    const FixedMatrix out = int_aggregate(g, b, fused_norm, next);

    for (i32 i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            i64 sum = 0;
            for (i64 e = g.row_ptr[i]; e < g.row_ptr[i + 1]; ++e)
                sum += b.at(g.col_idx[e], j);
            const double value = fused_norm[i] * b.col_scales[j] *
                                 static_cast<double>(sum);
            const QuantParam p{next.steps[i], next.bits[i], false};
            CHECK(out.at(i, j) == quant_code(value, p));
        }
    // Anchor one hand value: row 0 sums codes of nodes {0,1}.
    CHECK(out.at(0, 0) == 4); // 0.5*0.1*(1+3)=0.2 -> 0.2/0.05
}

TEST_CASE("dense aggregation returns plain values") {
    const CsrGraph g = csr_from_edges(3, {{0, 1}});
    const FixedMatrix b = fixed_cols(3, 1, {2, 4, -6}, {0.5});
    const Matrix v =
        int_aggregate_values(g, b, std::vector<double>{1.0, 0.5, 2.0});
    CHECK(v.at(0, 0) == 1.0 * 0.5 * 6.0);
    CHECK(v.at(1, 0) == 0.5 * 0.5 * 6.0);
    // Isolated beyond the self-loop: own contribution only.
    CHECK(v.at(2, 0) == 2.0 * 0.5 * -6.0);
}

// ============================================================================
// BN merging and folding
// ============================================================================

TEST_CASE("merge_bn folds frozen statistics into an affine pair") {
    BatchNorm bn;
    bn.gamma = {2.0, 1.0};
    bn.beta = {0.5, -1.0};
    bn.running_mean = {1.0, -2.0};
    bn.running_var = {4.0, 0.25};
    bn.eps = 0.0;
    const FusedAffine a = merge_bn(bn);
    CHECK(a.mult[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(a.offset[0] == doctest::Approx(0.5 - 1.0).epsilon(1e-12));
    CHECK(a.mult[1] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(a.offset[1] == doctest::Approx(-1.0 + 4.0).epsilon(1e-12));
}

TEST_CASE("fold_bn divides the affine pair by the next step") {
    const FusedAffine a = fold_bn({2.0}, {0.1}, 0.05);
    CHECK(a.mult[0] == doctest::Approx(40.0).epsilon(1e-12));
    CHECK(a.offset[0] == doctest::Approx(2.0).epsilon(1e-12));

    // Identity BN reduces to plain re-quantization.
    const FusedAffine id = fold_bn({1.0}, {0.0}, 0.05);
    CHECK(id.mult[0] == 1.0 / 0.05);
    CHECK(id.offset[0] == 0.0);

    CHECK_THROWS_AS((void)fold_bn({1.0}, {0.0}, 0.0), error);
    CHECK_THROWS_AS((void)fold_bn({1.0}, {0.0}, {0.05, 0.1}), error);
}

// ============================================================================
// Whole-network equivalence with the float path
// ============================================================================

namespace {

struct EquivCase {
    ModelKind kind;
    QuantMode mode;
    bool qfi;
    bool use_bn;
    i32 n;
    u64 seed;
};

void check_equivalence(const EquivCase& c) {
    CAPTURE(c.seed);
    const CsrGraph g = synth_powerlaw(c.n, 2.5, c.seed);
    const NormCoeffs nc = norm_coeffs(g);
    Rng rng(c.seed * 7 + 1);
    const i32 in = 5, hidden = 6, out = 4;

    Matrix x(c.n, in);
    if (c.qfi)
        for (double& v : x.data) v = rng.uniform(-1.0, 1.0);
    else
        for (double& v : x.data)
            v = static_cast<double>(rng.uniform_index(4));

    ModelParams model =
        init_model(c.kind, in, hidden, out, c.use_bn, c.qfi, c.seed + 2);
    for (std::vector<double>& col : model.agg_steps)
        for (double& s : col) s = rng.uniform(0.01, 0.08);
    for (LinearLayer& lin : model.linears)
        for (double& s : lin.w_step) s = rng.uniform(0.02, 0.1);
    for (BatchNorm& bn : model.bns) {
        for (double& v : bn.gamma) v = rng.uniform(0.5, 1.5);
        for (double& v : bn.beta) v = rng.uniform(-0.3, 0.3);
        for (double& v : bn.running_mean) v = rng.uniform(-0.5, 0.5);
        for (double& v : bn.running_var) v = rng.uniform(0.5, 2.0);
    }

    QuantTableOpts qo;
    qo.mode = c.mode;
    qo.quantize_first_input = c.qfi;
    qo.nns_groups = 12;
    qo.seed = c.seed + 3;
    QuantTable qt = init_quant_table(model, c.n, qo, &x);
    if (c.mode == QuantMode::per_node_learned) {
        for (i32 s = 0; s < qt.num_sites(); ++s)
            for (i32 i = 0; i < c.n; ++i) {
                qt.steps[s][i] = rng.uniform(0.02, 0.2);
                qt.bits[s][i] = rng.uniform(2.0, 8.0);
            }
    } else if (c.mode == QuantMode::uniform_fixed) {
        for (i32 s = 0; s < qt.num_sites(); ++s)
            qt.steps[s][0] = rng.uniform(0.02, 0.1);
    }

    ForwardOpts fo;
    fo.record_codes = true;
    Tape tape;
    const Matrix lf = forward(model, qt, g, nc, x, fo, &tape);
    const IntForwardResult ir = int_forward(model, qt, g, nc, x);

    REQUIRE(ir.logits.same_shape(lf));
    for (std::size_t i = 0; i < lf.rows; ++i) {
        for (std::size_t j = 0; j < lf.cols; ++j) {
            const double a = lf.at(i, j), b = ir.logits.at(i, j);
            const double rel =
                std::abs(a - b) / std::max({1e-3, std::abs(a), std::abs(b)});
            CHECK(rel < 1e-4);
        }
        const auto fr = lf.row(i);
        const auto irow = ir.logits.row(i);
        CHECK(std::max_element(fr.begin(), fr.end()) - fr.begin() ==
              std::max_element(irow.begin(), irow.end()) - irow.begin());
    }

    REQUIRE(ir.site_codes.size() == static_cast<std::size_t>(qt.num_sites()));
    for (i32 s = 0; s < qt.num_sites(); ++s) {
        REQUIRE(tape.sites[s].active);
        CHECK(ir.site_codes[s] == tape.sites[s].codes);
        if (c.mode == QuantMode::nns_bank)
            CHECK(ir.assigns[s] == tape.sites[s].assign);
    }
    REQUIRE(ir.agg_codes.size() == tape.aggq.size());
    for (std::size_t l = 0; l < ir.agg_codes.size(); ++l) {
        CHECK(tape.aggq[l].active == !ir.agg_codes[l].empty());
        if (tape.aggq[l].active)
            CHECK(ir.agg_codes[l] == tape.aggq[l].codes);
    }
}

} // namespace

TEST_CASE("integer forward matches the float path per mode and model") {
    check_equivalence({ModelKind::gcn, QuantMode::per_node_learned, true,
                       false, 50, 101});
    check_equivalence({ModelKind::gcn, QuantMode::per_node_learned, false,
                       false, 30, 102});
    check_equivalence(
        {ModelKind::gcn, QuantMode::uniform_fixed, true, false, 25, 103});
    check_equivalence(
        {ModelKind::gcn, QuantMode::nns_bank, true, false, 40, 104});
    check_equivalence({ModelKind::gin, QuantMode::per_node_learned, true,
                       false, 30, 105});
    check_equivalence({ModelKind::gin, QuantMode::per_node_learned, false,
                       true, 8, 106});
    check_equivalence(
        {ModelKind::gin, QuantMode::uniform_fixed, true, true, 20, 107});
    check_equivalence(
        {ModelKind::gin, QuantMode::nns_bank, false, false, 30, 108});
}

TEST_CASE("uniform mode equals per-node mode with equal parameters") {
    const CsrGraph g = synth_powerlaw(20, 2.5, 5);
    const NormCoeffs nc = norm_coeffs(g);
    Rng rng(6);
    Matrix x(20, 5);
    for (double& v : x.data) v = rng.uniform(-1.0, 1.0);
    ModelParams model = init_model(ModelKind::gcn, 5, 6, 3, false, true, 7);

    QuantTableOpts qo;
    qo.mode = QuantMode::uniform_fixed;
    qo.quantize_first_input = true;
    qo.uniform_bits = 4.0;
    QuantTable uni = init_quant_table(model, 20, qo, &x);
    for (i32 s = 0; s < uni.num_sites(); ++s) uni.steps[s][0] = 0.05;

    qo.mode = QuantMode::per_node_learned;
    QuantTable per = init_quant_table(model, 20, qo, &x);
    for (i32 s = 0; s < per.num_sites(); ++s) {
        per.steps[s].assign(20, 0.05);
        per.bits[s].assign(20, 4.0);
    }

    const IntForwardResult a = int_forward(model, uni, g, nc, x);
    const IntForwardResult b = int_forward(model, per, g, nc, x);
    CHECK(a.logits.data == b.logits.data);
    for (i32 s = 0; s < uni.num_sites(); ++s)
        CHECK(a.site_codes[s] == b.site_codes[s]);
}

TEST_CASE("integer forward refuses fp32 tables and raw float inputs") {
    const CsrGraph g = csr_from_edges(4, {{0, 1}, {2, 3}});
    const NormCoeffs nc = norm_coeffs(g);
    Matrix x(4, 3, 0.5); // not integral
    ModelParams model = init_model(ModelKind::gcn, 3, 4, 2, false, false, 1);

    QuantTableOpts qo;
    qo.mode = QuantMode::fp32;
    const QuantTable qf = init_quant_table(model, 4, qo, &x);
    CHECK_THROWS_AS((void)int_forward(model, qf, g, nc, x), error);

    qo.mode = QuantMode::per_node_learned;
    const QuantTable qp = init_quant_table(model, 4, qo, &x);
    // No first-input quantizer, so the raw input must be integral.
    CHECK_THROWS_AS((void)int_forward(model, qp, g, nc, x), error);
    Matrix xi(4, 3, 2.0);
    CHECK_NOTHROW((void)int_forward(model, qp, g, nc, xi));
}

// ============================================================================
// Operation counts
// ============================================================================

TEST_CASE("op counts follow the closed forms") {
    const CsrGraph g = synth_powerlaw(2708, 2.5, 1);
    ModelParams gcn =
        init_model(ModelKind::gcn, 1433, 16, 7, false, false, 1);
    QuantTableOpts qo;
    qo.mode = QuantMode::per_node_learned;
    Matrix x0(1, 1433); // signedness probe only
    const QuantTable qt = init_quant_table(gcn, 2708, qo, &x0);

    const OpCounts oc = op_counts(gcn, qt, g);
    CHECK(oc.int_update == 2708.0 * 1433 * 16 + 2708.0 * 16 * 7);
    const double nnz = static_cast<double>(g.nnz());
    CHECK(oc.int_aggregate == nnz * 16 + nnz * 7);
    CHECK(oc.float_elemwise == 2.0 * 2708 * 16 + 2.0 * 2708 * 7);
    CHECK(oc.float_nns == 0.0);
    // Elementwise float work is a tiny fraction of the integer MACs.
    CHECK(oc.float_total() / oc.int_total() < 0.02);
}

TEST_CASE("GIN op counts include the MLP and skip self-loops") {
    const CsrGraph g = csr_from_edges(7, {{0, 1}, {1, 2}, {2, 3}, {4, 5}});
    ModelParams gin = init_model(ModelKind::gin, 5, 6, 3, false, false, 2);
    QuantTableOpts qo;
    qo.mode = QuantMode::nns_bank;
    qo.nns_groups = 10;
    Matrix x0(7, 5, 0.5);
    const QuantTable qt = init_quant_table(gin, 7, qo, &x0);

    const OpCounts oc = op_counts(gin, qt, g);
    const double n = 7;
    CHECK(oc.int_update == n * (5 * 6 + 6 * 6 + 6 * 6 + 6 * 3));
    const double nnz_n = static_cast<double>(g.nnz_without_self_loops());
    CHECK(oc.int_aggregate == nnz_n * 5 + nnz_n * 6);
    CHECK(oc.float_elemwise ==
          (2 * n * 5 + n * 6 + n * 6) + (2 * n * 6 + n * 6 + n * 3));
    // ceil(log2 10) = 4 compares per node per site.
    CHECK(oc.float_nns == n * 4 * qt.num_sites());
}

TEST_CASE("a single isolated node still pays the update") {
    const CsrGraph g = csr_from_edges(1, {});
    ModelParams gcn = init_model(ModelKind::gcn, 4, 5, 3, false, false, 3);
    QuantTable qt;
    qt.mode = QuantMode::per_node_learned;
    const OpCounts oc = op_counts(gcn, qt, g);
    // One row through both matmuls, one self-loop edge, scale plus bias.
    CHECK(oc.int_update == 4 * 5 + 5 * 3);
    CHECK(oc.int_aggregate == 5 + 3);
    CHECK(oc.float_elemwise == 2 * 5 + 2 * 3);
    CHECK(oc.float_nns == 0.0);
}
