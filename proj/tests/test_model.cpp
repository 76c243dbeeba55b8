#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "a2q/model.hpp"
#include "a2q/rng.hpp"

using namespace a2q;

namespace {

// Relative closeness with an absolute floor for near-zero pairs.
void check_close(double analytic, double fd, double rel_tol = 1e-4,
                 double abs_floor = 1e-7) {
    const double scale = std::max(std::abs(analytic), std::abs(fd));
    if (scale < abs_floor) {
        CHECK(std::abs(analytic - fd) <= abs_floor);
        return;
    }
    INFO("analytic=", analytic, " fd=", fd);
    CHECK(std::abs(analytic - fd) / scale < rel_tol);
}

// Connected 6-node graph used by the gradient checks.
CsrGraph six_nodes() {
    return csr_from_edges(
        6, {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {0, 2}, {1, 3}});
}

Dataset six_node_dataset(i32 feat_dim, i32 classes, u64 seed) {
    Dataset d;
    d.graph = six_nodes();
    d.features = Matrix(6, feat_dim);
    Rng rng(seed);
    for (double& v : d.features.data) v = rng.uniform(-1.0, 1.0);
    d.split.labels.resize(6);
    for (i32 i = 0; i < 6; ++i)
        d.split.labels[i] = static_cast<i32>(rng.uniform_index(classes));
    d.split.train = {0, 2, 4, 5};
    d.split.val = {1};
    d.split.test = {3};
    d.split.num_classes = classes;
    return d;
}

// Task loss of a fresh forward; the model is copied because training
// forwards update BN running statistics.
double task_loss(const ModelParams& model, const QuantTable& qt,
                 const Dataset& d, const NormCoeffs& nc) {
    ModelParams m = model;
    ForwardOpts fo;
    fo.training = true;
    Tape tape;
    const Matrix logits = forward(m, qt, d.graph, nc, d.features, fo, &tape);
    return nll_loss(logits, d.split.train, d.split.labels).loss;
}

double total_loss(const ModelParams& model, const QuantTable& qt,
                  const Dataset& d, const NormCoeffs& nc, double lambda,
                  double m_target_kb) {
    double loss = task_loss(model, qt, d, nc);
    if (lambda > 0.0) {
        std::vector<std::vector<double>> bits;
        std::vector<double> dims;
        collect_feature_bits(qt, nullptr, bits, dims);
        loss += lambda * memory_loss(bits, dims, m_target_kb).loss;
    }
    return loss;
}

struct BackwardOut {
    Grads grads;
    Matrix logits;
};

BackwardOut run_backward(ModelParams& model, const QuantTable& qt,
                         const Dataset& d, const NormCoeffs& nc,
                         const BackwardOpts& opts) {
    ForwardOpts fo;
    fo.training = true;
    Tape tape;
    BackwardOut out;
    out.logits = forward(model, qt, d.graph, nc, d.features, fo, &tape);
    const NllResult nll =
        nll_loss(out.logits, d.split.train, d.split.labels);
    out.grads = backward(model, qt, d.graph, nc, d.features, tape,
                         nll.dlogits, opts);
    return out;
}

} // namespace

// ============================================================================
// FP32 gradients vs finite differences
// ============================================================================

TEST_CASE("fp32 GCN gradients match finite differences") {
    const Dataset d = six_node_dataset(5, 3, 21);
    const NormCoeffs nc = norm_coeffs(d.graph);
    ModelParams model = init_model(ModelKind::gcn, 5, 8, 3, false, false, 3);
    QuantTableOpts qo;
    qo.mode = QuantMode::fp32;
    const QuantTable qt = init_quant_table(model, 6, qo, &d.features);

    const Grads g = run_backward(model, qt, d, nc, BackwardOpts{}).grads;

    for (std::size_t l = 0; l < model.linears.size(); ++l) {
        for (std::size_t e = 0; e < model.linears[l].w.data.size(); ++e) {
            const double theta = model.linears[l].w.data[e];
            const double h = 1e-5 * std::max(1.0, std::abs(theta));
            ModelParams mp = model, mm = model;
            mp.linears[l].w.data[e] = theta + h;
            mm.linears[l].w.data[e] = theta - h;
            const double fd =
                (task_loss(mp, qt, d, nc) - task_loss(mm, qt, d, nc)) /
                (2 * h);
            check_close(g.d_w[l].data[e], fd);
        }
        for (std::size_t e = 0; e < model.linears[l].bias.size(); ++e) {
            const double theta = model.linears[l].bias[e];
            const double h = 1e-5 * std::max(1.0, std::abs(theta));
            ModelParams mp = model, mm = model;
            mp.linears[l].bias[e] = theta + h;
            mm.linears[l].bias[e] = theta - h;
            const double fd =
                (task_loss(mp, qt, d, nc) - task_loss(mm, qt, d, nc)) /
                (2 * h);
            check_close(g.d_bias[l][e], fd);
        }
    }
}

TEST_CASE("fp32 GIN gradients match finite differences (eps, BN)") {
    const Dataset d = six_node_dataset(4, 3, 22);
    const NormCoeffs nc = norm_coeffs(d.graph);
    ModelParams model = init_model(ModelKind::gin, 4, 6, 3, true, false, 5);
    QuantTableOpts qo;
    qo.mode = QuantMode::fp32;
    const QuantTable qt = init_quant_table(model, 6, qo, &d.features);

    const Grads g = run_backward(model, qt, d, nc, BackwardOpts{}).grads;

    for (std::size_t l = 0; l < model.linears.size(); ++l)
        for (std::size_t e = 0; e < model.linears[l].w.data.size(); ++e) {
            const double theta = model.linears[l].w.data[e];
            const double h = 1e-5 * std::max(1.0, std::abs(theta));
            ModelParams mp = model, mm = model;
            mp.linears[l].w.data[e] = theta + h;
            mm.linears[l].w.data[e] = theta - h;
            const double fd =
                (task_loss(mp, qt, d, nc) - task_loss(mm, qt, d, nc)) /
                (2 * h);
            check_close(g.d_w[l].data[e], fd);
        }

    for (std::size_t l = 0; l < model.gin_eps.size(); ++l) {
        const double h = 1e-5;
        ModelParams mp = model, mm = model;
        mp.gin_eps[l] += h;
        mm.gin_eps[l] -= h;
        const double fd =
            (task_loss(mp, qt, d, nc) - task_loss(mm, qt, d, nc)) / (2 * h);
        check_close(g.d_gin_eps[l], fd);
    }

    for (std::size_t l = 0; l < model.bns.size(); ++l)
        for (std::size_t c = 0; c < model.bns[l].gamma.size(); ++c) {
            const double h = 1e-5;
            ModelParams mp = model, mm = model;
            mp.bns[l].gamma[c] += h;
            mm.bns[l].gamma[c] -= h;
            double fd =
                (task_loss(mp, qt, d, nc) - task_loss(mm, qt, d, nc)) /
                (2 * h);
            check_close(g.d_bn_gamma[l][c], fd);
            mp = model;
            mm = model;
            mp.bns[l].beta[c] += h;
            mm.bns[l].beta[c] -= h;
            fd = (task_loss(mp, qt, d, nc) - task_loss(mm, qt, d, nc)) /
                 (2 * h);
            check_close(g.d_bn_beta[l][c], fd);
        }
}

// ============================================================================
// Quantized forward: transparency and degenerate cases
// ============================================================================

namespace {

// Model and inputs sitting exactly on every quantization grid, so the
// quantized forward reproduces the FP32 forward bit for bit. Five
// isolated nodes keep the aggregation scale factors at 1.
struct ExactGrid {
    Dataset d;
    ModelParams model;
    QuantTable qt;
};

ExactGrid exact_grid_case() {
    ExactGrid eg;
    eg.d.graph = csr_from_edges(5, {});
    eg.d.features = Matrix(5, 3);
    Rng rng(31);
    for (double& v : eg.d.features.data)
        v = 0.25 * (static_cast<double>(rng.uniform_index(5)) - 2.0);
    eg.d.features.at(0, 0) = -0.5; // force the signed input range
    eg.d.split.labels = {0, 1, 0, 1, 0};
    eg.d.split.train = {0, 1, 2};
    eg.d.split.num_classes = 2;

    eg.model = init_model(ModelKind::gcn, 3, 4, 2, false, true, 7);
    // One +-0.25 entry per column keeps every intermediate value on a
    // coarse dyadic grid within the 4-bit code ranges.
    eg.model.linears[0].w.fill(0.0);
    for (int j = 0; j < 4; ++j)
        eg.model.linears[0].w.at(j % 3, j) = (j % 2 == 0) ? 0.25 : -0.25;
    eg.model.linears[0].w_step.assign(4, 0.25);
    eg.model.linears[0].bias = {0.0, 0.0625, 0.125, 0.0625};
    eg.model.linears[1].w.fill(0.0);
    for (int j = 0; j < 2; ++j)
        eg.model.linears[1].w.at(j, j) = (j == 0) ? 0.25 : -0.25;
    eg.model.linears[1].w_step.assign(2, 0.25);
    eg.model.linears[1].bias = {0.015625, -0.03125};
    eg.model.agg_steps[0].assign(4, 1.0 / 16);
    eg.model.agg_steps[1].assign(2, 1.0 / 64);

    QuantTableOpts qo;
    qo.mode = QuantMode::per_node_learned;
    qo.quantize_first_input = true;
    eg.qt = init_quant_table(eg.model, 5, qo, &eg.d.features);
    eg.qt.steps[0].assign(5, 0.25);
    eg.qt.bits[0].assign(5, 8.0);
    eg.qt.steps[1].assign(5, 1.0 / 16);
    eg.qt.bits[1].assign(5, 8.0);
    return eg;
}

} // namespace

TEST_CASE("on-grid quantizers reproduce the fp32 forward") {
    ExactGrid eg = exact_grid_case();
    REQUIRE(eg.qt.sites[0].unsigned_range == false);
    REQUIRE(eg.qt.sites[1].unsigned_range == true);

    QuantTableOpts fo32;
    fo32.mode = QuantMode::fp32;
    const QuantTable qtf =
        init_quant_table(eg.model, 5, fo32, &eg.d.features);
    const NormCoeffs nc = norm_coeffs(eg.d.graph);
    ForwardOpts fo;
    const Matrix lq =
        forward(eg.model, eg.qt, eg.d.graph, nc, eg.d.features, fo, nullptr);
    const Matrix lf =
        forward(eg.model, qtf, eg.d.graph, nc, eg.d.features, fo, nullptr);
    REQUIRE(lq.same_shape(lf));
    for (std::size_t e = 0; e < lq.data.size(); ++e)
        CHECK(std::abs(lq.data[e] - lf.data[e]) < 1e-3);
}

TEST_CASE("transparent quantizers leave the weight gradients fp32") {
    ExactGrid eg = exact_grid_case();
    QuantTableOpts fo32;
    fo32.mode = QuantMode::fp32;
    const QuantTable qtf =
        init_quant_table(eg.model, 5, fo32, &eg.d.features);
    const NormCoeffs nc = norm_coeffs(eg.d.graph);

    BackwardOpts bo; // lambda = 0
    ModelParams m1 = eg.model, m2 = eg.model;
    const Grads gq = run_backward(m1, eg.qt, eg.d, nc, bo).grads;
    const Grads gf = run_backward(m2, qtf, eg.d, nc, bo).grads;
    for (std::size_t l = 0; l < gq.d_w.size(); ++l) {
        for (std::size_t e = 0; e < gq.d_w[l].data.size(); ++e)
            check_close(gq.d_w[l].data[e], gf.d_w[l].data[e], 1e-6, 1e-12);
        for (std::size_t e = 0; e < gq.d_bias[l].size(); ++e)
            check_close(gq.d_bias[l][e], gf.d_bias[l][e], 1e-6, 1e-12);
    }
}

TEST_CASE("zero weights broadcast the bias") {
    const Dataset d = six_node_dataset(4, 3, 40);
    const NormCoeffs nc = norm_coeffs(d.graph);
    ModelParams model = init_model(ModelKind::gcn, 4, 5, 3, false, false, 9);
    for (LinearLayer& lin : model.linears) lin.w.fill(0.0);
    model.linears[1].bias = {0.3, -0.7, 0.1};

    QuantTableOpts qo;
    for (QuantMode mode :
         {QuantMode::fp32, QuantMode::per_node_learned}) {
        qo.mode = mode;
        const QuantTable qt = init_quant_table(model, 6, qo, &d.features);
        const Matrix logits =
            forward(model, qt, d.graph, nc, d.features, ForwardOpts{},
                    nullptr);
        for (std::size_t i = 0; i < logits.rows; ++i) {
            CHECK(logits.at(i, 0) == 0.3);
            CHECK(logits.at(i, 1) == -0.7);
            CHECK(logits.at(i, 2) == 0.1);
        }
    }
}

TEST_CASE("identity adjacency keeps rows independent") {
    ModelParams model = init_model(ModelKind::gcn, 3, 4, 2, false, false, 11);
    QuantTableOpts qo;
    qo.mode = QuantMode::fp32;

    Dataset d;
    d.graph = csr_from_edges(4, {});
    d.features = Matrix(4, 3);
    Rng rng(12);
    for (double& v : d.features.data) v = rng.uniform(-1.0, 1.0);
    const QuantTable qt = init_quant_table(model, 4, qo, &d.features);
    const NormCoeffs nc = norm_coeffs(d.graph);
    Tape tape;
    const Matrix logits =
        forward(model, qt, d.graph, nc, d.features, ForwardOpts{}, &tape);

    // Layer output is plain ReLU(X W + bias) when A~ = I.
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            double acc = model.linears[0].bias[j];
            for (std::size_t k = 0; k < 3; ++k)
                acc += d.features.at(i, k) * model.linears[0].w.at(k, j);
            CHECK(tape.layer_out[0].at(i, j) ==
                  doctest::Approx(std::max(acc, 0.0)).epsilon(1e-12));
        }

    // Each row matches a single-node forward on the same features.
    CsrGraph g1 = csr_from_edges(1, {});
    const NormCoeffs nc1 = norm_coeffs(g1);
    Matrix x1(1, 3);
    for (std::size_t k = 0; k < 3; ++k) x1.at(0, k) = d.features.at(2, k);
    const QuantTable qt1 = init_quant_table(model, 1, qo, &x1);
    const Matrix l1 = forward(model, qt1, g1, nc1, x1, ForwardOpts{}, nullptr);
    for (std::size_t c = 0; c < 2; ++c)
        CHECK(l1.at(0, c) == doctest::Approx(logits.at(2, c)).epsilon(1e-12));
}

// ============================================================================
// Quantizer-parameter gradients vs finite differences
// ============================================================================

TEST_CASE("saturated last-site step gradients match finite differences") {
    // All-positive parameters give the last GIN site a saturation
    // margin, where the step derivative of the forward is exact; the
    // remaining pipeline (one linear + nll) is smooth.
    Dataset d = six_node_dataset(4, 3, 55);
    for (double& v : d.features.data) v = std::abs(v) + 0.5;
    const NormCoeffs nc = norm_coeffs(d.graph);
    ModelParams model = init_model(ModelKind::gin, 4, 6, 3, false, true, 8);
    Rng rng(99);
    for (LinearLayer& lin : model.linears) {
        for (double& v : lin.w.data) v = rng.uniform(0.05, 0.4);
        for (double& v : lin.bias) v = rng.uniform(0.1, 0.3);
    }

    QuantTableOpts qo;
    qo.mode = QuantMode::per_node_learned;
    qo.quantize_first_input = true;
    QuantTable qt = init_quant_table(model, 6, qo, &d.features);
    REQUIRE(qt.num_sites() == 4);
    const i32 last = 3;
    qt.steps[last].assign(6, 1e-4);

    ForwardOpts fo;
    fo.training = true;
    Tape tape;
    const Matrix logits =
        forward(model, qt, d.graph, nc, d.features, fo, &tape);
    REQUIRE(!tape.sites[last].sat.empty());
    for (std::uint8_t s : tape.sites[last].sat) REQUIRE(s == 1);

    const NllResult nll = nll_loss(logits, d.split.train, d.split.labels);
    BackwardOpts bo;
    const Grads g =
        backward(model, qt, d.graph, nc, d.features, tape, nll.dlogits, bo);

    for (i32 i = 0; i < 6; ++i) {
        const double s0 = qt.steps[last][i];
        const double h = 1e-3 * s0;
        QuantTable qp = qt, qm = qt;
        qp.steps[last][i] = s0 + h;
        qm.steps[last][i] = s0 - h;
        const double fd =
            (task_loss(model, qp, d, nc) - task_loss(model, qm, d, nc)) /
            (2 * h);
        const bool is_train =
            std::find(d.split.train.begin(), d.split.train.end(), i) !=
            d.split.train.end();
        if (is_train) {
            check_close(g.d_site_step[last][i], fd, 1e-4, 1e-5);
            CHECK(std::abs(g.d_site_step[last][i]) > 1e-5);
        } else {
            // The last site feeds a per-node linear only, so nodes
            // outside the train mask get no step gradient.
            CHECK(std::abs(g.d_site_step[last][i]) < 1e-12);
            CHECK(std::abs(fd) < 1e-12);
        }
    }
}

TEST_CASE("in-range bit gradients carry exactly the memory penalty") {
    // Unit steps keep every site in range, so the rounding plateau
    // makes the task loss locally constant in the bitwidths and the
    // total-loss finite difference isolates the memory term.
    Dataset d = six_node_dataset(4, 3, 60);
    for (double& v : d.features.data) v = 0.2 + 0.6 * std::abs(v);
    const NormCoeffs nc = norm_coeffs(d.graph);
    ModelParams model = init_model(ModelKind::gin, 4, 6, 3, false, true, 14);
    Rng rng(15);
    for (LinearLayer& lin : model.linears) {
        for (double& v : lin.w.data) v = rng.uniform(-0.3, 0.3);
        for (double& v : lin.bias) v = rng.uniform(-0.2, 0.2);
    }

    QuantTableOpts qo;
    qo.mode = QuantMode::per_node_learned;
    qo.quantize_first_input = true;
    QuantTable qt = init_quant_table(model, 6, qo, &d.features);
    for (i32 s = 0; s < qt.num_sites(); ++s) qt.steps[s].assign(6, 1.0);

    ForwardOpts fo;
    fo.training = true;
    Tape tape;
    const Matrix logits =
        forward(model, qt, d.graph, nc, d.features, fo, &tape);
    for (i32 s = 0; s < qt.num_sites(); ++s)
        for (std::uint8_t f : tape.sites[s].sat) REQUIRE(f == 0);

    const double lambda = 1e-3, target = 0.001;
    const NllResult nll = nll_loss(logits, d.split.train, d.split.labels);
    BackwardOpts bo;
    bo.lambda = lambda;
    bo.m_target_kb = target;
    const Grads g =
        backward(model, qt, d.graph, nc, d.features, tape, nll.dlogits, bo);

    for (i32 s = 0; s < qt.num_sites(); ++s)
        for (i32 i = 0; i < 6; ++i) {
            const double h = 1e-3;
            QuantTable qp = qt, qm = qt;
            qp.bits[s][i] += h;
            qm.bits[s][i] -= h;
            const double fd = (total_loss(model, qp, d, nc, lambda, target) -
                               total_loss(model, qm, d, nc, lambda, target)) /
                              (2 * h);
            check_close(g.d_site_bit[s][i], fd, 1e-4, 1e-13);
            // Memory above target pushes every bit down.
            CHECK(g.d_site_bit[s][i] > 0.0);
        }
}

// ============================================================================
// Local gradient mode
// ============================================================================

TEST_CASE("local-mode site gradients ignore the labels") {
    Dataset d = six_node_dataset(5, 3, 70);
    const NormCoeffs nc = norm_coeffs(d.graph);
    ModelParams model = init_model(ModelKind::gcn, 5, 8, 3, false, true, 17);
    QuantTableOpts qo;
    qo.mode = QuantMode::per_node_learned;
    qo.quantize_first_input = true;
    const QuantTable qt = init_quant_table(model, 6, qo, &d.features);

    BackwardOpts bo;
    bo.grad_mode = GradMode::local;
    bo.lambda = 1e-3;
    bo.m_target_kb = 0.01;
    ModelParams m1 = model, m2 = model;
    const Grads g1 = run_backward(m1, qt, d, nc, bo).grads;

    Dataset d2 = d;
    d2.split.labels = {2, 2, 0, 1, 2, 0};
    d2.split.train = {1, 3, 5};
    const Grads g2 = run_backward(m2, qt, d2, nc, bo).grads;

    CHECK(g1.d_site_step == g2.d_site_step);
    CHECK(g1.d_site_bit == g2.d_site_bit);
    // Weight gradients still follow the task loss.
    CHECK(g1.d_w.back().data != g2.d_w.back().data);
}

TEST_CASE("local gradients vanish when quantization is exact") {
    ExactGrid eg = exact_grid_case();
    const NormCoeffs nc = norm_coeffs(eg.d.graph);
    BackwardOpts bo;
    bo.grad_mode = GradMode::local;
    bo.lambda = 1e-3;
    bo.m_target_kb = 0.001;
    ModelParams m = eg.model;
    const Grads g = run_backward(m, eg.qt, eg.d, nc, bo).grads;

    std::vector<std::vector<double>> bits;
    std::vector<double> dims;
    collect_feature_bits(eg.qt, nullptr, bits, dims);
    const MemoryLoss ml = memory_loss(bits, dims, bo.m_target_kb);
    for (i32 s = 0; s < eg.qt.num_sites(); ++s)
        for (i32 i = 0; i < 5; ++i) {
            CHECK(g.d_site_step[s][i] == 0.0);
            CHECK(g.d_site_bit[s][i] ==
                  doctest::Approx(bo.lambda * ml.grads[s][i])
                      .epsilon(1e-12));
        }
}

TEST_CASE("local accumulation equals per-row local_grad") {
    Dataset d = six_node_dataset(5, 3, 71);
    const NormCoeffs nc = norm_coeffs(d.graph);
    ModelParams model = init_model(ModelKind::gcn, 5, 8, 3, false, true, 19);
    QuantTableOpts qo;
    qo.mode = QuantMode::per_node_learned;
    qo.quantize_first_input = true;
    const QuantTable qt = init_quant_table(model, 6, qo, &d.features);

    ForwardOpts fo;
    fo.training = true;
    Tape tape;
    ModelParams m = model;
    const Matrix logits = forward(m, qt, d.graph, nc, d.features, fo, &tape);
    const NllResult nll = nll_loss(logits, d.split.train, d.split.labels);
    BackwardOpts bo;
    bo.grad_mode = GradMode::local;
    const Grads g =
        backward(m, qt, d.graph, nc, d.features, tape, nll.dlogits, bo);

    for (i32 s = 0; s < qt.num_sites(); ++s) {
        REQUIRE(tape.sites[s].active);
        for (i32 i = 0; i < 6; ++i) {
            const LocalGrad lg =
                local_grad(tape.sites[s].pre.row(i), qt.node_param(s, i));
            CHECK(g.d_site_step[s][i] == lg.d_step);
            CHECK(g.d_site_bit[s][i] == lg.d_bitwidth);
        }
    }
}

// ============================================================================
// Zero-gradient diagnostic
// ============================================================================

TEST_CASE("disconnected components receive no feature gradients") {
    Dataset d;
    d.graph = csr_from_edges(6, {{0, 1}, {1, 2}, {0, 2}, {3, 4}, {4, 5}, {3, 5}});
    d.features = Matrix(6, 4);
    Rng rng(23);
    for (double& v : d.features.data) v = rng.uniform(-1.0, 1.0);
    d.split.labels = {0, 1, 2, 0, 1, 2};
    d.split.train = {0};
    d.split.num_classes = 3;
    const NormCoeffs nc = norm_coeffs(d.graph);

    ModelParams model = init_model(ModelKind::gcn, 4, 5, 3, false, true, 29);
    QuantTableOpts qo;
    qo.mode = QuantMode::per_node_learned;
    qo.quantize_first_input = true;
    const QuantTable qt = init_quant_table(model, 6, qo, &d.features);

    ModelParams m = model;
    const Grads g = run_backward(m, qt, d, nc, BackwardOpts{}).grads;
    double reached = 0.0;
    for (i32 s = 0; s < qt.num_sites(); ++s) {
        for (i32 i = 3; i < 6; ++i) {
            CHECK(g.d_site_step[s][i] == 0.0);
            CHECK(g.d_site_bit[s][i] == 0.0);
        }
        for (i32 i = 0; i < 3; ++i) reached += std::abs(g.d_site_step[s][i]);
    }
    CHECK(reached > 0.0);

    ModelParams mz = model;
    CHECK(zero_grad_fraction(mz, qt, d.graph, nc, d.features, d.split) ==
          0.5);
}

TEST_CASE("full supervision on a dense graph leaves no zero rows") {
    Dataset d;
    std::vector<std::pair<i32, i32>> edges;
    for (i32 u = 0; u < 6; ++u)
        for (i32 v = u + 1; v < 6; ++v) edges.push_back({u, v});
    d.graph = csr_from_edges(6, edges);
    d.features = Matrix(6, 4);
    Rng rng(24);
    for (double& v : d.features.data) v = rng.uniform(-1.0, 1.0);
    d.split.labels = {0, 1, 2, 0, 1, 2};
    d.split.train = {0, 1, 2, 3, 4, 5};
    d.split.num_classes = 3;
    const NormCoeffs nc = norm_coeffs(d.graph);

    ModelParams model = init_model(ModelKind::gcn, 4, 5, 3, false, false, 31);
    QuantTableOpts qo;
    qo.mode = QuantMode::per_node_learned;
    const QuantTable qt = init_quant_table(model, 6, qo, &d.features);
    CHECK(zero_grad_fraction(model, qt, d.graph, nc, d.features, d.split) ==
          0.0);
}

// ============================================================================
// Loss and accuracy
// ============================================================================

TEST_CASE("nll matches direct softmax computation") {
    Matrix logits(4, 3);
    Rng rng(33);
    for (double& v : logits.data) v = rng.uniform(-2.0, 2.0);
    const std::vector<i32> labels = {2, 0, 1, 2};
    const std::vector<i32> mask = {0, 2, 3};

    double want = 0.0;
    for (i32 i : mask) {
        double mx = logits.at(i, 0);
        for (int c = 1; c < 3; ++c) mx = std::max(mx, logits.at(i, c));
        double z = 0.0;
        for (int c = 0; c < 3; ++c) z += std::exp(logits.at(i, c) - mx);
        want -= logits.at(i, labels[i]) - mx - std::log(z);
    }
    want /= 3.0;
    const NllResult r = nll_loss(logits, mask, labels);
    CHECK(r.loss == doctest::Approx(want).epsilon(1e-12));

    // Gradient rows outside the mask stay zero.
    for (std::size_t c = 0; c < 3; ++c) CHECK(r.dlogits.at(1, c) == 0.0);
    // Inside the mask: (softmax - onehot) / |mask|.
    double z = 0.0;
    for (int c = 0; c < 3; ++c) z += std::exp(logits.at(0, c));
    for (int c = 0; c < 3; ++c) {
        const double p = std::exp(logits.at(0, c)) / z;
        const double want_g = (p - (c == 2 ? 1.0 : 0.0)) / 3.0;
        CHECK(r.dlogits.at(0, c) == doctest::Approx(want_g).epsilon(1e-10));
    }
}

TEST_CASE("nll limit cases") {
    Matrix uniform(2, 5, 0.7);
    const NllResult r = nll_loss(uniform, {0, 1}, {3, 1});
    CHECK(r.loss == doctest::Approx(std::log(5.0)).epsilon(1e-12));

    Matrix sharp(2, 3);
    sharp.at(0, 1) = 50.0;
    sharp.at(1, 2) = 50.0;
    CHECK(nll_loss(sharp, {0, 1}, {1, 2}).loss < 1e-6);

    CHECK_THROWS_AS((void)nll_loss(uniform, {}, {3, 1}), error);
}

TEST_CASE("accuracy counts argmax hits over the mask") {
    Matrix logits(4, 2);
    logits.at(0, 1) = 1.0; // pred 1
    logits.at(1, 0) = 2.0; // pred 0
    logits.at(2, 1) = 3.0; // pred 1
    logits.at(3, 0) = 1.0; // pred 0
    const std::vector<i32> labels = {1, 1, 1, 0};
    CHECK(accuracy(logits, {0, 1, 2, 3}, labels) == 0.75);
    CHECK(accuracy(logits, {1}, labels) == 0.0);
    CHECK(accuracy(logits, {0, 2}, labels) == 1.0);
}

// ============================================================================
// Training loop
// ============================================================================

TEST_CASE("fp32 training fits a planted community task") {
    SynthSpec spec;
    spec.n = 200;
    spec.seed = 5;
    const Dataset d = synth_dataset(spec);
    ModelParams model = init_model(ModelKind::gcn, spec.feat_dim, 16,
                                   spec.classes, false, false, 1);
    QuantTableOpts qo;
    qo.mode = QuantMode::fp32;
    QuantTable qt = init_quant_table(model, spec.n, qo, &d.features);

    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.lambda = 0.0;
    cfg.seed = 1;
    const TrainResult r = train(model, qt, d, cfg);
    CHECK(r.final_train_acc >= 0.95);
    CHECK(r.history.size() == 200);
}

TEST_CASE("training is deterministic in the seed") {
    SynthSpec spec;
    spec.n = 120;
    spec.seed = 9;
    const Dataset d = synth_dataset(spec);
    TrainConfig cfg;
    cfg.epochs = 25;
    cfg.lambda = 1e-4;
    cfg.m_target_kb = 0.05;
    cfg.grad_mode = GradMode::local;

    auto run = [&](u64 model_seed) {
        ModelParams model = init_model(ModelKind::gcn, spec.feat_dim, 16,
                                       spec.classes, false, false,
                                       model_seed);
        QuantTableOpts qo;
        qo.mode = QuantMode::per_node_learned;
        qo.seed = model_seed + 1;
        QuantTable qt = init_quant_table(model, spec.n, qo, &d.features);
        return train(model, qt, d, cfg);
    };
    const TrainResult a = run(4), b = run(4), c = run(5);
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t e = 0; e < a.history.size(); ++e) {
        CHECK(a.history[e].loss == b.history[e].loss);
        CHECK(a.history[e].val_acc == b.history[e].val_acc);
        CHECK(a.history[e].avg_bits == b.history[e].avg_bits);
    }
    CHECK(a.final_test_acc == b.final_test_acc);
    bool any_diff = false;
    for (std::size_t e = 0; e < std::min(a.history.size(), c.history.size());
         ++e)
        any_diff = any_diff || a.history[e].loss != c.history[e].loss;
    CHECK(any_diff);
}

// ============================================================================
// Table initialization and avg_bits
// ============================================================================

TEST_CASE("site layout follows the architecture") {
    Matrix pos(6, 4, 0.5);
    Matrix mixed(6, 4, 0.5);
    mixed.at(0, 0) = -0.5;

    ModelParams gcn = init_model(ModelKind::gcn, 4, 5, 3, false, false, 2);
    QuantTableOpts qo;
    qo.mode = QuantMode::per_node_learned;
    QuantTable t = init_quant_table(gcn, 6, qo, &pos);
    CHECK(t.num_sites() == 1);
    CHECK(t.sites[0].unsigned_range == true); // post-relu hidden map
    CHECK(t.sites[0].dim == 5);
    CHECK(t.steps[0].size() == 6);
    for (double b : t.bits[0]) CHECK(b == 4.0);
    for (double s : t.steps[0]) CHECK(s >= kStepMin);

    ModelParams gcnq = init_model(ModelKind::gcn, 4, 5, 3, false, true, 2);
    qo.quantize_first_input = true;
    t = init_quant_table(gcnq, 6, qo, &pos);
    CHECK(t.num_sites() == 2);
    CHECK(t.sites[0].first_input);
    CHECK(t.sites[0].unsigned_range == true); // non-negative data
    CHECK(t.sites[0].dim == 4);
    t = init_quant_table(gcnq, 6, qo, &mixed);
    CHECK(t.sites[0].unsigned_range == false);

    qo.quantize_first_input = false;
    ModelParams gin = init_model(ModelKind::gin, 4, 5, 3, false, false, 2);
    t = init_quant_table(gin, 6, qo, &pos);
    CHECK(t.num_sites() == 4);
    CHECK(t.sites[0].unsigned_range == false); // aggregated sums
    CHECK(t.sites[1].unsigned_range == true);  // post-relu, no BN
    CHECK(t.sites[2].unsigned_range == false);
    CHECK(t.sites[3].unsigned_range == true);

    ModelParams ginbn = init_model(ModelKind::gin, 4, 5, 3, true, false, 2);
    t = init_quant_table(ginbn, 6, qo, &pos);
    CHECK(t.sites[1].unsigned_range == false); // BN output is two-sided
    CHECK(t.sites[3].unsigned_range == false);

    qo.mode = QuantMode::uniform_fixed;
    t = init_quant_table(gcn, 6, qo, &pos);
    CHECK(t.steps[0].size() == 1);
    CHECK(t.node_param(0, 0).step == t.node_param(0, 5).step);
}

TEST_CASE("avg_bits weighs sites by dimension") {
    ModelParams gcnq = init_model(ModelKind::gcn, 4, 12, 3, false, true, 2);
    Matrix pos(6, 4, 0.5);
    QuantTableOpts qo;
    qo.mode = QuantMode::per_node_learned;
    qo.quantize_first_input = true;
    QuantTable t = init_quant_table(gcnq, 6, qo, &pos);
    t.bits[0].assign(6, 2.4); // rounds to 2
    t.bits[1].assign(6, 5.6); // rounds to 6

    CHECK(avg_bits(t, true) == (4.0 * 2 + 12.0 * 6) / 16.0);
    CHECK(avg_bits(t, false) == 6.0);

    qo.mode = QuantMode::uniform_fixed;
    qo.uniform_bits = 4.0;
    t = init_quant_table(gcnq, 6, qo, &pos);
    CHECK(avg_bits(t, true) == 4.0);
    CHECK(avg_bits(t, false) == 4.0);

    qo.mode = QuantMode::fp32;
    t = init_quant_table(gcnq, 6, qo, &pos);
    CHECK(avg_bits(t, true) == 32.0);

    qo.mode = QuantMode::nns_bank;
    qo.nns_groups = 3;
    t = init_quant_table(gcnq, 6, qo, &pos);
    std::vector<Assignment> assigns(t.num_sites(), Assignment(6, 0));
    CHECK(avg_bits(t, true, &assigns) == 4.0); // bank bits start at 4
    CHECK_THROWS_AS((void)avg_bits(t, true), error);
}

TEST_CASE("batch norm uses batch stats in training and running at eval") {
    Dataset d = six_node_dataset(4, 3, 80);
    const NormCoeffs nc = norm_coeffs(d.graph);
    ModelParams model = init_model(ModelKind::gin, 4, 5, 3, true, false, 44);
    QuantTableOpts qo;
    qo.mode = QuantMode::fp32;
    const QuantTable qt = init_quant_table(model, 6, qo, &d.features);

    ForwardOpts train_fo;
    train_fo.training = true;
    Tape tape;
    const Matrix lt =
        forward(model, qt, d.graph, nc, d.features, train_fo, &tape);
    REQUIRE(!tape.bn.empty());
    // Normalized columns have near-zero mean and near-unit variance.
    const Matrix& xh = tape.bn[0].xhat;
    for (std::size_t c = 0; c < xh.cols; ++c) {
        double mean = 0.0, var = 0.0;
        for (std::size_t i = 0; i < xh.rows; ++i) mean += xh.at(i, c);
        mean /= static_cast<double>(xh.rows);
        for (std::size_t i = 0; i < xh.rows; ++i)
            var += (xh.at(i, c) - mean) * (xh.at(i, c) - mean);
        var /= static_cast<double>(xh.rows);
        CHECK(std::abs(mean) < 1e-9);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }

    // Eval mode consumes the (now warmed) running statistics instead.
    const Matrix le =
        forward(model, qt, d.graph, nc, d.features, ForwardOpts{}, nullptr);
    bool differs = false;
    for (std::size_t e = 0; e < lt.data.size(); ++e)
        differs = differs || lt.data[e] != le.data[e];
    CHECK(differs);
}
