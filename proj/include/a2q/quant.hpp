#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "a2q/common.hpp"

namespace a2q {

// ============================================================================
// Learnable quantizer parameters
// ============================================================================

// One quantizer: learnable step size and continuous bitwidth. The
// forward pass rounds the bitwidth (half away from zero) to pick the
// integer code range. Unsigned quantizers cover a one-sided range with
// 2^[b]-1 positive codes, i.e. the level count of a ([b]+1)-bit signed
// quantizer restricted to non-negative values; memory accounting still
// bills [b] bits per element.
struct QuantParam {
    double step = 0.01;
    double bitwidth = 4.0;
    bool unsigned_range = false;
};

struct QuantLevels {
    i32 max_code = 0;     // largest representable magnitude code
    double threshold = 0; // step * max_code; saturation begins here
};

struct QuantResult {
    std::vector<i32> codes;
    std::vector<double> values;       // step * code
    std::vector<std::uint8_t> sat;    // 1 where the clamp branch fired
};

// Per-element parameter gradients of the quantizer output.
struct QuantGrad {
    std::vector<double> d_step;
    std::vector<double> d_bitwidth;
};

inline double round_half_away(double v) { return std::round(v); }

inline double bit_min(bool unsigned_range) {
    return unsigned_range ? kBitMinUnsigned : kBitMinSigned;
}

inline double clamp_step(double s) { return s < kStepMin ? kStepMin : s; }

inline double clamp_bitwidth(double b, bool unsigned_range) {
    const double lo = bit_min(unsigned_range);
    if (b < lo) return lo;
    if (b > kBitMax) return kBitMax;
    return b;
}

inline QuantLevels effective_levels(const QuantParam& p) {
    require(p.step > 0.0, "effective_levels: step must be positive");
    const double rb = round_half_away(p.bitwidth);
    require(rb >= bit_min(p.unsigned_range) && rb <= kBitMax,
            "effective_levels: bitwidth outside admissible range");
    const int ib = static_cast<int>(rb);
    const i32 max_code = p.unsigned_range ? ((i32{1} << ib) - 1)
                                          : ((i32{1} << (ib - 1)) - 1);
    return {max_code, p.step * static_cast<double>(max_code)};
}

inline double sign_of(double v) {
    if (v > 0.0) return 1.0;
    if (v < 0.0) return -1.0;
    return 0.0;
}

// ============================================================================
// Forward / backward
// ============================================================================

// In-range inputs round to the nearest code, half magnitudes rounding
// away from zero; magnitudes at or beyond step*max_code clamp to the
// extreme code. Unsigned quantizers reject negative inputs.
inline QuantResult quantize(std::span<const double> x, const QuantParam& p) {
    const QuantLevels lv = effective_levels(p);
    QuantResult r;
    r.codes.resize(x.size());
    r.values.resize(x.size());
    r.sat.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        require(!p.unsigned_range || v >= 0.0,
                "quantize: negative input to unsigned quantizer");
        const double a = std::abs(v);
        i32 code;
        std::uint8_t sat = 0;
        if (a < lv.threshold) {
            code = static_cast<i32>(std::floor(a / p.step + 0.5));
        } else {
            code = lv.max_code;
            sat = 1;
        }
        if (v < 0.0) code = -code;
        r.codes[i] = code;
        r.values[i] = p.step * static_cast<double>(code);
        r.sat[i] = sat;
    }
    return r;
}

// Gradients of the quantizer output w.r.t. (step, bitwidth), one entry
// per element. In range: d_step = (x_q - x)/s with the rounding treated
// as pass-through, and the output does not depend on the bitwidth. At
// the clamp: x_q = sign(x) * s * max_code exactly, so d_step is the
// extreme code and d_bitwidth differentiates the level count with the
// rounded bitwidth substituted.
inline QuantGrad quant_grad(std::span<const double> x, const QuantParam& p,
                            const QuantResult& r) {
    require(r.values.size() == x.size(), "quant_grad: result size mismatch");
    const QuantLevels lv = effective_levels(p);
    const double rb = round_half_away(p.bitwidth);
    const double pow_term =
        p.unsigned_range ? std::exp2(rb) : std::exp2(rb - 1.0);
    const double ln2 = 0.69314718055994530942;
    QuantGrad g;
    g.d_step.resize(x.size());
    g.d_bitwidth.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (r.sat[i]) {
            const double sg = sign_of(x[i]);
            g.d_step[i] = sg * static_cast<double>(lv.max_code);
            g.d_bitwidth[i] = sg * pow_term * ln2 * p.step;
        } else {
            g.d_step[i] = (r.values[i] - x[i]) / p.step;
            g.d_bitwidth[i] = 0.0;
        }
    }
    return g;
}

// Straight-through estimate of the input gradient: the upstream value
// passes wherever |x| <= threshold and is blocked beyond it. The
// boundary itself passes.
inline std::vector<double> ste_input_grad(std::span<const double> x,
                                          const QuantParam& p,
                                          std::span<const double> upstream) {
    require(upstream.size() == x.size(), "ste_input_grad: size mismatch");
    const QuantLevels lv = effective_levels(p);
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        g[i] = std::abs(x[i]) <= lv.threshold ? upstream[i] : 0.0;
    return g;
}

// Mean absolute quantization error over one vector.
inline double quant_error(std::span<const double> x, const QuantParam& p) {
    require(!x.empty(), "quant_error: empty input");
    const QuantResult r = quantize(x, p);
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
        acc += std::abs(r.values[i] - x[i]);
    return acc / static_cast<double>(x.size());
}

struct LocalGrad {
    double d_step = 0.0;
    double d_bitwidth = 0.0;
};

// Gradient of the mean absolute quantization error w.r.t. (step,
// bitwidth), taken locally from the quantizer itself rather than from
// the task loss:
//   dE/ds = (1/d) * sum_i sign(x_q_i - x_i) * d x_q_i / ds
// and likewise for the bitwidth. sign(0) contributes nothing.
inline LocalGrad local_grad(std::span<const double> x, const QuantParam& p) {
    require(!x.empty(), "local_grad: empty input");
    const QuantResult r = quantize(x, p);
    const QuantGrad g = quant_grad(x, p, r);
    LocalGrad out;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double sg = sign_of(r.values[i] - x[i]);
        out.d_step += sg * g.d_step[i];
        out.d_bitwidth += sg * g.d_bitwidth[i];
    }
    const double d = static_cast<double>(x.size());
    out.d_step /= d;
    out.d_bitwidth /= d;
    return out;
}

// ============================================================================
// Memory penalty
// ============================================================================

// Bits-to-kilobytes conversion used by the memory penalty.
inline constexpr double kBitsPerKb = 8.0 * 1024.0;

struct MemoryLoss {
    double loss = 0.0;
    double current_kb = 0.0;
    // d loss / d b for every node at every site, same shapes as input.
    std::vector<std::vector<double>> grads;
};

// Quadratic penalty steering the total feature memory toward a target:
//   loss = ((1/eta) * sum_l sum_i dim_l * b_i_l - m_target)^2, eta = 8*1024.
// `bits[l]` holds the per-node continuous bitwidths of site l and
// `dims[l]` that site's feature dimension.
inline MemoryLoss memory_loss(const std::vector<std::vector<double>>& bits,
                              const std::vector<double>& dims,
                              double m_target_kb) {
    require(m_target_kb > 0.0, "memory_loss: target must be positive");
    require(bits.size() == dims.size(), "memory_loss: sites/dims mismatch");
    MemoryLoss out;
    double current = 0.0;
    for (std::size_t l = 0; l < bits.size(); ++l) {
        double site = 0.0;
        for (double b : bits[l]) site += b;
        current += dims[l] * site;
    }
    current /= kBitsPerKb;
    const double diff = current - m_target_kb;
    out.loss = diff * diff;
    out.current_kb = current;
    out.grads.resize(bits.size());
    for (std::size_t l = 0; l < bits.size(); ++l) {
        const double g = 2.0 * diff * dims[l] / kBitsPerKb;
        out.grads[l].assign(bits[l].size(), g);
    }
    return out;
}

// ============================================================================
// Adam
// ============================================================================

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    i64 t = 0;

    void resize(std::size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
        t = 0;
    }
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0; // L2 term added to the gradient
};

// One bias-corrected Adam update over a flat parameter block. The
// moment buffers advance even for zero gradients, which keeps parameter
// groups that share a step counter in sync.
inline void adam_step(std::span<double> params, std::span<const double> grads,
                      AdamState& st, const AdamConfig& cfg) {
    require(params.size() == grads.size(), "adam_step: size mismatch");
    require(st.m.size() == params.size() && st.v.size() == params.size(),
            "adam_step: state size mismatch");
    st.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i] + cfg.weight_decay * params[i];
        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

} // namespace a2q
