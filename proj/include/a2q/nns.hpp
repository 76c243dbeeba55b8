#pragma once

#include <vector>

#include "a2q/common.hpp"
#include "a2q/matrix.hpp"
#include "a2q/quant.hpp"

namespace a2q {

// Node-to-group map produced by nearest-neighbor selection.
using Assignment = std::vector<i32>;

// A bank of m candidate quantizers shared by all nodes of one site.
// Each node picks the group whose maximum quantized value is nearest to
// the node's own feature range, so unseen nodes (or whole unseen
// graphs) can be quantized without per-node parameters.
struct ParamBank {
    std::vector<double> steps;
    std::vector<double> bitwidths;
    bool unsigned_range = false;

    // Selection key per group: q_max = s * (2^([b]-1) - 1). The signed
    // code count is used for the key even when the quantizer itself is
    // unsigned, so selection follows the algorithm as written.
    std::vector<double> sorted_qmax;      // ascending
    std::vector<i32> sorted_group;        // group index per sorted entry

    i32 groups() const { return static_cast<i32>(steps.size()); }
    QuantParam param(i32 group) const {
        return {steps[group], bitwidths[group], unsigned_range};
    }
};

// m groups, bitwidth 4, steps drawn from N(0.01, 0.01) truncated to the
// admissible minimum.
ParamBank bank_init(i32 m, u64 seed, bool unsigned_range = false);

double bank_qmax(const ParamBank& bank, i32 group);

// Rebuilds the sorted selection keys; must run after every update to
// the bank parameters.
void bank_refresh(ParamBank& bank);

// Nearest-neighbor selection for one node whose feature range is f
// (the maximum absolute feature value). Distance ties prefer the
// smaller q_max, and equal q_max values prefer the smaller group index.
i32 select_group(const ParamBank& bank, double f);

// Row-wise selection over a feature matrix.
Assignment select(const ParamBank& bank, const Matrix& x);

struct GroupGrads {
    std::vector<double> d_step;
    std::vector<double> d_bitwidth;
};

// Sums per-node parameter gradients into their assigned groups, in
// fixed node order.
GroupGrads accumulate_group_grads(const Assignment& assignment,
                                  const std::vector<double>& d_step,
                                  const std::vector<double>& d_bitwidth,
                                  i32 groups);

} // namespace a2q
