#include "a2q/nns.hpp"

#include <algorithm>
#include <cmath>

#include "a2q/rng.hpp"

namespace a2q {

ParamBank bank_init(i32 m, u64 seed, bool unsigned_range) {
    require(m >= 1, "bank_init: need at least one group");
    ParamBank bank;
    bank.unsigned_range = unsigned_range;
    bank.steps.resize(m);
    bank.bitwidths.assign(m, 4.0);
    Rng rng(seed);
    for (i32 i = 0; i < m; ++i)
        bank.steps[i] = std::max(rng.normal(0.01, 0.01), kStepMin);
    bank_refresh(bank);
    return bank;
}

double bank_qmax(const ParamBank& bank, i32 group) {
    const double rb = round_half_away(bank.bitwidths[group]);
    const double levels = std::exp2(rb - 1.0) - 1.0;
    return bank.steps[group] * levels;
}

void bank_refresh(ParamBank& bank) {
    const i32 m = bank.groups();
    std::vector<std::pair<double, i32>> keyed(m);
    for (i32 i = 0; i < m; ++i) keyed[i] = {bank_qmax(bank, i), i};
    std::sort(keyed.begin(), keyed.end());
    bank.sorted_qmax.resize(m);
    bank.sorted_group.resize(m);
    for (i32 i = 0; i < m; ++i) {
        bank.sorted_qmax[i] = keyed[i].first;
        bank.sorted_group[i] = keyed[i].second;
    }
}

namespace {

// First sorted position holding `value`; the pairs are ordered by
// (q_max, group index), so this lands on the smallest group index of an
// equal-q_max run.
i32 first_of_run(const ParamBank& bank, i32 pos) {
    const double v = bank.sorted_qmax[pos];
    const auto it = std::lower_bound(bank.sorted_qmax.begin(),
                                     bank.sorted_qmax.end(), v);
    return static_cast<i32>(it - bank.sorted_qmax.begin());
}

} // namespace

i32 select_group(const ParamBank& bank, double f) {
    require(!bank.sorted_qmax.empty(), "select_group: bank not refreshed");
    require(f >= 0.0, "select_group: feature range must be non-negative");
    const i32 m = bank.groups();
    const auto it = std::lower_bound(bank.sorted_qmax.begin(),
                                     bank.sorted_qmax.end(), f);
    const i32 p = static_cast<i32>(it - bank.sorted_qmax.begin());
    i32 pos;
    if (p == 0) {
        pos = 0;
    } else if (p == m) {
        pos = m - 1;
    } else {
        const double dl = f - bank.sorted_qmax[p - 1];
        const double dr = bank.sorted_qmax[p] - f;
        pos = dl <= dr ? p - 1 : p; // ties go to the smaller q_max
    }
    return bank.sorted_group[first_of_run(bank, pos)];
}

Assignment select(const ParamBank& bank, const Matrix& x) {
    Assignment a(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
        double f = 0.0;
        for (double v : x.row(i)) f = std::max(f, std::abs(v));
        a[i] = select_group(bank, f);
    }
    return a;
}

GroupGrads accumulate_group_grads(const Assignment& assignment,
                                  const std::vector<double>& d_step,
                                  const std::vector<double>& d_bitwidth,
                                  i32 groups) {
    require(assignment.size() == d_step.size() &&
                assignment.size() == d_bitwidth.size(),
            "accumulate_group_grads: size mismatch");
    GroupGrads g;
    g.d_step.assign(groups, 0.0);
    g.d_bitwidth.assign(groups, 0.0);
    for (std::size_t i = 0; i < assignment.size(); ++i) {
        const i32 grp = assignment[i];
        require(grp >= 0 && grp < groups,
                "accumulate_group_grads: group index out of range");
        g.d_step[grp] += d_step[i];
        g.d_bitwidth[grp] += d_bitwidth[i];
    }
    return g;
}

} // namespace a2q
