#pragma once

#include <string>
#include <vector>

#include "a2q/accel.hpp"
#include "a2q/model.hpp"

namespace a2q {

// ============================================================================
// Metrics
// ============================================================================

// FP32 feature storage over quantized storage including the 32-bit
// per-node step overhead: 32E / (b_m·E + 32·N·L) with E the counted
// feature elements N·F0 (if the first layer counts) + (L−1)·N·F1.
// include_overhead = false drops the 32NL term (the FP32 self-ratio
// convention, where no steps are stored).
double compression_ratio(double avg_bits, double n, double f0, double f1,
                         double layers, bool count_first_layer,
                         bool include_overhead = true);

// FNV-1a over a canonical string, rendered as 16 hex digits.
std::string fnv1a_hex(const std::string& text);

// ============================================================================
// Run records
// ============================================================================

struct RunRecord {
    std::string command;
    std::string config_hash;
    std::string model;
    std::string mode;
    std::string grad_mode;
    u64 seed = 0;
    std::vector<EpochStats> history;
    double final_train_acc = 0;
    double final_val_acc = 0;
    double final_test_acc = 0;
    double avg_bits = 0;
    double compression = 0;
    bool has_cycles = false;
    CycleReport cycles;
    double wall_clock_sec = 0;
};

// JSON with fixed key order; wall_clock_sec is the only
// run-dependent field for a fixed config + seed.
std::string run_record_json(const RunRecord& rec);
void write_run_record(const std::string& path, const RunRecord& rec);
RunRecord parse_run_record(const std::string& json_text);

std::string cycle_report_json(const CycleReport& rep,
                              const std::string& config_hash);

// Per-config mean and sample standard deviation over seeds; rows
// sorted by config hash then model/mode for stable output.
std::string sweep_csv(const std::vector<RunRecord>& records);
std::string sweep_json(const std::vector<RunRecord>& records);

} // namespace a2q
