#include "a2q/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

namespace a2q {

using ordered_json = nlohmann::ordered_json;

double compression_ratio(double avg_bits, double n, double f0, double f1,
                         double layers, bool count_first_layer,
                         bool include_overhead) {
    require(avg_bits > 0.0 && n > 0 && layers >= 1,
            "compression_ratio: invalid shapes");
    const double elems =
        (count_first_layer ? n * f0 : 0.0) + (layers - 1.0) * n * f1;
    require(elems > 0.0, "compression_ratio: no feature elements counted");
    const double overhead = include_overhead ? 32.0 * n * layers : 0.0;
    return 32.0 * elems / (avg_bits * elems + overhead);
}

std::string fnv1a_hex(const std::string& text) {
    u64 h = 14695981039346656037ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(h));
    return buf;
}

// ============================================================================
// Run records
// ============================================================================

namespace {

ordered_json cycles_to_json(const CycleReport& rep) {
    ordered_json j;
    j["cycles_update"] = rep.cycles_update;
    j["cycles_aggregate"] = rep.cycles_aggregate;
    j["total_cycles"] = rep.total_cycles;
    j["dram_bits"] = rep.dram_bits;
    j["sram_bits"] = rep.sram_bits;
    j["energy_pj"] = rep.energy_pj;
    j["speedup_vs_int4"] = rep.speedup_vs_int4;
    j["avg_bits"] = rep.avg_bits;
    return j;
}

} // namespace

std::string run_record_json(const RunRecord& rec) {
    ordered_json j;
    j["schema_version"] = 1;
    j["command"] = rec.command;
    j["config_hash"] = rec.config_hash;
    j["model"] = rec.model;
    j["mode"] = rec.mode;
    j["grad_mode"] = rec.grad_mode;
    j["seed"] = rec.seed;
    j["final_train_acc"] = rec.final_train_acc;
    j["final_val_acc"] = rec.final_val_acc;
    j["final_test_acc"] = rec.final_test_acc;
    j["avg_bits"] = rec.avg_bits;
    j["compression_ratio"] = rec.compression;
    if (rec.has_cycles) j["cycle_report"] = cycles_to_json(rec.cycles);
    ordered_json hist = ordered_json::array();
    for (const EpochStats& e : rec.history) {
        ordered_json h;
        h["epoch"] = e.epoch;
        h["loss"] = e.loss;
        h["task_loss"] = e.task_loss;
        h["memory_kb"] = e.memory_kb;
        h["val_acc"] = e.val_acc;
        h["avg_bits"] = e.avg_bits;
        hist.push_back(std::move(h));
    }
    j["history"] = std::move(hist);
    j["wall_clock_sec"] = rec.wall_clock_sec;
    return j.dump(2) + "\n";
}

void write_run_record(const std::string& path, const RunRecord& rec) {
    std::ofstream out(path);
    require(out.good(), "run record: cannot open for writing: " + path);
    out << run_record_json(rec);
    require(out.good(), "run record: write failed: " + path);
}

RunRecord parse_run_record(const std::string& json_text) {
    const auto j = ordered_json::parse(json_text);
    RunRecord rec;
    rec.command = j.at("command").get<std::string>();
    rec.config_hash = j.at("config_hash").get<std::string>();
    rec.model = j.at("model").get<std::string>();
    rec.mode = j.at("mode").get<std::string>();
    rec.grad_mode = j.at("grad_mode").get<std::string>();
    rec.seed = j.at("seed").get<u64>();
    rec.final_train_acc = j.at("final_train_acc").get<double>();
    rec.final_val_acc = j.at("final_val_acc").get<double>();
    rec.final_test_acc = j.at("final_test_acc").get<double>();
    rec.avg_bits = j.at("avg_bits").get<double>();
    rec.compression = j.at("compression_ratio").get<double>();
    if (j.contains("cycle_report")) {
        rec.has_cycles = true;
        const auto& c = j.at("cycle_report");
        rec.cycles.cycles_update = c.at("cycles_update").get<i64>();
        rec.cycles.cycles_aggregate = c.at("cycles_aggregate").get<i64>();
        rec.cycles.total_cycles = c.at("total_cycles").get<i64>();
        rec.cycles.dram_bits = c.at("dram_bits").get<double>();
        rec.cycles.sram_bits = c.at("sram_bits").get<double>();
        rec.cycles.energy_pj = c.at("energy_pj").get<double>();
        rec.cycles.speedup_vs_int4 = c.at("speedup_vs_int4").get<double>();
        rec.cycles.avg_bits = c.at("avg_bits").get<double>();
    }
    for (const auto& h : j.at("history")) {
        EpochStats e;
        e.epoch = h.at("epoch").get<i32>();
        e.loss = h.at("loss").get<double>();
        e.task_loss = h.at("task_loss").get<double>();
        e.memory_kb = h.at("memory_kb").get<double>();
        e.val_acc = h.at("val_acc").get<double>();
        e.avg_bits = h.at("avg_bits").get<double>();
        rec.history.push_back(e);
    }
    rec.wall_clock_sec = j.at("wall_clock_sec").get<double>();
    return rec;
}

std::string cycle_report_json(const CycleReport& rep,
                              const std::string& config_hash) {
    ordered_json j;
    j["schema_version"] = 1;
    j["config_hash"] = config_hash;
    j.update(cycles_to_json(rep));
    return j.dump(2) + "\n";
}

// ============================================================================
// Sweep aggregation
// ============================================================================

namespace {

struct Agg {
    std::string model, mode, grad_mode;
    std::vector<double> acc, bits, speedup;
};

struct MeanStd {
    double mean = 0, std = 0;
};

MeanStd mean_std(const std::vector<double>& v) {
    MeanStd ms;
    if (v.empty()) return ms;
    for (double x : v) ms.mean += x;
    ms.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0;
        for (double x : v) ss += (x - ms.mean) * (x - ms.mean);
        ms.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return ms;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

std::map<std::string, Agg> group_records(
    const std::vector<RunRecord>& records) {
    std::map<std::string, Agg> groups;
    for (const RunRecord& r : records) {
        Agg& g = groups[r.config_hash];
        g.model = r.model;
        g.mode = r.mode;
        g.grad_mode = r.grad_mode;
        g.acc.push_back(r.final_test_acc);
        g.bits.push_back(r.avg_bits);
        if (r.has_cycles) g.speedup.push_back(r.cycles.speedup_vs_int4);
    }
    return groups;
}

} // namespace

std::string sweep_csv(const std::vector<RunRecord>& records) {
    std::string csv =
        "config_hash,model,mode,grad_mode,runs,test_acc_mean,test_acc_std,"
        "avg_bits_mean,avg_bits_std,speedup_mean,speedup_std\n";
    for (const auto& [hash, g] : group_records(records)) {
        const MeanStd acc = mean_std(g.acc);
        const MeanStd bits = mean_std(g.bits);
        const MeanStd sp = mean_std(g.speedup);
        csv += hash + "," + g.model + "," + g.mode + "," + g.grad_mode + "," +
               std::to_string(g.acc.size()) + "," + fmt(acc.mean) + "," +
               fmt(acc.std) + "," + fmt(bits.mean) + "," + fmt(bits.std) +
               "," + fmt(sp.mean) + "," + fmt(sp.std) + "\n";
    }
    return csv;
}

std::string sweep_json(const std::vector<RunRecord>& records) {
    ordered_json arr = ordered_json::array();
    for (const auto& [hash, g] : group_records(records)) {
        const MeanStd acc = mean_std(g.acc);
        const MeanStd bits = mean_std(g.bits);
        const MeanStd sp = mean_std(g.speedup);
        ordered_json j;
        j["config_hash"] = hash;
        j["model"] = g.model;
        j["mode"] = g.mode;
        j["grad_mode"] = g.grad_mode;
        j["runs"] = g.acc.size();
        j["test_acc_mean"] = acc.mean;
        j["test_acc_std"] = acc.std;
        j["avg_bits_mean"] = bits.mean;
        j["avg_bits_std"] = bits.std;
        j["speedup_mean"] = sp.mean;
        j["speedup_std"] = sp.std;
        arr.push_back(std::move(j));
    }
    ordered_json root;
    root["schema_version"] = 1;
    root["groups"] = std::move(arr);
    return root.dump(2) + "\n";
}

} // namespace a2q
