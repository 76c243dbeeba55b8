#pragma once

#include <string>

#include "a2q/graph.hpp"
#include "a2q/model.hpp"

namespace a2q {

// Identifies the graph a transductive (per-node) checkpoint was
// trained on; inductive modes ignore it at load time.
struct GraphFingerprint {
    u64 num_nodes = 0;
    u64 nnz = 0;
    u64 structure_hash = 0;
    bool operator==(const GraphFingerprint&) const = default;
};

GraphFingerprint fingerprint(const CsrGraph& g);

struct Checkpoint {
    ModelParams model;
    QuantTable qt;
    GraphFingerprint graph;
    bool quantize_first_input = false;
    std::string config_hash;
};

// Binary container, magic "A2QC", versioned, little-endian scalars.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

} // namespace a2q
