#include "a2q/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "a2q/rng.hpp"

namespace a2q {

// ============================================================================
// CSR construction
// ============================================================================

CsrGraph csr_from_edges(i32 num_nodes,
                        const std::vector<std::pair<i32, i32>>& edges,
                        bool add_self_loops) {
    require(num_nodes > 0, "csr_from_edges: node count must be positive");
    std::vector<std::pair<i32, i32>> norm;
    norm.reserve(edges.size());
    for (const auto& [u, v] : edges) {
        require(u >= 0 && u < num_nodes && v >= 0 && v < num_nodes,
                "csr_from_edges: node index out of range");
        norm.emplace_back(std::min(u, v), std::max(u, v));
    }
    std::sort(norm.begin(), norm.end());
    for (std::size_t i = 1; i < norm.size(); ++i)
        require(norm[i] != norm[i - 1], "csr_from_edges: duplicate edge");

    std::vector<std::pair<i32, i32>> directed;
    directed.reserve(norm.size() * 2 + (add_self_loops ? num_nodes : 0));
    std::vector<std::uint8_t> has_self(num_nodes, 0);
    for (const auto& [u, v] : norm) {
        if (u == v) {
            directed.emplace_back(u, u);
            has_self[u] = 1;
        } else {
            directed.emplace_back(u, v);
            directed.emplace_back(v, u);
        }
    }
    if (add_self_loops) {
        for (i32 u = 0; u < num_nodes; ++u)
            if (!has_self[u]) directed.emplace_back(u, u);
    }
    std::sort(directed.begin(), directed.end());

    CsrGraph g;
    g.num_nodes = num_nodes;
    g.has_self_loops = add_self_loops;
    g.row_ptr.assign(num_nodes + 1, 0);
    g.col_idx.resize(directed.size());
    for (const auto& [u, v] : directed) ++g.row_ptr[u + 1];
    for (i32 u = 0; u < num_nodes; ++u) g.row_ptr[u + 1] += g.row_ptr[u];
    std::vector<i64> cursor(g.row_ptr.begin(), g.row_ptr.end() - 1);
    for (const auto& [u, v] : directed) g.col_idx[cursor[u]++] = v;
    return g;
}

std::vector<std::pair<i32, i32>> undirected_edges(const CsrGraph& g) {
    std::vector<std::pair<i32, i32>> out;
    for (i32 u = 0; u < g.num_nodes; ++u)
        for (i64 e = g.row_ptr[u]; e < g.row_ptr[u + 1]; ++e) {
            const i32 v = g.col_idx[e];
            if (u < v) out.emplace_back(u, v);
        }
    return out;
}

NormCoeffs norm_coeffs(const CsrGraph& g) {
    require(g.has_self_loops, "norm_coeffs: graph must carry self-loops");
    NormCoeffs c;
    c.inv_sqrt_deg.resize(g.num_nodes);
    for (i32 u = 0; u < g.num_nodes; ++u) {
        const i64 d = g.degree(u);
        require(d >= 1, "norm_coeffs: empty row despite self-loops");
        c.inv_sqrt_deg[u] = 1.0 / std::sqrt(static_cast<double>(d));
    }
    return c;
}

NodeFeatures aggregate(const CsrGraph& g, const NodeFeatures& x,
                       AggregateMode mode, const NormCoeffs* coeffs,
                       double eps) {
    require(static_cast<i64>(x.rows) == g.num_nodes,
            "aggregate: feature row count does not match graph");
    NodeFeatures h(x.rows, x.cols, 0.0);
    if (mode == AggregateMode::gcn_norm) {
        require(coeffs != nullptr &&
                    coeffs->inv_sqrt_deg.size() == x.rows,
                "aggregate: gcn_norm needs matching norm coefficients");
        require(g.has_self_loops, "aggregate: gcn_norm needs self-loops");
        for (i32 u = 0; u < g.num_nodes; ++u) {
            double* hu = h.data.data() + static_cast<std::size_t>(u) * x.cols;
            const double cu = coeffs->inv_sqrt_deg[u];
            for (i64 e = g.row_ptr[u]; e < g.row_ptr[u + 1]; ++e) {
                const i32 v = g.col_idx[e];
                const double w = cu * coeffs->inv_sqrt_deg[v];
                const double* xv =
                    x.data.data() + static_cast<std::size_t>(v) * x.cols;
                for (std::size_t c = 0; c < x.cols; ++c) hu[c] += w * xv[c];
            }
        }
    } else {
        for (i32 u = 0; u < g.num_nodes; ++u) {
            double* hu = h.data.data() + static_cast<std::size_t>(u) * x.cols;
            const double* xu =
                x.data.data() + static_cast<std::size_t>(u) * x.cols;
            for (i64 e = g.row_ptr[u]; e < g.row_ptr[u + 1]; ++e) {
                const i32 v = g.col_idx[e];
                if (v == u) continue; // the self term enters via eps below
                const double* xv =
                    x.data.data() + static_cast<std::size_t>(v) * x.cols;
                for (std::size_t c = 0; c < x.cols; ++c) hu[c] += xv[c];
            }
            const double self_w = 1.0 + eps;
            for (std::size_t c = 0; c < x.cols; ++c) hu[c] += self_w * xu[c];
        }
    }
    return h;
}

// ============================================================================
// File formats
// ============================================================================

std::vector<std::pair<i32, i32>> load_edge_list(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "load_edge_list: cannot open " + path);
    std::vector<std::pair<i32, i32>> edges;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        long long u, v;
        if (!(ls >> u)) continue; // blank or comment-only line
        std::string trailing;
        require(static_cast<bool>(ls >> v) && !(ls >> trailing),
                "load_edge_list: malformed line " + std::to_string(lineno) +
                    " in " + path);
        require(u >= 0 && v >= 0, "load_edge_list: negative node index at line " +
                                      std::to_string(lineno));
        edges.emplace_back(static_cast<i32>(u), static_cast<i32>(v));
    }
    return edges;
}

NodeFeatures load_features(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "load_features: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    require(in.good() && std::memcmp(magic, "A2QF", 4) == 0,
            "load_features: bad magic in " + path);
    u32 n = 0, f = 0;
    in.read(reinterpret_cast<char*>(&n), 4);
    in.read(reinterpret_cast<char*>(&f), 4);
    require(in.good() && n > 0 && f > 0,
            "load_features: bad header in " + path);
    NodeFeatures x(n, f);
    std::vector<float> buf(static_cast<std::size_t>(n) * f);
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    require(in.gcount() ==
                static_cast<std::streamsize>(buf.size() * sizeof(float)),
            "load_features: truncated payload in " + path);
    for (std::size_t i = 0; i < buf.size(); ++i)
        x.data[i] = static_cast<double>(buf[i]);
    return x;
}

namespace {

std::vector<i32> parse_index_line(const std::string& line,
                                  const std::string& prefix, i32 num_nodes,
                                  const std::string& path) {
    require(line.rfind(prefix, 0) == 0,
            "load_split: expected '" + prefix + "' line in " + path);
    std::istringstream ls(line.substr(prefix.size()));
    std::vector<i32> ids;
    long long v;
    while (ls >> v) {
        require(v >= 0 && v < num_nodes,
                "load_split: node index out of range in " + path);
        ids.push_back(static_cast<i32>(v));
    }
    return ids;
}

} // namespace

DatasetSplit load_split(const std::string& split_path,
                        const std::string& labels_path, i32 num_nodes) {
    std::ifstream in(split_path);
    require(in.good(), "load_split: cannot open " + split_path);
    std::string line;
    DatasetSplit s;
    require(static_cast<bool>(std::getline(in, line)),
            "load_split: missing train line in " + split_path);
    s.train = parse_index_line(line, "train:", num_nodes, split_path);
    require(static_cast<bool>(std::getline(in, line)),
            "load_split: missing val line in " + split_path);
    s.val = parse_index_line(line, "val:", num_nodes, split_path);
    require(static_cast<bool>(std::getline(in, line)),
            "load_split: missing test line in " + split_path);
    s.test = parse_index_line(line, "test:", num_nodes, split_path);

    std::ifstream lin(labels_path);
    require(lin.good(), "load_split: cannot open " + labels_path);
    s.labels.reserve(num_nodes);
    long long v;
    while (lin >> v) s.labels.push_back(static_cast<i32>(v));
    require(static_cast<i64>(s.labels.size()) == num_nodes,
            "load_split: label count does not match node count");

    std::vector<std::uint8_t> seen(num_nodes, 0);
    i32 max_label = -1;
    for (const auto* part : {&s.train, &s.val, &s.test})
        for (i32 id : *part) {
            require(!seen[id], "load_split: node appears in two split parts");
            seen[id] = 1;
            require(s.labels[id] >= 0,
                    "load_split: split node " + std::to_string(id) +
                        " is unlabeled");
        }
    for (i32 l : s.labels) max_label = std::max(max_label, l);
    s.num_classes = max_label + 1;
    return s;
}

Dataset load_graph(const std::string& edge_path,
                   const std::string& feature_path,
                   const std::string& split_path,
                   const std::string& labels_path) {
    Dataset d;
    d.features = load_features(feature_path);
    const i32 n = static_cast<i32>(d.features.rows);
    d.graph = csr_from_edges(n, load_edge_list(edge_path), true);
    d.split = load_split(split_path, labels_path, n);
    return d;
}

void save_edge_list(const std::string& path, const CsrGraph& g) {
    std::ofstream out(path);
    require(out.good(), "save_edge_list: cannot open " + path);
    for (const auto& [u, v] : undirected_edges(g))
        out << u << ' ' << v << '\n';
    require(out.good(), "save_edge_list: write failed for " + path);
}

void save_features(const std::string& path, const NodeFeatures& x) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "save_features: cannot open " + path);
    out.write("A2QF", 4);
    const u32 n = static_cast<u32>(x.rows);
    const u32 f = static_cast<u32>(x.cols);
    out.write(reinterpret_cast<const char*>(&n), 4);
    out.write(reinterpret_cast<const char*>(&f), 4);
    std::vector<float> buf(x.data.size());
    for (std::size_t i = 0; i < buf.size(); ++i)
        buf[i] = static_cast<float>(x.data[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    require(out.good(), "save_features: write failed for " + path);
}

void save_split(const std::string& split_path, const std::string& labels_path,
                const DatasetSplit& split) {
    std::ofstream out(split_path);
    require(out.good(), "save_split: cannot open " + split_path);
    const auto write_line = [&out](const char* tag,
                                   const std::vector<i32>& ids) {
        out << tag;
        for (i32 id : ids) out << ' ' << id;
        out << '\n';
    };
    write_line("train:", split.train);
    write_line("val:", split.val);
    write_line("test:", split.test);
    require(out.good(), "save_split: write failed for " + split_path);
    std::ofstream lout(labels_path);
    require(lout.good(), "save_split: cannot open " + labels_path);
    for (i32 l : split.labels) lout << l << '\n';
    require(lout.good(), "save_split: write failed for " + labels_path);
}

// ============================================================================
// Synthetic graphs
// ============================================================================

namespace {

struct GrowthState {
    std::vector<double> weight;    // degree + initial attractiveness, floored
    std::vector<i64> degree;
    double weight_sum = 0.0;
    double attract = 0.0;
    static constexpr double kFloor = 0.05;

    void init(i32 n, double attractiveness) {
        attract = attractiveness;
        weight.assign(n, 0.0);
        degree.assign(n, 0);
    }
    double node_weight(i64 deg) const {
        return std::max(static_cast<double>(deg) + attract, kFloor);
    }
    void activate(i32 u) {
        weight[u] = node_weight(degree[u]);
        weight_sum += weight[u];
    }
    void bump(i32 u) {
        degree[u] += 1;
        const double w = node_weight(degree[u]);
        weight_sum += w - weight[u];
        weight[u] = w;
    }
    // Roulette draw over the first `active` nodes.
    i32 draw(Rng& rng, i32 active) const {
        double target = rng.uniform() * weight_sum;
        for (i32 u = 0; u < active; ++u) {
            target -= weight[u];
            if (target <= 0.0) return u;
        }
        return active - 1;
    }
};

struct EdgeSet {
    std::vector<std::pair<i32, i32>> list;
    std::vector<std::vector<i32>> adj;

    explicit EdgeSet(i32 n) : adj(n) {}
    bool has(i32 u, i32 v) const {
        const auto& row = adj[u];
        return std::find(row.begin(), row.end(), v) != row.end();
    }
    void add(i32 u, i32 v) {
        list.emplace_back(u, v);
        adj[u].push_back(v);
        adj[v].push_back(u);
    }
};

// Shared growth loop for synth_powerlaw and synth_dataset. label/homophily
// are optional: with homophily = 1 every target weight is degree-based only.
std::vector<std::pair<i32, i32>> grow_powerlaw(
    i32 n, double exponent, i32 m, Rng& rng, const std::vector<i32>* labels,
    double homophily, i64 target_edges) {
    require(n > 2, "synth: need at least 3 nodes");
    require(exponent > 1.0, "synth: exponent must exceed 1");
    require(m >= 1 && m < n, "synth: edges_per_node out of range");

    GrowthState st;
    st.init(n, (exponent - 3.0) * static_cast<double>(m));
    EdgeSet es(n);

    const i32 seed_nodes = m + 1;
    for (i32 u = 0; u < seed_nodes; ++u) {
        const i32 v = (u + 1) % seed_nodes;
        if (!es.has(u, v)) {
            es.add(u, v);
            st.bump(u);
            st.bump(v);
        }
    }
    for (i32 u = 0; u < seed_nodes; ++u) st.activate(u);

    const auto same_class_boost = [&](i32 t, i32 u) {
        if (!labels || homophily == 1.0) return 1.0;
        return (*labels)[t] == (*labels)[u] ? homophily : 1.0;
    };

    for (i32 t = seed_nodes; t < n; ++t) {
        i32 added = 0;
        i32 attempts = 0;
        while (added < m && attempts < 64 * m) {
            ++attempts;
            if (target_edges > 0 &&
                static_cast<i64>(es.list.size()) >= target_edges)
                break;
            i32 u = st.draw(rng, t);
            if (labels && homophily != 1.0) {
                // Biased re-draw: keep a candidate with probability
                // proportional to its class boost.
                const double boost = same_class_boost(t, u);
                const double hmax = homophily;
                if (rng.uniform() * hmax > boost) continue;
            }
            if (u == t || es.has(t, u)) continue;
            es.add(t, u);
            st.bump(t);
            st.bump(u);
            ++added;
        }
        // Fallback for pathological weight configurations: connect to the
        // lowest-index free node so the graph stays usable.
        if (added == 0 &&
            (target_edges <= 0 ||
             static_cast<i64>(es.list.size()) < target_edges)) {
            for (i32 u = 0; u < t; ++u)
                if (!es.has(t, u)) {
                    es.add(t, u);
                    st.bump(t);
                    st.bump(u);
                    break;
                }
        }
        st.activate(t);
    }

    // Top up with degree-biased (and class-biased) extra edges until the
    // exact target is met.
    if (target_edges > 0) {
        require(target_edges >= static_cast<i64>(es.list.size()),
                "synth: target edge count below generated minimum");
        i64 guard = 0;
        while (static_cast<i64>(es.list.size()) < target_edges) {
            require(++guard < 1000 * target_edges,
                    "synth: cannot reach target edge count");
            const i32 u = st.draw(rng, n);
            const i32 v = st.draw(rng, n);
            if (u == v || es.has(u, v)) continue;
            if (labels && homophily != 1.0) {
                const double boost = same_class_boost(u, v);
                if (rng.uniform() * homophily > boost) continue;
            }
            es.add(u, v);
            st.bump(u);
            st.bump(v);
        }
    }
    return es.list;
}

} // namespace

CsrGraph synth_powerlaw(i32 n, double exponent, u64 seed, i32 edges_per_node) {
    Rng rng(seed);
    const auto edges =
        grow_powerlaw(n, exponent, edges_per_node, rng, nullptr, 1.0, 0);
    return csr_from_edges(n, edges, true);
}

SynthSpec cora_scale_spec(u64 seed) {
    SynthSpec spec;
    spec.n = 2708;
    spec.exponent = 2.6;
    spec.classes = 7;
    spec.feat_dim = 1433;
    spec.edges_per_node = 1;
    spec.homophily = 12.0;
    spec.topic_on = 0.08;
    spec.topic_off = 0.004;
    spec.target_undirected_edges = 5278;
    spec.train_per_class = 20;
    spec.val_count = 500;
    spec.test_count = 1000;
    spec.seed = seed;
    return spec;
}

Dataset synth_dataset(const SynthSpec& spec) {
    require(spec.classes >= 2, "synth_dataset: need at least 2 classes");
    require(spec.feat_dim >= spec.classes,
            "synth_dataset: feature dim must cover the classes");
    require(spec.train_per_class >= 1, "synth_dataset: empty train split");
    Rng rng(spec.seed);

    std::vector<i32> labels(spec.n);
    for (i32 i = 0; i < spec.n; ++i)
        labels[i] = static_cast<i32>(rng.uniform_index(spec.classes));

    const auto edges =
        grow_powerlaw(spec.n, spec.exponent, spec.edges_per_node, rng, &labels,
                      spec.homophily, spec.target_undirected_edges);

    Dataset d;
    d.graph = csr_from_edges(spec.n, edges, true);

    // Binary topic-block features: each class owns a contiguous block of
    // feature columns that fires with higher probability.
    d.features = NodeFeatures(spec.n, spec.feat_dim, 0.0);
    const i32 block = spec.feat_dim / spec.classes;
    for (i32 i = 0; i < spec.n; ++i) {
        const i32 lo = labels[i] * block;
        const i32 hi = (labels[i] == spec.classes - 1) ? spec.feat_dim
                                                       : lo + block;
        for (i32 j = 0; j < spec.feat_dim; ++j) {
            const double p =
                (j >= lo && j < hi) ? spec.topic_on : spec.topic_off;
            if (rng.uniform() < p) d.features.at(i, j) = 1.0;
        }
    }

    // Per-class training nodes, then val/test from the shuffled remainder.
    std::vector<i32> order(spec.n);
    std::iota(order.begin(), order.end(), 0);
    for (i32 i = spec.n - 1; i > 0; --i) {
        const i32 j = static_cast<i32>(rng.uniform_index(i + 1));
        std::swap(order[i], order[j]);
    }
    DatasetSplit& s = d.split;
    s.labels = labels;
    s.num_classes = spec.classes;
    std::vector<i32> taken_per_class(spec.classes, 0);
    std::vector<std::uint8_t> used(spec.n, 0);
    for (i32 id : order) {
        if (taken_per_class[labels[id]] < spec.train_per_class) {
            s.train.push_back(id);
            ++taken_per_class[labels[id]];
            used[id] = 1;
        }
    }
    require(static_cast<i64>(s.train.size()) ==
                static_cast<i64>(spec.train_per_class) * spec.classes,
            "synth_dataset: some class has too few nodes for the train split");
    std::vector<i32> rest;
    for (i32 id : order)
        if (!used[id]) rest.push_back(id);
    i32 val_count = spec.val_count > 0
                        ? spec.val_count
                        : static_cast<i32>(rest.size() / 2);
    i32 test_count = spec.test_count > 0
                         ? spec.test_count
                         : static_cast<i32>(rest.size()) - val_count;
    require(val_count + test_count <= static_cast<i32>(rest.size()),
            "synth_dataset: val/test sizes exceed remaining nodes");
    s.val.assign(rest.begin(), rest.begin() + val_count);
    s.test.assign(rest.begin() + val_count,
                  rest.begin() + val_count + test_count);
    return d;
}

} // namespace a2q
