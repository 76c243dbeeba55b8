#include "a2q/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace a2q {

namespace {

constexpr char kMagic[4] = {'A', '2', 'Q', 'C'};
constexpr u32 kVersion = 1;

u64 fnv1a(const void* data, std::size_t n, u64 h = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

// ============================================================================
// Little-endian primitives
// ============================================================================

struct Writer {
    std::ofstream out;
    explicit Writer(const std::string& path)
        : out(path, std::ios::binary) {
        require(out.good(), "checkpoint: cannot open for writing: " + path);
    }
    void bytes(const void* p, std::size_t n) {
        out.write(static_cast<const char*>(p),
                  static_cast<std::streamsize>(n));
    }
    void u32v(u32 v) { bytes(&v, 4); }
    void u64v(u64 v) { bytes(&v, 8); }
    void f64(double v) { bytes(&v, 8); }
    void u8(bool v) {
        const unsigned char b = v ? 1 : 0;
        bytes(&b, 1);
    }
    void vec(const std::vector<double>& v) {
        u64v(v.size());
        if (!v.empty()) bytes(v.data(), v.size() * 8);
    }
    void str(const std::string& s) {
        u32v(static_cast<u32>(s.size()));
        bytes(s.data(), s.size());
    }
};

struct Reader {
    std::ifstream in;
    explicit Reader(const std::string& path)
        : in(path, std::ios::binary) {
        require(in.good(), "checkpoint: cannot open: " + path);
    }
    void bytes(void* p, std::size_t n) {
        in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        require(in.gcount() == static_cast<std::streamsize>(n),
                "checkpoint: truncated file");
    }
    u32 u32v() {
        u32 v;
        bytes(&v, 4);
        return v;
    }
    u64 u64v() {
        u64 v;
        bytes(&v, 8);
        return v;
    }
    double f64() {
        double v;
        bytes(&v, 8);
        return v;
    }
    bool u8() {
        unsigned char b;
        bytes(&b, 1);
        return b != 0;
    }
    std::vector<double> vec() {
        const u64 n = u64v();
        require(n < (1ull << 32), "checkpoint: implausible vector length");
        std::vector<double> v(n);
        if (n) bytes(v.data(), n * 8);
        return v;
    }
    std::string str() {
        const u32 n = u32v();
        require(n < (1u << 20), "checkpoint: implausible string length");
        std::string s(n, '\0');
        if (n) bytes(s.data(), n);
        return s;
    }
};

void write_matrix(Writer& w, const Matrix& m) {
    w.u64v(m.rows);
    w.u64v(m.cols);
    if (!m.data.empty()) w.bytes(m.data.data(), m.data.size() * 8);
}

Matrix read_matrix(Reader& r) {
    const u64 rows = r.u64v();
    const u64 cols = r.u64v();
    require(rows < (1ull << 24) && cols < (1ull << 24),
            "checkpoint: implausible matrix shape");
    Matrix m(rows, cols);
    if (!m.data.empty()) r.bytes(m.data.data(), m.data.size() * 8);
    return m;
}

} // namespace

GraphFingerprint fingerprint(const CsrGraph& g) {
    GraphFingerprint fp;
    fp.num_nodes = static_cast<u64>(g.num_nodes);
    fp.nnz = static_cast<u64>(g.nnz());
    u64 h = fnv1a(g.row_ptr.data(), g.row_ptr.size() * sizeof(i64));
    h = fnv1a(g.col_idx.data(), g.col_idx.size() * sizeof(i32), h);
    fp.structure_hash = h;
    return fp;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    Writer w(path);
    w.bytes(kMagic, 4);
    w.u32v(kVersion);
    w.str(ckpt.config_hash);
    w.u64v(ckpt.graph.num_nodes);
    w.u64v(ckpt.graph.nnz);
    w.u64v(ckpt.graph.structure_hash);
    w.u8(ckpt.quantize_first_input);

    const ModelParams& m = ckpt.model;
    w.u32v(m.kind == ModelKind::gcn ? 0 : 1);
    w.u32v(static_cast<u32>(m.in_dim));
    w.u32v(static_cast<u32>(m.hidden_dim));
    w.u32v(static_cast<u32>(m.out_dim));
    w.u8(m.use_bn);
    w.u32v(static_cast<u32>(m.linears.size()));
    for (const LinearLayer& lin : m.linears) {
        write_matrix(w, lin.w);
        w.vec(lin.bias);
        w.vec(lin.w_step);
    }
    w.vec(m.gin_eps);
    w.u32v(static_cast<u32>(m.bns.size()));
    for (const BatchNorm& bn : m.bns) {
        w.vec(bn.gamma);
        w.vec(bn.beta);
        w.vec(bn.running_mean);
        w.vec(bn.running_var);
        w.f64(bn.momentum);
        w.f64(bn.eps);
    }
    w.u32v(static_cast<u32>(m.agg_steps.size()));
    for (const auto& s : m.agg_steps) w.vec(s);

    const QuantTable& qt = ckpt.qt;
    w.u32v(static_cast<u32>(qt.mode));
    w.f64(qt.uniform_bits);
    w.u32v(static_cast<u32>(qt.sites.size()));
    for (const SiteSpec& s : qt.sites) {
        w.u32v(static_cast<u32>(s.dim));
        w.u8(s.unsigned_range);
        w.u8(s.first_input);
    }
    if (qt.mode == QuantMode::nns_bank) {
        w.u32v(static_cast<u32>(qt.banks.size()));
        for (const ParamBank& b : qt.banks) {
            w.vec(b.steps);
            w.vec(b.bitwidths);
            w.u8(b.unsigned_range);
        }
    } else if (qt.mode != QuantMode::fp32) {
        w.u32v(static_cast<u32>(qt.steps.size()));
        for (std::size_t s = 0; s < qt.steps.size(); ++s) {
            w.vec(qt.steps[s]);
            w.vec(qt.bits[s]);
        }
    }
    require(w.out.good(), "checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    Reader r(path);
    char magic[4];
    r.bytes(magic, 4);
    require(std::memcmp(magic, kMagic, 4) == 0,
            "checkpoint: bad magic in " + path);
    const u32 version = r.u32v();
    require(version == kVersion,
            "checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ckpt;
    ckpt.config_hash = r.str();
    ckpt.graph.num_nodes = r.u64v();
    ckpt.graph.nnz = r.u64v();
    ckpt.graph.structure_hash = r.u64v();
    ckpt.quantize_first_input = r.u8();

    ModelParams& m = ckpt.model;
    m.kind = r.u32v() == 0 ? ModelKind::gcn : ModelKind::gin;
    m.in_dim = static_cast<i32>(r.u32v());
    m.hidden_dim = static_cast<i32>(r.u32v());
    m.out_dim = static_cast<i32>(r.u32v());
    m.use_bn = r.u8();
    const u32 nlin = r.u32v();
    require(nlin == 2 || nlin == 4, "checkpoint: unexpected layer count");
    for (u32 i = 0; i < nlin; ++i) {
        LinearLayer lin;
        lin.w = read_matrix(r);
        lin.bias = r.vec();
        lin.w_step = r.vec();
        m.linears.push_back(std::move(lin));
    }
    m.gin_eps = r.vec();
    const u32 nbn = r.u32v();
    for (u32 i = 0; i < nbn; ++i) {
        BatchNorm bn;
        bn.gamma = r.vec();
        bn.beta = r.vec();
        bn.running_mean = r.vec();
        bn.running_var = r.vec();
        bn.momentum = r.f64();
        bn.eps = r.f64();
        m.bns.push_back(std::move(bn));
    }
    const u32 nagg = r.u32v();
    for (u32 i = 0; i < nagg; ++i) m.agg_steps.push_back(r.vec());

    QuantTable& qt = ckpt.qt;
    qt.mode = static_cast<QuantMode>(r.u32v());
    qt.uniform_bits = r.f64();
    const u32 nsites = r.u32v();
    for (u32 i = 0; i < nsites; ++i) {
        SiteSpec s;
        s.dim = static_cast<i32>(r.u32v());
        s.unsigned_range = r.u8();
        s.first_input = r.u8();
        qt.sites.push_back(s);
    }
    if (qt.mode == QuantMode::nns_bank) {
        const u32 nb = r.u32v();
        for (u32 i = 0; i < nb; ++i) {
            ParamBank b;
            b.steps = r.vec();
            b.bitwidths = r.vec();
            b.unsigned_range = r.u8();
            bank_refresh(b);
            qt.banks.push_back(std::move(b));
        }
    } else if (qt.mode != QuantMode::fp32) {
        const u32 ns = r.u32v();
        qt.steps.resize(ns);
        qt.bits.resize(ns);
        for (u32 s = 0; s < ns; ++s) {
            qt.steps[s] = r.vec();
            qt.bits[s] = r.vec();
        }
    }
    return ckpt;
}

} // namespace a2q
