#include "r2bd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "r2bd/error.hpp"

namespace r2bd {

namespace {

constexpr char kMagic[8] = {'R', '2', 'B', 'D', 'C', 'K', 'P', 'T'};

class Writer {
public:
    explicit Writer(std::ostream& os) : os_(os) {}
    void u32(std::uint32_t v) { uint_le(v, 4); }
    void u64(std::uint64_t v) { uint_le(v, 8); }
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str32(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        os_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    void bytes(const char* p, std::size_t n) { os_.write(p, static_cast<std::streamsize>(n)); }

private:
    void uint_le(std::uint64_t v, int n) {
        char buf[8];
        for (int i = 0; i < n; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        os_.write(buf, n);
    }
    std::ostream& os_;
};

class Reader {
public:
    explicit Reader(std::istream& is) : is_(is) {}
    std::uint64_t uint_le(int n) {
        unsigned char buf[8];
        is_.read(reinterpret_cast<char*>(buf), n);
        require(static_cast<bool>(is_), "truncated checkpoint");
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
        return v;
    }
    std::uint32_t u32() { return static_cast<std::uint32_t>(uint_le(4)); }
    std::uint64_t u64() { return uint_le(8); }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(std::size_t n) {
        require(n < (1ULL << 32), "implausible string length in checkpoint");
        std::string s(n, '\0');
        is_.read(s.data(), static_cast<std::streamsize>(n));
        require(static_cast<bool>(is_), "truncated checkpoint");
        return s;
    }

private:
    std::istream& is_;
};

}  // namespace

const Tensor& Checkpoint::array(const std::string& name) const {
    for (const auto& [n, t] : arrays)
        if (n == name) return t;
    throw ValidationError("checkpoint of kind '" + kind + "' has no array '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.first == name) return true;
    return false;
}

std::vector<std::pair<std::string, Tensor>> Checkpoint::group(const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    const std::string p = prefix + ".";
    for (const auto& [n, t] : arrays)
        if (n.rfind(p, 0) == 0) out.emplace_back(n.substr(p.size()), t);
    return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(os), "cannot open checkpoint for writing: " + path.string());
    Writer w(os);
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kCheckpointFormatVersion);
    w.str32(ckpt.kind);
    const std::string cfg = ckpt.config.dump();
    w.u64(cfg.size());
    w.bytes(cfg.data(), cfg.size());
    w.u32(static_cast<std::uint32_t>(ckpt.arrays.size()));
    for (const auto& [name, t] : ckpt.arrays) {
        w.str32(name);
        w.u32(static_cast<std::uint32_t>(t.ndim()));
        for (int d : t.shape()) w.i32(d);
        for (double v : t.storage()) w.f64(v);
    }
    require(static_cast<bool>(os), "failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), "cannot open checkpoint: " + path.string());
    Reader r(is);
    const std::string magic = r.str(sizeof kMagic);
    require(std::memcmp(magic.data(), kMagic, sizeof kMagic) == 0, "not a checkpoint file: " + path.string());
    const std::uint32_t version = r.u32();
    require(version == kCheckpointFormatVersion,
            "unsupported checkpoint format version " + std::to_string(version) + " in " + path.string());
    Checkpoint ckpt;
    ckpt.kind = r.str(r.u32());
    ckpt.config = nlohmann::json::parse(r.str(r.u64()));
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str(r.u32());
        const std::uint32_t rank = r.u32();
        require(rank <= 8, "implausible array rank in checkpoint");
        Shape shape(rank);
        for (auto& d : shape) d = r.i32();
        Tensor t(shape);
        for (double& v : t.storage()) v = r.f64();
        ckpt.arrays.emplace_back(std::move(name), std::move(t));
    }
    return ckpt;
}

}  // namespace r2bd
