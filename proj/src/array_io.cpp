#include "r2bd/array_io.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <iterator>

#include "r2bd/error.hpp"
#include "r2bd/rng.hpp"

namespace r2bd {

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& buf, std::size_t& pos) {
    require(pos + 4 <= buf.size(), "truncated array file");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), "cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace

void write_array_f32(const std::filesystem::path& path, const Tensor& t) {
    std::string buf{"R2BA"};
    buf.push_back(1);
    buf.push_back('L');
    buf.push_back('f');
    buf.push_back(0);
    put_u32(buf, static_cast<std::uint32_t>(t.ndim()));
    for (int d : t.shape()) put_u32(buf, static_cast<std::uint32_t>(d));
    for (double v : t.storage()) put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(os), "cannot write " + path.string());
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    require(static_cast<bool>(os), "failed writing " + path.string());
}

Tensor read_array_f32(const std::filesystem::path& path) {
    const std::string buf = slurp(path);
    require(buf.size() >= 12 && buf.compare(0, 4, "R2BA") == 0, "not an array file: " + path.string());
    require(buf[4] == 1, "unsupported array file version in " + path.string());
    require(buf[5] == 'L', "unsupported endianness tag in " + path.string());
    require(buf[6] == 'f', "unsupported dtype tag in " + path.string());
    std::size_t pos = 8;
    const std::uint32_t rank = get_u32(buf, pos);
    require(rank <= 8, "implausible rank in " + path.string());
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(get_u32(buf, pos));
    Tensor t(shape);
    require(buf.size() == pos + 4 * t.size(), "array payload size mismatch in " + path.string());
    for (double& v : t.storage()) v = static_cast<double>(std::bit_cast<float>(get_u32(buf, pos)));
    return t;
}

std::string file_hash(const std::filesystem::path& path) {
    const std::string buf = slurp(path);
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a(buf)));
    return hex;
}

}  // namespace r2bd
