#include "fomox/fmx.hpp"

#include <bit>
#include <istream>
#include <ostream>

#include "fomox/errors.hpp"

namespace fomox::fmx {

void write_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 8);
}

void write_f64(std::ostream& out, double v) {
    write_u64(out, std::bit_cast<std::uint64_t>(v));
}

void write_bytes(std::ostream& out, const char* data, std::size_t n) {
    out.write(data, static_cast<std::streamsize>(n));
}

void write_string(std::ostream& out, const std::string& s) {
    write_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::istream& in, const std::string& what) {
    char b[4];
    if (!in.read(b, 4)) throw LoadError("truncated file while reading " + what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
}

std::uint64_t read_u64(std::istream& in, const std::string& what) {
    char b[8];
    if (!in.read(b, 8)) throw LoadError("truncated file while reading " + what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
}

double read_f64(std::istream& in, const std::string& what) {
    return std::bit_cast<double>(read_u64(in, what));
}

std::string read_string(std::istream& in, const std::string& what) {
    std::uint64_t n = read_u64(in, what + " length");
    if (n > (1ull << 32))
        throw LoadError("implausible length " + std::to_string(n) + " for " + what);
    std::string s(n, '\0');
    if (n && !in.read(s.data(), static_cast<std::streamsize>(n)))
        throw LoadError("truncated file while reading " + what);
    return s;
}

void write_tensor(std::ostream& out, const std::string& name,
                  const std::vector<std::size_t>& shape, const std::vector<double>& data) {
    write_string(out, name);
    write_u32(out, static_cast<std::uint32_t>(shape.size()));
    std::size_t total = 1;
    for (std::size_t e : shape) {
        write_u64(out, e);
        total *= e;
    }
    if (total != data.size())
        throw ContractError("write_tensor: extents of '" + name + "' do not match payload");
    for (double v : data) write_f64(out, v);
}

NamedTensor read_tensor(std::istream& in) {
    NamedTensor t;
    t.name = read_string(in, "tensor name");
    std::uint32_t rank = read_u32(in, "rank of '" + t.name + "'");
    if (rank > 8) throw LoadError("implausible rank for tensor '" + t.name + "'");
    std::size_t total = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        auto e = static_cast<std::size_t>(read_u64(in, "extent of '" + t.name + "'"));
        t.shape.push_back(e);
        total *= e;
    }
    if (total > (1ull << 30)) throw LoadError("implausible size for tensor '" + t.name + "'");
    t.data.resize(total);
    for (std::size_t i = 0; i < total; ++i)
        t.data[i] = read_f64(in, "payload of '" + t.name + "'");
    return t;
}

bool at_eof(std::istream& in) {
    return in.peek() == std::istream::traits_type::eof();
}

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace fomox::fmx
