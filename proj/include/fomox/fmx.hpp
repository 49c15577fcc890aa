#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace fomox::fmx {

// Little-endian binary container primitives shared by the model checkpoint
// formats. Layout per file: 4 magic bytes, format version u32, one
// length-prefixed (u64) UTF-8 JSON config block, then a sequence of tensors:
// name (u64 length + bytes), rank u32, extents u64[], payload f64[]
// row-major. All reads throw LoadError on truncation or malformed fields.

void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
void write_bytes(std::ostream& out, const char* data, std::size_t n);
void write_string(std::ostream& out, const std::string& s); // u64 length prefix

std::uint32_t read_u32(std::istream& in, const std::string& what);
std::uint64_t read_u64(std::istream& in, const std::string& what);
double read_f64(std::istream& in, const std::string& what);
std::string read_string(std::istream& in, const std::string& what);

struct NamedTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> data;
};

void write_tensor(std::ostream& out, const std::string& name,
                  const std::vector<std::size_t>& shape, const std::vector<double>& data);
NamedTensor read_tensor(std::istream& in);

// True when the stream is exactly at end-of-file (peek fails).
bool at_eof(std::istream& in);

// FNV-1a hash of a byte string; used to fingerprint serialized checkpoints.
std::uint64_t fnv1a(const std::string& bytes);

} // namespace fomox::fmx
