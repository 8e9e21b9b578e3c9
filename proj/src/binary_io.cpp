#include "crs/binary_io.hpp"

namespace crs::io {

BinaryWriter::BinaryWriter(const std::string& path, std::string_view magic,
                           std::uint32_t version)
    : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
    if (!out_) throw std::runtime_error("cannot open '" + path + "' for writing");
    if (magic.size() != 4) throw std::invalid_argument("magic must be 4 bytes");
    out_.write(magic.data(), 4);
    u32(version);
}

void BinaryWriter::u32(std::uint32_t v) { out_.write(reinterpret_cast<const char*>(&v), 4); }
void BinaryWriter::u64(std::uint64_t v) { out_.write(reinterpret_cast<const char*>(&v), 8); }
void BinaryWriter::i64(std::int64_t v) { out_.write(reinterpret_cast<const char*>(&v), 8); }
void BinaryWriter::f64(double v) { out_.write(reinterpret_cast<const char*>(&v), 8); }

void BinaryWriter::str(std::string_view s) {
    u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void BinaryWriter::matrix(const nn::Matrix& m) {
    i64(m.rows());
    i64(m.cols());
    out_.write(reinterpret_cast<const char*>(m.data()),
               static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())));
}

void BinaryWriter::params(const nn::ParamStore& store) {
    u64(store.size());
    for (const auto& p : store) {
        str(p.name);
        matrix(p.value);
    }
}

void BinaryWriter::close() {
    out_.close();
    if (!out_) throw std::runtime_error("error while writing '" + path_ + "'");
}

BinaryReader::BinaryReader(const std::string& path, std::string_view magic,
                           std::uint32_t max_version)
    : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw std::runtime_error("cannot open '" + path + "'");
    char m[4];
    read(m, 4);
    if (std::string_view(m, 4) != magic) {
        throw FormatError("'" + path + "' is not a " + std::string(magic) + " file");
    }
    version_ = u32();
    if (version_ == 0 || version_ > max_version) {
        throw FormatError("'" + path + "' has unsupported version " + std::to_string(version_));
    }
}

void BinaryReader::read(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!in_) throw FormatError("truncated file '" + path_ + "'");
}

std::uint32_t BinaryReader::u32() {
    std::uint32_t v;
    read(&v, 4);
    return v;
}
std::uint64_t BinaryReader::u64() {
    std::uint64_t v;
    read(&v, 8);
    return v;
}
std::int64_t BinaryReader::i64() {
    std::int64_t v;
    read(&v, 8);
    return v;
}
double BinaryReader::f64() {
    double v;
    read(&v, 8);
    return v;
}

std::string BinaryReader::str() {
    const auto n = u64();
    if (n > (1ULL << 30)) throw FormatError("implausible string length in '" + path_ + "'");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
}

nn::Matrix BinaryReader::matrix() {
    const auto rows = i64();
    const auto cols = i64();
    if (rows < 0 || cols < 0 || rows * cols > (1LL << 32)) {
        throw FormatError("implausible matrix shape in '" + path_ + "'");
    }
    nn::Matrix m(rows, cols);
    read(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    return m;
}

nn::ParamStore BinaryReader::params() {
    nn::ParamStore store;
    const auto n = u64();
    for (std::uint64_t i = 0; i < n; ++i) {
        auto name = str();
        auto value = matrix();
        const auto idx = store.add(name, value.rows(), value.cols());
        store[idx].value = std::move(value);
    }
    return store;
}

}  // namespace crs::io
