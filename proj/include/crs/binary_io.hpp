#pragma once

// Little-endian binary checkpoint primitives shared by every on-disk model
// artifact. Each file starts with a 4-byte magic and a u32 format version.

#include "crs/neural.hpp"

#include <cstdint>
#include <fstream>
#include <string>

namespace crs::io {

class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

class BinaryWriter {
public:
    BinaryWriter(const std::string& path, std::string_view magic, std::uint32_t version);

    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void i64(std::int64_t v);
    void f64(double v);
    void str(std::string_view s);
    void matrix(const nn::Matrix& m);
    /// Names, shapes and values (Adam moments are not persisted).
    void params(const nn::ParamStore& store);
    void close();

private:
    std::ofstream out_;
    std::string path_;
};

class BinaryReader {
public:
    /// Throws FormatError when the magic differs or the version is newer than
    /// `max_version`.
    BinaryReader(const std::string& path, std::string_view magic, std::uint32_t max_version);

    std::uint32_t version() const { return version_; }
    std::uint32_t u32();
    std::uint64_t u64();
    std::int64_t i64();
    double f64();
    std::string str();
    nn::Matrix matrix();
    nn::ParamStore params();

private:
    void read(void* dst, std::size_t n);
    std::ifstream in_;
    std::string path_;
    std::uint32_t version_ = 0;
};

}  // namespace crs::io
