// SPDX-License-Identifier: Apache-2.0

/// \file serialize.hpp
/// Little-endian binary readers/writers for the checkpoint and dataset
/// formats. Readers fail with the byte offset of the first bad read.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cggm/tensor.hpp"

namespace cggm {

class ParseError : public Error {
public:
    ParseError(const std::string& what, std::uint64_t offset)
        : Error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    std::uint64_t offset() const { return offset_; }

private:
    std::uint64_t offset_;
};

class UnsupportedVersionError : public Error {
public:
    UnsupportedVersionError(std::uint16_t got, std::uint16_t want)
        : Error("unsupported file version " + std::to_string(got) + ", expected " +
                std::to_string(want)) {}
};

class IoError : public Error {
public:
    using Error::Error;
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

}  // namespace detail

class BinaryWriter {
public:
    explicit BinaryWriter(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw IoError("cannot open '" + path + "' for writing");
        path_ = path;
    }

    void magic(const char tag[5]) { out_.write(tag, 4); }
    void u16(std::uint16_t v) { raw(&v, sizeof v); }
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void u64(std::uint64_t v) { raw(&v, sizeof v); }
    void f64(double v) { raw(&v, sizeof v); }

    void f64_array(const std::vector<double>& values) {
        if (!values.empty()) raw(values.data(), values.size() * sizeof(double));
    }

    /// u32 rank, u32 per dimension, then row-major f64 payload.
    void shaped_f64(const Shape& shape, const std::vector<double>& values) {
        u32(static_cast<std::uint32_t>(shape.size()));
        for (std::size_t d : shape) u32(static_cast<std::uint32_t>(d));
        f64_array(values);
    }

    void close() {
        out_.close();
        if (!out_) throw IoError("write to '" + path_ + "' failed");
    }

private:
    void raw(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    }
    std::ofstream out_;
    std::string path_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::string& path) : in_(path, std::ios::binary) {
        if (!in_) throw IoError("cannot open '" + path + "' for reading");
    }

    void expect_magic(const char tag[5]) {
        char buf[4];
        raw(buf, 4, "magic");
        if (std::memcmp(buf, tag, 4) != 0)
            throw ParseError(std::string("bad magic, expected \"") + tag + "\"", offset_ - 4);
    }

    std::uint16_t u16() { return read_pod<std::uint16_t>("u16"); }
    std::uint32_t u32() { return read_pod<std::uint32_t>("u32"); }
    std::uint64_t u64() { return read_pod<std::uint64_t>("u64"); }
    double f64() { return read_pod<double>("f64"); }

    std::vector<double> f64_array(std::size_t n) {
        std::vector<double> out(n);
        if (n) raw(out.data(), n * sizeof(double), "f64 array");
        return out;
    }

    std::pair<Shape, std::vector<double>> shaped_f64() {
        std::uint32_t rank = u32();
        if (rank == 0 || rank > 8) throw ParseError("implausible tensor rank", offset_ - 4);
        Shape shape(rank);
        for (auto& d : shape) {
            d = u32();
            if (d == 0) throw ParseError("zero dimension in stored shape", offset_ - 4);
        }
        return {shape, f64_array(numel(shape))};
    }

    std::uint64_t offset() const { return offset_; }

private:
    template <typename T>
    T read_pod(const char* what) {
        T v;
        raw(&v, sizeof v, what);
        return v;
    }

    void raw(void* p, std::size_t n, const char* what) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw ParseError(std::string("truncated file while reading ") + what, offset_);
        offset_ += n;
    }

    std::ifstream in_;
    std::uint64_t offset_ = 0;
};

}  // namespace cggm
