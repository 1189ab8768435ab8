// Copyright 2026 The Duet Authors
// SPDX-License-Identifier: Apache-2.0
//
// TensorFile binary format: magic "JCT1", u32 LE rank, rank x u32 LE dims,
// then product(dims) x f64 LE values, row-major.

#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "duet/tensor.hpp"

namespace duet {

static_assert(std::endian::native == std::endian::little,
              "TensorFile I/O assumes a little-endian host");

namespace detail {

inline void io_error(const std::string& what, std::uint64_t offset) {
    std::ostringstream os;
    os << what << " at offset " << offset;
    throw std::runtime_error(os.str());
}

template <class T>
void write_raw(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_raw(std::istream& in, T& v, std::uint64_t offset, const char* what) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) {
        io_error(std::string("truncated ") + what, offset);
    }
}

}  // namespace detail

inline void write_tensor(std::ostream& out, const Tensor& t) {
    out.write("JCT1", 4);
    detail::write_raw(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) {
        detail::write_raw(out, static_cast<std::uint32_t>(d));
    }
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
}

inline Tensor read_tensor(std::istream& in, std::uint64_t base_offset = 0) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "JCT1") {
        detail::io_error("bad TensorFile magic", base_offset);
    }
    std::uint32_t rank = 0;
    detail::read_raw(in, rank, base_offset + 4, "TensorFile rank");
    if (rank == 0 || rank > 8) {
        detail::io_error("invalid TensorFile rank", base_offset + 4);
    }
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        std::uint32_t d = 0;
        detail::read_raw(in, d, base_offset + 8 + 4 * i, "TensorFile dims");
        if (d == 0) {
            detail::io_error("zero TensorFile dimension", base_offset + 8 + 4 * i);
        }
        shape[i] = d;
        n *= d;
    }
    std::vector<double> data(n);
    std::uint64_t data_offset = base_offset + 8 + 4 * rank;
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) {
        detail::io_error("truncated TensorFile data", data_offset);
    }
    return Tensor::from_data(std::move(shape), std::move(data));
}

inline void save_tensor_file(const std::string& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open for writing: " + path);
    }
    write_tensor(out, t);
    if (!out) {
        throw std::runtime_error("write failed: " + path);
    }
}

inline Tensor load_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open TensorFile: " + path);
    }
    return read_tensor(in);
}

}  // namespace duet
