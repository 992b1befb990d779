#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ginv/tensor.hpp"

namespace ginv {

/// Malformed or unsupported file contents.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ChecksumError : public FormatError {
public:
    using FormatError::FormatError;
};

/// File could not be opened, read or written.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

static_assert(std::endian::native == std::endian::little, "archive encoding assumes a little-endian host");

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

/// Little-endian tensor container shared by bundles, ground-truth files and attack results:
///
///   magic[4] | u32 version | u32 batch_size | u32 flags
///   u32 spec_len | spec bytes
///   u32 name_count | (u32 len | bytes) * name_count
///   u32 tensor_count | (u32 name_index | u32 rank | u32 dims[rank] | f64 data[]) * tensor_count
///   u32 crc32 of everything before it
struct Archive {
    std::string magic;
    std::uint32_t version = 1;
    std::uint32_t batch_size = 0;
    std::uint32_t flags = 0;
    std::string spec_text;
    std::vector<NamedTensor> tensors;

    const Tensor* find(std::string_view name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t.value;
        return nullptr;
    }

    const Tensor& get(std::string_view name) const {
        if (const Tensor* t = find(name)) return *t;
        throw FormatError(magic + " archive: missing tensor '" + std::string(name) + "'");
    }
};

namespace detail {

class ByteWriter {
public:
    void u32(std::uint32_t v) { raw(&v, 4); }
    void f64(double v) { raw(&v, 8); }
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void raw(const void* p, std::size_t n) {
        auto b = static_cast<const std::uint8_t*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    std::vector<std::uint8_t> bytes;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> b) : bytes_(b) {}
    std::uint32_t u32() {
        std::uint32_t v;
        copy(&v, 4);
        return v;
    }
    double f64() {
        double v;
        copy(&v, 8);
        return v;
    }
    std::string str() {
        const auto n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(&bytes_[pos_]), n);
        pos_ += n;
        return s;
    }
    std::size_t offset() const { return pos_; }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (n > bytes_.size() - pos_)
            throw FormatError("unexpected end of data at offset " + std::to_string(pos_));
    }
    void copy(void* out, std::size_t n) {
        need(n);
        std::memcpy(out, &bytes_[pos_], n);
        pos_ += n;
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_archive(const Archive& a) {
    if (a.magic.size() != 4) throw std::invalid_argument("archive magic must be 4 bytes");
    detail::ByteWriter w;
    w.raw(a.magic.data(), 4);
    w.u32(a.version);
    w.u32(a.batch_size);
    w.u32(a.flags);
    w.str(a.spec_text);
    w.u32(static_cast<std::uint32_t>(a.tensors.size()));
    for (const auto& t : a.tensors) w.str(t.name);
    w.u32(static_cast<std::uint32_t>(a.tensors.size()));
    for (std::uint32_t i = 0; i < a.tensors.size(); ++i) {
        const Tensor& v = a.tensors[i].value;
        w.u32(i);
        w.u32(static_cast<std::uint32_t>(v.dim()));
        for (auto d : v.shape()) w.u32(static_cast<std::uint32_t>(d));
        for (double x : v.data()) w.f64(x);
    }
    w.u32(crc32_of(w.bytes));
    return std::move(w.bytes);
}

inline Archive decode_archive(std::span<const std::uint8_t> bytes, std::string_view magic, std::uint32_t max_version) {
    if (bytes.size() < 8) throw ChecksumError("file too short to hold a header and checksum");
    if (std::string_view(reinterpret_cast<const char*>(bytes.data()), 4) != magic)
        throw FormatError("bad magic at offset 0: expected '" + std::string(magic) + "'");
    std::uint32_t stored;
    std::memcpy(&stored, &bytes[bytes.size() - 4], 4);
    const auto body = bytes.first(bytes.size() - 4);
    if (crc32_of(body) != stored) throw ChecksumError("checksum mismatch (file truncated or corrupted)");

    detail::ByteReader r(body.subspan(4));
    Archive a;
    a.magic = std::string(magic);
    a.version = r.u32();
    if (a.version == 0 || a.version > max_version)
        throw FormatError("unknown " + a.magic + " version " + std::to_string(a.version));
    a.batch_size = r.u32();
    a.flags = r.u32();
    a.spec_text = r.str();
    std::vector<std::string> names(r.u32());
    for (auto& n : names) n = r.str();
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto idx = r.u32();
        if (idx >= names.size()) throw FormatError("tensor name index out of range at offset " + std::to_string(r.offset()));
        Shape shape(r.u32());
        for (auto& d : shape) d = r.u32();
        std::vector<double> data(shape_numel(shape));
        for (auto& x : data) x = r.f64();
        a.tensors.push_back({names[idx], Tensor(std::move(shape), std::move(data))});
    }
    if (!r.done()) throw FormatError("trailing bytes before checksum");
    return a;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path + "'");
}

inline void save_archive(const Archive& a, const std::string& path) { write_file(path, encode_archive(a)); }

inline Archive load_archive(const std::string& path, std::string_view magic, std::uint32_t max_version = 1) {
    return decode_archive(read_file(path), magic, max_version);
}

}  // namespace ginv
