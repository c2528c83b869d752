#pragma once

// Little-endian primitive encoding shared by the dataset and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace tdvit {

class FormatError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class ByteWriter {
   public:
    explicit ByteWriter(std::ostream& out) : out_(out) {}

    template <typename U>
        requires std::is_unsigned_v<U>
    void put(U v) {
        char buf[sizeof(U)];
        for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
        out_.write(buf, sizeof(U));
    }
    void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
    void put_f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
    void put_bytes(const std::string& s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }

   private:
    std::ostream& out_;
};

class ByteReader {
   public:
    ByteReader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

    template <typename U>
        requires std::is_unsigned_v<U>
    U get() {
        unsigned char buf[sizeof(U)];
        read(reinterpret_cast<char*>(buf), sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
        return v;
    }
    float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
    double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
    std::string get_bytes(std::size_t n) {
        std::string s(n, '\0');
        read(s.data(), n);
        return s;
    }

    void expect_magic(const std::string& magic) {
        std::string got(magic.size(), '\0');
        in_.read(got.data(), static_cast<std::streamsize>(got.size()));
        if (!in_ || got != magic) {
            throw FormatError("'" + source_ + "' is not a " + magic + " file (expected magic '" + magic + "')");
        }
    }
    void expect_end() {
        if (in_.peek() != std::char_traits<char>::eof()) throw FormatError("'" + source_ + "' has trailing bytes");
    }
    const std::string& source() const { return source_; }

   private:
    void read(char* dst, std::size_t n) {
        in_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError("'" + source_ + "' is truncated");
    }

    std::istream& in_;
    std::string source_;
};

}  // namespace tdvit
