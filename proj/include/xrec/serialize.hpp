#pragma once

#include "xrec/tensor.hpp"

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

namespace xrec {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Little binary writer for checkpoint files (native-endian doubles).
class BinWriter {
 public:
  explicit BinWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw FormatError("cannot open for writing: " + path);
  }

  void u64(std::uint64_t v) { raw(&v, sizeof(v)); }
  void i64(std::int64_t v) { raw(&v, sizeof(v)); }
  void f64(double v) { raw(&v, sizeof(v)); }

  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }

  void mat(const Mat& m) {
    i64(m.rows());
    i64(m.cols());
    raw(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  }

  void close() {
    out_.close();
    if (!out_) throw FormatError("write failed: " + path_);
  }

 private:
  void raw(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw FormatError("write failed: " + path_);
  }

  std::string path_;
  std::ofstream out_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw FormatError("cannot open for reading: " + path);
  }

  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof(v));
    return v;
  }

  std::int64_t i64() {
    std::int64_t v;
    raw(&v, sizeof(v));
    return v;
  }

  double f64() {
    double v;
    raw(&v, sizeof(v));
    return v;
  }

  std::string str() {
    std::uint64_t n = u64();
    if (n > (1ull << 32)) throw FormatError("corrupt string length in " + path_);
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

  Mat mat() {
    std::int64_t r = i64();
    std::int64_t c = i64();
    if (r < 0 || c < 0 || r * c > (1ll << 32))
      throw FormatError("corrupt matrix header in " + path_);
    Mat m(r, c);
    raw(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    return m;
  }

  void expect_magic(std::uint64_t magic, std::uint64_t version, const std::string& what) {
    if (u64() != magic) throw FormatError(path_ + " is not a " + what + " checkpoint");
    std::uint64_t got = u64();
    if (got != version)
      throw FormatError(path_ + ": unsupported " + what + " version " + std::to_string(got));
  }

 private:
  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n))
      throw FormatError("unexpected end of file: " + path_);
  }

  std::string path_;
  std::ifstream in_;
};

/// FNV-1a 64-bit content hash over raw parameter bytes.
class Fnv1a {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= b[i];
      h_ *= 0x100000001b3ull;
    }
  }

  void f64(double v) { bytes(&v, sizeof(v)); }
  void i64(std::int64_t v) { bytes(&v, sizeof(v)); }

  void mat(const Mat& m) {
    i64(m.rows());
    i64(m.cols());
    bytes(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  }

  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ull;
};

}  // namespace xrec
