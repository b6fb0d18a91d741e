#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "l3/common.hpp"

namespace l3 {

// Little-endian binary writer/reader with hard bounds checks; every loader in
// the project goes through these so truncated or oversized fields surface as
// ErrorKind::Format instead of UB.

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : os_(path, std::ios::binary) {
    check(os_.good(), ErrorKind::Io, "cannot open for write: " + path);
  }

  void bytes(const void* p, size_t n) { os_.write(static_cast<const char*>(p), n); }
  void magic(const char m[4]) { bytes(m, 4); }
  template <typename T>
  void pod(T v) {
    bytes(&v, sizeof(T));
  }
  void u32(uint32_t v) { pod(v); }
  void u64(uint64_t v) { pod(v); }
  void i64(int64_t v) { pod(v); }
  void f64(double v) { pod(v); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  template <typename T>
  void vec(const std::vector<T>& v) {
    bytes(v.data(), v.size() * sizeof(T));
  }
  uint64_t tell() { return static_cast<uint64_t>(os_.tellp()); }
  void close() {
    os_.close();
    check(os_.good(), ErrorKind::Io, "write failed");
  }

 private:
  std::ofstream os_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : is_(path, std::ios::binary), path_(path) {
    check(is_.good(), ErrorKind::Io, "cannot open: " + path);
    is_.seekg(0, std::ios::end);
    size_ = static_cast<uint64_t>(is_.tellg());
    is_.seekg(0);
  }

  void bytes(void* p, size_t n) {
    is_.read(static_cast<char*>(p), n);
    check(static_cast<size_t>(is_.gcount()) == n, ErrorKind::Format,
          "truncated file: " + path_);
  }
  void expect_magic(const char m[4]) {
    char got[4];
    bytes(got, 4);
    check(std::memcmp(got, m, 4) == 0, ErrorKind::Format, "bad magic in " + path_);
  }
  template <typename T>
  T pod() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  uint32_t u32() { return pod<uint32_t>(); }
  uint64_t u64() { return pod<uint64_t>(); }
  int64_t i64() { return pod<int64_t>(); }
  double f64() { return pod<double>(); }
  std::string str(uint32_t max_len = 1u << 28) {
    const uint32_t n = u32();
    check(n <= max_len && n <= remaining(), ErrorKind::Format,
          "invalid string length in " + path_);
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  template <typename T>
  void vec(std::vector<T>& v, size_t count) {
    check(count * sizeof(T) <= remaining(), ErrorKind::Format, "truncated array in " + path_);
    v.resize(count);
    bytes(v.data(), count * sizeof(T));
  }
  uint64_t remaining() { return size_ - static_cast<uint64_t>(is_.tellg()); }
  uint64_t size() const { return size_; }

 private:
  std::ifstream is_;
  std::string path_;
  uint64_t size_;
};

// FNV-1a, used for input fingerprints in run manifests.
uint64_t fnv1a_file(const std::string& path);
uint64_t fnv1a_bytes(const void* data, size_t n);

}  // namespace l3
