#pragma once

#include "digr/tensor.hpp"

#include <iosfwd>
#include <stdexcept>
#include <string>

namespace digr {

enum class FormatErrorKind {
  kBadMagic,
  kVersionMismatch,
  kCorruptHeader,
  kTruncated,
  kArchitectureMismatch,
  kIo,
};

/// Raised when a persisted artifact cannot be read back.
class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  FormatErrorKind kind() const { return kind_; }

 private:
  FormatErrorKind kind_;
};

// Tensor blob layout:
//   "DGT1" | {"shape":[...],"dtype":"f64le","bytes":N}\n | N bytes of little-endian doubles
inline constexpr char kTensorMagic[] = "DGT1";

void write_tensor(std::ostream& out, const Tensor& tensor);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::string& path, const Tensor& tensor);
Tensor load_tensor(const std::string& path);

// Shared framing helpers: 4-byte magic followed by one JSON line.
void write_magic(std::ostream& out, const char* magic);
void expect_magic(std::istream& in, const char* magic, const std::string& what);
std::string read_header_line(std::istream& in, const std::string& what);

/// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(const std::string& bytes);
/// Lowercase hex SHA-256 of a file's contents.
std::string sha256_file(const std::string& path);

/// Writes bytes to path, creating parent directories.
void write_file(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

}  // namespace digr
