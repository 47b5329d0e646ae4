#include "digr/serialize.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace digr {

namespace {

static_assert(std::endian::native == std::endian::little,
              "tensor blobs are written as raw little-endian doubles");

constexpr std::size_t kMaxHeaderBytes = 1 << 20;

}  // namespace

void write_magic(std::ostream& out, const char* magic) { out.write(magic, 4); }

void expect_magic(std::istream& in, const char* magic, const std::string& what) {
  char buffer[4] = {};
  in.read(buffer, 4);
  if (in.gcount() != 4) throw FormatError(FormatErrorKind::kTruncated, what + ": truncated magic");
  if (std::memcmp(buffer, magic, 4) != 0) {
    throw FormatError(FormatErrorKind::kBadMagic,
                      what + ": bad magic, expected '" + std::string(magic, 4) + "'");
  }
}

std::string read_header_line(std::istream& in, const std::string& what) {
  std::string line;
  char c = 0;
  while (in.get(c)) {
    if (c == '\n') return line;
    line.push_back(c);
    if (line.size() > kMaxHeaderBytes) {
      throw FormatError(FormatErrorKind::kCorruptHeader, what + ": header too long");
    }
  }
  throw FormatError(FormatErrorKind::kTruncated, what + ": header not terminated");
}

void write_tensor(std::ostream& out, const Tensor& tensor) {
  nlohmann::json header;
  header["shape"] = tensor.shape();
  header["dtype"] = "f64le";
  header["bytes"] = tensor.numel() * 8;
  write_magic(out, kTensorMagic);
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(tensor.array().data()),
            static_cast<std::streamsize>(tensor.numel() * 8));
}

Tensor read_tensor(std::istream& in) {
  expect_magic(in, kTensorMagic, "tensor blob");
  std::string line = read_header_line(in, "tensor blob");
  Shape shape;
  std::int64_t bytes = 0;
  try {
    auto header = nlohmann::json::parse(line);
    if (header.at("dtype").get<std::string>() != "f64le") {
      throw FormatError(FormatErrorKind::kCorruptHeader, "tensor blob: unsupported dtype");
    }
    shape = header.at("shape").get<Shape>();
    bytes = header.at("bytes").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::kCorruptHeader,
                      std::string("tensor blob: corrupt header: ") + e.what());
  }
  for (Index d : shape) {
    if (d < 0) throw FormatError(FormatErrorKind::kCorruptHeader, "tensor blob: negative extent");
  }
  if (bytes != numel(shape) * 8) {
    throw FormatError(FormatErrorKind::kCorruptHeader,
                      "tensor blob: byte length disagrees with shape " + to_string(shape));
  }
  Array data(numel(shape));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  if (in.gcount() != bytes) {
    throw FormatError(FormatErrorKind::kTruncated, "tensor blob: truncated payload");
  }
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& tensor) {
  std::ostringstream os;
  write_tensor(os, tensor);
  write_file(path, os.str());
}

Tensor load_tensor(const std::string& path) {
  std::istringstream is(read_file(path));
  return read_tensor(is);
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256: digest failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < length; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return os.str();
}

std::string sha256_file(const std::string& path) { return sha256_hex(read_file(path)); }

void write_file(const std::string& path, const std::string& bytes) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatErrorKind::kIo, "write to '" + path + "' failed");
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open '" + path + "' for reading");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace digr
