#include "hrdepth/serialize.hpp"

#include <bit>
#include <cstdio>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace hrdepth {

std::string manifest_line(const std::string& name, const Shape& shape) {
  if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
    throw FormatError("tensor name must be non-empty and contain no whitespace: '" + name + "'");
  }
  return name + " shape=" + shape.str() + " dtype=f64";
}

std::pair<std::string, Shape> parse_manifest_line(const std::string& line) {
  std::istringstream is(line);
  std::string name, shape_tok, dtype_tok, extra;
  if (!(is >> name >> shape_tok >> dtype_tok) || (is >> extra)) {
    throw FormatError("malformed manifest line: '" + line + "'");
  }
  if (shape_tok.rfind("shape=", 0) != 0) throw FormatError("missing shape= in '" + line + "'");
  if (dtype_tok != "dtype=f64") throw FormatError("unsupported dtype in '" + line + "'");
  Shape s;
  char c1 = 0, c2 = 0, c3 = 0;
  std::istringstream ss(shape_tok.substr(6));
  if (!(ss >> s.n >> c1 >> s.c >> c2 >> s.h >> c3 >> s.w) || c1 != ',' || c2 != ',' || c3 != ',' ||
      s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) {
    throw FormatError("malformed shape in '" + line + "'");
  }
  ss >> std::ws;
  if (!ss.eof()) throw FormatError("trailing characters in shape of '" + line + "'");
  return {name, s};
}

void write_payload(std::ostream& os, std::span<const double> values) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (double v : values) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
      unsigned char bytes[8];
      for (int k = 0; k < 8; ++k) bytes[k] = static_cast<unsigned char>(bits >> (8 * k));
      os.write(reinterpret_cast<const char*>(bytes), 8);
    }
  }
  if (!os) throw FormatError("failed writing tensor payload");
}

std::vector<double> read_payload(std::istream& is, std::size_t count) {
  std::vector<double> out(count);
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * sizeof(double)));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      unsigned char bytes[8];
      is.read(reinterpret_cast<char*>(bytes), 8);
      std::uint64_t bits = 0;
      for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(bytes[k]) << (8 * k);
      out[i] = std::bit_cast<double>(bits);
    }
  }
  if (!is) throw FormatError("truncated tensor payload");
  return out;
}

void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  os << manifest_line(name, t.shape()) << '\n';
  write_payload(os, t.data());
}

std::pair<std::string, Tensor> read_tensor(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("missing tensor manifest line");
  auto [name, shape] = parse_manifest_line(line);
  return {name, Tensor(shape, read_payload(is, shape.numel()))};
}

void save_tensor(const std::string& path, const std::string& name, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_tensor(os, name, t);
}

std::pair<std::string, Tensor> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_tensor(is);
}

namespace {
constexpr const char* kCheckpointHeader = "hrdepth-checkpoint v1";

void check_token(const std::string& s, const char* what) {
  if (s.empty() || s.find_first_of(" \t\n=") != std::string::npos)
    throw FormatError(std::string("invalid checkpoint ") + what + " '" + s + "'");
}
}  // namespace

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw FormatError("checkpoint has no tensor named " + name);
}

void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os << kCheckpointHeader << "\nmeta";
  for (const auto& [k, v] : ck.meta) {
    check_token(k, "meta key");
    if (v.find_first_of(" \t\n") != std::string::npos) throw FormatError("meta value for " + k + " contains whitespace");
    os << ' ' << k << '=' << v;
  }
  os << "\ncount " << ck.tensors.size() << '\n';
  for (const auto& [name, t] : ck.tensors) os << manifest_line(name, t.shape()) << '\n';
  for (const auto& [name, t] : ck.tensors) write_payload(os, t.data());
  if (!os) throw FormatError("failed writing checkpoint");
}

Checkpoint read_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointHeader) throw FormatError("not a checkpoint (bad header)");
  Checkpoint ck;
  if (!std::getline(is, line) || line.rfind("meta", 0) != 0) throw FormatError("missing checkpoint meta line");
  std::istringstream ms(line.substr(4));
  std::string kv;
  while (ms >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw FormatError("malformed meta entry '" + kv + "'");
    ck.meta[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  std::size_t count = 0;
  if (!std::getline(is, line) || std::sscanf(line.c_str(), "count %zu", &count) != 1)
    throw FormatError("missing checkpoint count line");
  std::vector<std::pair<std::string, Shape>> manifest;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(is, line)) throw FormatError("truncated checkpoint manifest");
    manifest.push_back(parse_manifest_line(line));
  }
  for (const auto& [name, shape] : manifest) ck.tensors.emplace_back(name, Tensor(shape, read_payload(is, shape.numel())));
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint payload");
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_checkpoint(os, ck);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return read_checkpoint(is);
}

}  // namespace hrdepth
