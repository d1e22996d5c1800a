#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "hrdepth/tensor.hpp"

namespace hrdepth {

/// Raised on malformed tensor or checkpoint files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// "name shape=b,c,h,w dtype=f64"
std::string manifest_line(const std::string& name, const Shape& shape);
/// Parses a manifest line into (name, shape).
std::pair<std::string, Shape> parse_manifest_line(const std::string& line);

/// Little-endian f64 payload, independent of host byte order.
void write_payload(std::ostream& os, std::span<const double> values);
std::vector<double> read_payload(std::istream& is, std::size_t count);

/// Single tensor: manifest line, newline, raw payload.
void write_tensor(std::ostream& os, const std::string& name, const Tensor& t);
std::pair<std::string, Tensor> read_tensor(std::istream& is);

void save_tensor(const std::string& path, const std::string& name, const Tensor& t);
std::pair<std::string, Tensor> load_tensor(const std::string& path);

/// Named tensors plus string metadata. On disk: a header line, a "meta"
/// line of space-separated key=value pairs, a "count N" line, N manifest
/// lines, then the N payloads concatenated in manifest order.
struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
};

void write_checkpoint(std::ostream& os, const Checkpoint& ck);
Checkpoint read_checkpoint(std::istream& is);
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace hrdepth
