#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "hrdepth/module.hpp"

namespace hrdepth {

enum class EncoderKind { kResidual18, kMobileLite };
enum class FusionKind { kConv3x3, kFse, kSePlusConv };

std::string to_string(EncoderKind k);
std::string to_string(FusionKind k);
FusionKind parse_fusion(const std::string& s);

class BuildError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ArchConfig {
  EncoderKind encoder_kind = EncoderKind::kResidual18;
  /// Channels of x^e_1 .. x^e_L (resolution 1/2 .. 1/2^L).
  std::vector<int> encoder_channels{64, 64, 128, 256, 512};
  /// Channels of x^d_0 .. x^d_{L-1}; aggregation nodes of row i use entry i.
  std::vector<int> decoder_channels{16, 32, 64, 128, 256};
  int num_levels = 5;
  int reduction = 4;
  FusionKind fusion = FusionKind::kFse;
  int num_scales = 4;
  /// false: plain U-Net skips (no aggregation nodes).
  bool dense = true;
  /// Basic blocks per residual stage (residual encoder only).
  std::vector<int> residual_blocks{2, 2, 2, 2};
  int input_channels = 3;
};

ArchConfig hr_depth_res18(FusionKind fusion = FusionKind::kFse);
ArchConfig baseline_unet();
ArchConfig hr_depth_lite();
/// Narrow residual variant for single-core toy training.
ArchConfig toy_res18(FusionKind fusion = FusionKind::kFse);
/// Resolves "hr-depth-res18", "hr-depth-lite", "baseline-unet".
ArchConfig arch_by_name(const std::string& name);

enum class NodeKind { kEncoder, kAggregation, kDecoder, kDisp };
std::string to_string(NodeKind k);

struct GraphNode {
  std::string name;
  NodeKind kind = NodeKind::kEncoder;
  int row = 0;
  int col = 0;
  /// Nodes concatenated as-is, in order.
  std::vector<int> skips;
  /// Node fed through U(.) (conv + upsample), concatenated last; -1 if none.
  int upsampled = -1;
  int up_in = 0;
  int up_out = 0;
  /// Total concatenated channels entering the node's fusion / head.
  int in_channels = 0;
  int out_channels = 0;
};

struct GraphEdge {
  int from;
  int to;
  bool upsampled;
};

struct NodeGraph {
  ArchConfig config;
  /// Topological order: encoder nodes, then rows bottom-up, heads last.
  std::vector<GraphNode> nodes;

  int find(const std::string& name) const;
  const GraphNode& at(const std::string& name) const { return nodes.at(find(name)); }
  std::vector<GraphEdge> edges() const;
  std::size_t count(NodeKind kind) const;
};

NodeGraph build_graph(const ArchConfig& config);

struct FuseBlockSpec {
  int c_in = 0;
  int c_out = 0;
  FusionKind kind = FusionKind::kFse;
  int r = 4;
};

/// Closed-form parameter count of a fusion block.
std::size_t fuse_params_closed_form(const FuseBlockSpec& spec);

/// Fusion block D(.): concat -> {3x3 conv | SE gate + 1x1 conv | SE gate + 3x3 conv} -> ELU.
class FuseBlock {
 public:
  FuseBlock() = default;
  FuseBlock(ParamStore& store, const std::string& name, const FuseBlockSpec& spec, Rng& rng);

  Tensor operator()(std::span<const Tensor> features) const;
  Tensor operator()(std::initializer_list<Tensor> f) const {
    return (*this)(std::span<const Tensor>(f.begin(), f.size()));
  }
  /// Channel gate (N, C_in, 1, 1) for an already concatenated input.
  Tensor gate(const Tensor& concat) const;
  const FuseBlockSpec& spec() const { return spec_; }
  std::size_t squeeze_index() const { return squeeze_.weight; }
  std::size_t excite_index() const { return excite_.weight; }

 private:
  FuseBlockSpec spec_;
  Linear squeeze_, excite_;
  Conv conv_;
};

class Encoder {
 public:
  virtual ~Encoder() = default;
  /// x^e_1 .. x^e_L.
  virtual std::vector<Tensor> features(const Tensor& image, const Mode& mode) const = 0;
};

class DepthNet {
 public:
  DepthNet(const ArchConfig& config, std::uint64_t seed);
  ~DepthNet();
  DepthNet(DepthNet&&) noexcept;
  DepthNet& operator=(DepthNet&&) noexcept;

  /// Disparity maps in (0,1): index 0 full resolution, index k at 1/2^k.
  std::vector<Tensor> forward(const Tensor& image, const Mode& mode = {}) const;

  ParamStore& params() { return *store_; }
  const ParamStore& params() const { return *store_; }
  const NodeGraph& graph() const { return graph_; }
  const ArchConfig& config() const { return graph_.config; }
  const FuseBlock& fuse_block(int decoder_row) const { return fuse_.at(decoder_row); }

 private:
  struct Upsampler {
    Conv conv;
    Tensor operator()(const Tensor& x) const;
  };
  NodeGraph graph_;
  std::unique_ptr<ParamStore> store_;
  std::unique_ptr<Encoder> encoder_;
  std::map<int, Upsampler> up_;    // by node id
  std::map<int, Conv> aggregate_;  // by node id
  std::map<int, FuseBlock> fuse_;  // by decoder row
  std::vector<Conv> heads_;
};

struct PoseConfig {
  std::vector<int> encoder_channels{64, 64, 128, 256, 512};
  std::vector<int> residual_blocks{2, 2, 2, 2};
  int decoder_width = 256;
};
PoseConfig toy_pose();

/// Relative pose from a channel-stacked (target, source) pair:
/// (N, 6, 1, 1) = (tx, ty, tz, rx, ry, rz), scaled by 0.01.
class PoseNet {
 public:
  PoseNet(const PoseConfig& config, std::uint64_t seed);
  ~PoseNet();
  PoseNet(PoseNet&&) noexcept;
  PoseNet& operator=(PoseNet&&) noexcept;

  Tensor forward(const Tensor& pair, const Mode& mode = {}) const;
  ParamStore& params() { return *store_; }
  const ParamStore& params() const { return *store_; }
  /// Index of the final 1x1 conv weight and bias.
  std::pair<std::size_t, std::size_t> head_indices() const { return {head_.weight, head_.bias}; }

 private:
  std::unique_ptr<ParamStore> store_;
  std::unique_ptr<Encoder> encoder_;
  Conv squeeze_, pose0_, pose1_, head_;
};

struct AuditRow {
  std::string node;
  std::string kind;
  std::size_t params = 0;
  /// Closed-form prediction for fusion blocks; 0 when not applicable.
  std::size_t closed_form = 0;
};

struct AuditTable {
  std::string arch;
  std::vector<AuditRow> rows;
  std::map<std::string, std::size_t> subtotals;
  std::size_t total = 0;
  bool closed_forms_match() const;
  std::string text() const;
  std::string key_values() const;
};

AuditTable count_params(const DepthNet& net);

/// Named trainable parameters and buffers, in registration order.
std::vector<std::pair<std::string, Tensor>> named_tensors(const ParamStore& store);
/// Copies every named tensor into `store`; names and shapes must match exactly.
void load_named(ParamStore& store, const std::vector<std::pair<std::string, Tensor>>& tensors);

}  // namespace hrdepth
