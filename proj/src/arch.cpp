#include "hrdepth/arch.hpp"

#include <algorithm>
#include <sstream>

namespace hrdepth {

std::string to_string(EncoderKind k) { return k == EncoderKind::kResidual18 ? "residual18" : "mobile_lite"; }

std::string to_string(FusionKind k) {
  switch (k) {
    case FusionKind::kConv3x3: return "conv3x3";
    case FusionKind::kFse: return "fse";
    case FusionKind::kSePlusConv: return "se";
  }
  return "?";
}

FusionKind parse_fusion(const std::string& s) {
  if (s == "conv3x3") return FusionKind::kConv3x3;
  if (s == "fse") return FusionKind::kFse;
  if (s == "se" || s == "se_plus_conv") return FusionKind::kSePlusConv;
  throw ContractViolation("unknown fusion kind '" + s + "'");
}

std::string to_string(NodeKind k) {
  switch (k) {
    case NodeKind::kEncoder: return "encoder";
    case NodeKind::kAggregation: return "aggregation";
    case NodeKind::kDecoder: return "decoder";
    case NodeKind::kDisp: return "disp";
  }
  return "?";
}

ArchConfig hr_depth_res18(FusionKind fusion) {
  ArchConfig c;
  c.fusion = fusion;
  return c;
}

ArchConfig baseline_unet() {
  ArchConfig c;
  c.dense = false;
  c.fusion = FusionKind::kConv3x3;
  return c;
}

namespace {
// (kernel, expansion, out, squeeze-excite, hard-swish, stride)
struct LiteBlock {
  int k, exp, out;
  bool se, hs;
  int stride;
};
constexpr LiteBlock kLitePlan[] = {
    {3, 16, 16, false, false, 1},  {3, 64, 24, false, false, 2},  {3, 72, 24, false, false, 1},
    {5, 72, 40, true, false, 2},   {5, 120, 40, true, false, 1},  {5, 120, 40, true, false, 1},
    {3, 240, 80, false, true, 2},  {3, 200, 80, false, true, 1},  {3, 184, 80, false, true, 1},
    {3, 184, 80, false, true, 1},  {3, 480, 112, true, true, 1},  {3, 672, 112, true, true, 1},
    {5, 672, 160, true, true, 2},  {5, 960, 160, true, true, 1},  {5, 960, 160, true, true, 1},
};
// Last block index (1-based) belonging to each encoder level.
constexpr int kLiteTaps[] = {1, 3, 6, 12, 15};
constexpr int kLiteStem = 16;
}  // namespace

ArchConfig hr_depth_lite() {
  ArchConfig c;
  c.encoder_kind = EncoderKind::kMobileLite;
  c.encoder_channels = {16, 24, 40, 112, 160};
  c.decoder_channels = {8, 16, 24, 40, 80};
  c.fusion = FusionKind::kFse;
  return c;
}

ArchConfig toy_res18(FusionKind fusion) {
  ArchConfig c;
  c.encoder_channels = {16, 16, 32, 64, 128};
  c.decoder_channels = {8, 8, 16, 32, 64};
  c.residual_blocks = {1, 1, 1, 1};
  c.fusion = fusion;
  return c;
}

ArchConfig arch_by_name(const std::string& name) {
  if (name == "hr-depth-res18") return hr_depth_res18();
  if (name == "hr-depth-lite") return hr_depth_lite();
  if (name == "baseline-unet") return baseline_unet();
  if (name == "toy-res18") return toy_res18();
  throw ContractViolation("unknown architecture '" + name + "'");
}

// ---------------------------------------------------------------- graph

int NodeGraph::find(const std::string& name) const {
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].name == name) return static_cast<int>(i);
  throw ContractViolation("no node named " + name);
}

std::vector<GraphEdge> NodeGraph::edges() const {
  std::vector<GraphEdge> out;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (int s : nodes[i].skips) out.push_back({s, static_cast<int>(i), false});
    if (nodes[i].upsampled >= 0) out.push_back({nodes[i].upsampled, static_cast<int>(i), true});
  }
  return out;
}

std::size_t NodeGraph::count(NodeKind kind) const {
  return std::count_if(nodes.begin(), nodes.end(), [&](const GraphNode& n) { return n.kind == kind; });
}

NodeGraph build_graph(const ArchConfig& cfg) {
  const int L = cfg.num_levels;
  if (L < 2) throw BuildError("num_levels must be at least 2");
  for (int i = 1; i <= L; ++i) {
    if (static_cast<int>(cfg.encoder_channels.size()) < i || cfg.encoder_channels[i - 1] <= 0)
      throw BuildError("node enc." + std::to_string(i) + ": missing or non-positive encoder channel entry");
  }
  if (static_cast<int>(cfg.encoder_channels.size()) != L)
    throw BuildError("encoder channel list has " + std::to_string(cfg.encoder_channels.size()) + " entries for " +
                     std::to_string(L) + " levels");
  for (int i = 0; i < L; ++i) {
    if (static_cast<int>(cfg.decoder_channels.size()) <= i || cfg.decoder_channels[i] <= 0)
      throw BuildError("node dec." + std::to_string(i) + ": missing or non-positive decoder channel entry");
  }
  if (static_cast<int>(cfg.decoder_channels.size()) != L)
    throw BuildError("decoder channel list has " + std::to_string(cfg.decoder_channels.size()) + " entries for " +
                     std::to_string(L) + " levels");
  if (cfg.num_scales < 1 || cfg.num_scales > L - 1)
    throw BuildError("num_scales must lie in [1, num_levels - 1]");
  if (cfg.reduction < 1) throw BuildError("reduction ratio must be positive");
  if (cfg.encoder_kind == EncoderKind::kMobileLite) {
    if (L != 5 || cfg.encoder_channels != std::vector<int>{16, 24, 40, 112, 160})
      throw BuildError("mobile_lite encoder has fixed channels 16,24,40,112,160 over 5 levels");
  } else if (static_cast<int>(cfg.residual_blocks.size()) < L - 1) {
    throw BuildError("residual encoder needs a block count for each of its " + std::to_string(L - 1) + " stages");
  }

  NodeGraph g;
  g.config = cfg;
  auto E = [&](int i) { return cfg.encoder_channels[i - 1]; };
  auto D = [&](int i) { return cfg.decoder_channels[i]; };
  auto add = [&](GraphNode n) {
    g.nodes.push_back(std::move(n));
    return static_cast<int>(g.nodes.size()) - 1;
  };
  std::vector<int> enc(L + 1, -1);
  for (int i = 1; i <= L; ++i) {
    GraphNode n;
    n.name = "enc." + std::to_string(i);
    n.kind = NodeKind::kEncoder;
    n.row = i;
    n.out_channels = E(i);
    enc[i] = add(n);
  }
  // agg[i][j], rows processed deepest first so every input already exists.
  std::vector<std::vector<int>> agg(L + 1);
  if (cfg.dense) {
    for (int i = L - 2; i >= 1; --i) {
      const int per_row = L - 1 - i;
      agg[i].assign(per_row + 1, -1);
      for (int j = 1; j <= per_row; ++j) {
        GraphNode n;
        n.name = "agg." + std::to_string(i) + "." + std::to_string(j);
        n.kind = NodeKind::kAggregation;
        n.row = i;
        n.col = j;
        n.skips.push_back(enc[i]);
        for (int k = 1; k < j; ++k) n.skips.push_back(agg[i][k]);
        n.upsampled = (j == 1) ? enc[i + 1] : agg[i + 1][j - 1];
        n.up_in = g.nodes[n.upsampled].out_channels;
        n.up_out = D(i);
        n.in_channels = E(i) + (j - 1) * D(i) + n.up_out;
        n.out_channels = D(i);
        agg[i][j] = add(n);
      }
    }
  }
  std::vector<int> dec(L + 1, -1);
  for (int i = L - 1; i >= 0; --i) {
    GraphNode n;
    n.name = "dec." + std::to_string(i);
    n.kind = NodeKind::kDecoder;
    n.row = i;
    int skip_channels = 0;
    if (i >= 1) {
      n.skips.push_back(enc[i]);
      skip_channels += E(i);
      for (std::size_t k = 1; k < agg[i].size(); ++k) {
        n.skips.push_back(agg[i][k]);
        skip_channels += g.nodes[agg[i][k]].out_channels;
      }
    }
    n.upsampled = (i == L - 1) ? enc[L] : dec[i + 1];
    n.up_in = g.nodes[n.upsampled].out_channels;
    n.up_out = D(i);
    n.in_channels = skip_channels + n.up_out;
    n.out_channels = D(i);
    if (cfg.fusion != FusionKind::kConv3x3 && n.in_channels % cfg.reduction != 0)
      throw BuildError("node " + n.name + ": fused width " + std::to_string(n.in_channels) +
                       " is not divisible by the reduction ratio " + std::to_string(cfg.reduction));
    dec[i] = add(n);
  }
  for (int k = 0; k < cfg.num_scales; ++k) {
    GraphNode n;
    n.name = "disp." + std::to_string(k);
    n.kind = NodeKind::kDisp;
    n.row = k;
    n.skips.push_back(dec[k]);
    n.in_channels = D(k);
    n.out_channels = 1;
    add(n);
  }
  return g;
}

// ---------------------------------------------------------------- fusion

std::size_t fuse_params_closed_form(const FuseBlockSpec& s) {
  const std::size_t ci = s.c_in, co = s.c_out, r = s.r;
  switch (s.kind) {
    case FusionKind::kConv3x3: return ci * co * 9 + co;
    case FusionKind::kFse: return 2 * (ci / r) * ci + (ci + 1) * co;
    case FusionKind::kSePlusConv: return 2 * (ci / r) * ci + ci * co * 9 + co;
  }
  return 0;
}

FuseBlock::FuseBlock(ParamStore& store, const std::string& name, const FuseBlockSpec& spec, Rng& rng) : spec_(spec) {
  if (spec.c_in <= 0 || spec.c_out <= 0) throw BuildError(name + ": channel counts must be positive");
  if (spec.kind != FusionKind::kConv3x3) {
    if (spec.r < 1 || spec.c_in % spec.r != 0)
      throw BuildError(name + ": C_in " + std::to_string(spec.c_in) + " not divisible by r " + std::to_string(spec.r));
    squeeze_ = make_linear(store, name + ".squeeze", spec.c_in, spec.c_in / spec.r, false, rng);
    excite_ = make_linear(store, name + ".excite", spec.c_in / spec.r, spec.c_in, false, rng);
  }
  const int k = spec.kind == FusionKind::kFse ? 1 : 3;
  conv_ = make_conv(store, name + ".conv", {.in = spec.c_in, .out = spec.c_out, .kernel = k, .pad_mode = PadMode::kReflect},
                    rng);
}

Tensor FuseBlock::gate(const Tensor& concat) const {
  return sigmoid(excite_(relu(squeeze_(global_avg_pool(concat)))));
}

Tensor FuseBlock::operator()(std::span<const Tensor> features) const {
  Tensor x = features.size() == 1 ? features[0] : concat_channels(features);
  if (x.shape().c != spec_.c_in)
    throw ContractViolation("fusion block expects " + std::to_string(spec_.c_in) + " channels, got " +
                            std::to_string(x.shape().c));
  if (spec_.kind != FusionKind::kConv3x3) x = scale_channels(x, gate(x));
  return elu(conv_(x));
}

// ---------------------------------------------------------------- encoders

namespace {

Tensor normalize_input(const Tensor& image) { return scale(add_scalar(image, -0.45), 1.0 / 0.225); }

class ResidualEncoder : public Encoder {
 public:
  ResidualEncoder(ParamStore& store, const std::vector<int>& channels, const std::vector<int>& blocks, int in_channels,
                  Rng& rng) {
    const int L = static_cast<int>(channels.size());
    stem_ = make_conv(store, "encoder.1.conv", {.in = in_channels, .out = channels[0], .kernel = 7, .stride = 2, .bias = false},
                      rng);
    stem_bn_ = make_batch_norm(store, "encoder.1.bn", channels[0]);
    for (int k = 1; k < L; ++k) {
      std::vector<Block> stage;
      for (int b = 0; b < blocks[k - 1]; ++b) {
        const int in = b == 0 ? channels[k - 1] : channels[k];
        const int out = channels[k];
        const int stride = (b == 0 && k > 1) ? 2 : 1;
        const std::string p = "encoder." + std::to_string(k + 1) + "." + std::to_string(b);
        Block blk;
        blk.conv1 = make_conv(store, p + ".conv1", {.in = in, .out = out, .kernel = 3, .stride = stride, .bias = false}, rng);
        blk.bn1 = make_batch_norm(store, p + ".bn1", out);
        blk.conv2 = make_conv(store, p + ".conv2", {.in = out, .out = out, .kernel = 3, .bias = false}, rng);
        blk.bn2 = make_batch_norm(store, p + ".bn2", out);
        if (stride != 1 || in != out) {
          blk.has_down = true;
          blk.down = make_conv(store, p + ".down", {.in = in, .out = out, .kernel = 1, .stride = stride, .bias = false}, rng);
          blk.down_bn = make_batch_norm(store, p + ".down_bn", out);
        }
        stage.push_back(blk);
      }
      stages_.push_back(std::move(stage));
    }
  }

  std::vector<Tensor> features(const Tensor& image, const Mode& mode) const override {
    std::vector<Tensor> out;
    Tensor x = relu(stem_bn_(stem_(normalize_input(image)), mode));
    out.push_back(x);
    x = max_pool2d(x, 3, 2, 1);
    for (const auto& stage : stages_) {
      for (const Block& b : stage) {
        Tensor y = relu(b.bn1(b.conv1(x), mode));
        y = b.bn2(b.conv2(y), mode);
        Tensor shortcut = b.has_down ? b.down_bn(b.down(x), mode) : x;
        x = relu(add(y, shortcut));
      }
      out.push_back(x);
    }
    return out;
  }

 private:
  struct Block {
    Conv conv1, conv2, down;
    BatchNorm bn1, bn2, down_bn;
    bool has_down = false;
  };
  Conv stem_;
  BatchNorm stem_bn_;
  std::vector<std::vector<Block>> stages_;
};

int make_divisible(double v, int divisor) {
  int n = std::max(divisor, static_cast<int>(v + divisor / 2.0) / divisor * divisor);
  if (n < 0.9 * v) n += divisor;
  return n;
}

class LiteEncoder : public Encoder {
 public:
  LiteEncoder(ParamStore& store, int in_channels, Rng& rng) {
    stem_ = make_conv(store, "encoder.1.stem", {.in = in_channels, .out = kLiteStem, .kernel = 3, .stride = 2, .bias = false},
                      rng);
    stem_bn_ = make_batch_norm(store, "encoder.1.stem_bn", kLiteStem);
    int in = kLiteStem;
    int level = 1;
    for (int b = 0; b < 15; ++b) {
      const LiteBlock& s = kLitePlan[b];
      if (b + 1 > kLiteTaps[level - 1]) ++level;
      const std::string p = "encoder." + std::to_string(level) + ".block" + std::to_string(b + 1);
      Bneck n;
      n.spec = s;
      n.residual = s.stride == 1 && in == s.out;
      if (s.exp != in) {
        n.has_expand = true;
        n.expand = make_conv(store, p + ".expand", {.in = in, .out = s.exp, .kernel = 1, .bias = false}, rng);
        n.expand_bn = make_batch_norm(store, p + ".expand_bn", s.exp);
      }
      n.dw = make_conv(store, p + ".dw",
                       {.in = s.exp, .out = s.exp, .kernel = s.k, .stride = s.stride, .bias = false, .depthwise = true}, rng);
      n.dw_bn = make_batch_norm(store, p + ".dw_bn", s.exp);
      if (s.se) {
        const int sq = make_divisible(s.exp / 4.0, 8);
        n.se1 = make_linear(store, p + ".se1", s.exp, sq, true, rng);
        n.se2 = make_linear(store, p + ".se2", sq, s.exp, true, rng);
      }
      n.project = make_conv(store, p + ".project", {.in = s.exp, .out = s.out, .kernel = 1, .bias = false}, rng);
      n.project_bn = make_batch_norm(store, p + ".project_bn", s.out);
      blocks_.push_back(n);
      in = s.out;
    }
  }

  std::vector<Tensor> features(const Tensor& image, const Mode& mode) const override {
    std::vector<Tensor> out;
    Tensor x = hardswish(stem_bn_(stem_(normalize_input(image)), mode));
    int tap = 0;
    for (int b = 0; b < 15; ++b) {
      const Bneck& n = blocks_[b];
      auto act = [&](const Tensor& t) { return n.spec.hs ? hardswish(t) : relu(t); };
      Tensor y = n.has_expand ? act(n.expand_bn(n.expand(x), mode)) : x;
      y = act(n.dw_bn(n.dw(y), mode));
      if (n.spec.se) y = scale_channels(y, sigmoid(n.se2(relu(n.se1(global_avg_pool(y))))));
      y = n.project_bn(n.project(y), mode);
      x = n.residual ? add(y, x) : y;
      if (b + 1 == kLiteTaps[tap]) {
        out.push_back(x);
        ++tap;
      }
    }
    return out;
  }

 private:
  struct Bneck {
    LiteBlock spec{};
    bool residual = false, has_expand = false;
    Conv expand, dw, project;
    BatchNorm expand_bn, dw_bn, project_bn;
    Linear se1, se2;
  };
  Conv stem_;
  BatchNorm stem_bn_;
  std::vector<Bneck> blocks_;
};

}  // namespace

// ---------------------------------------------------------------- depth net

Tensor DepthNet::Upsampler::operator()(const Tensor& x) const { return upsample2x(elu(conv(x))); }

DepthNet::DepthNet(const ArchConfig& config, std::uint64_t seed)
    : graph_(build_graph(config)), store_(std::make_unique<ParamStore>()) {
  Rng rng(seed);
  ParamStore& st = *store_;
  if (config.encoder_kind == EncoderKind::kResidual18) {
    encoder_ = std::make_unique<ResidualEncoder>(st, config.encoder_channels, config.residual_blocks, config.input_channels, rng);
  } else {
    encoder_ = std::make_unique<LiteEncoder>(st, config.input_channels, rng);
  }
  for (std::size_t id = 0; id < graph_.nodes.size(); ++id) {
    const GraphNode& n = graph_.nodes[id];
    const int nid = static_cast<int>(id);
    if (n.upsampled >= 0) {
      up_[nid].conv = make_conv(st, n.name + ".up.conv",
                                {.in = n.up_in, .out = n.up_out, .kernel = 3, .pad_mode = PadMode::kReflect}, rng);
    }
    switch (n.kind) {
      case NodeKind::kEncoder: break;
      case NodeKind::kAggregation:
        aggregate_[nid] = make_conv(st, n.name + ".conv",
                                    {.in = n.in_channels, .out = n.out_channels, .kernel = 3, .pad_mode = PadMode::kReflect}, rng);
        break;
      case NodeKind::kDecoder:
        fuse_.emplace(n.row, FuseBlock(st, n.name + ".fuse",
                                       {.c_in = n.in_channels, .c_out = n.out_channels, .kind = config.fusion, .r = config.reduction},
                                       rng));
        break;
      case NodeKind::kDisp:
        heads_.push_back(make_conv(st, n.name + ".conv", {.in = n.in_channels, .out = 1, .kernel = 3, .pad_mode = PadMode::kReflect},
                                   rng));
        break;
    }
  }
}

DepthNet::~DepthNet() = default;
DepthNet::DepthNet(DepthNet&&) noexcept = default;
DepthNet& DepthNet::operator=(DepthNet&&) noexcept = default;

std::vector<Tensor> DepthNet::forward(const Tensor& image, const Mode& mode) const {
  const Shape s = image.shape();
  const int L = graph_.config.num_levels;
  const int div = 1 << L;
  if (s.c != graph_.config.input_channels) throw ContractViolation("depth network expects " +
                                                                   std::to_string(graph_.config.input_channels) + " channels");
  if (s.h % div != 0 || s.w % div != 0)
    throw ContractViolation("input " + std::to_string(s.h) + "x" + std::to_string(s.w) + " is not divisible by " +
                            std::to_string(div));
  std::vector<Tensor> feats = encoder_->features(image, mode);
  std::vector<Tensor> value(graph_.nodes.size());
  std::vector<Tensor> disps;
  std::size_t enc_i = 0;
  for (std::size_t id = 0; id < graph_.nodes.size(); ++id) {
    const GraphNode& n = graph_.nodes[id];
    if (n.kind == NodeKind::kEncoder) {
      value[id] = feats.at(enc_i++);
      continue;
    }
    if (n.kind == NodeKind::kDisp) {
      disps.push_back(sigmoid(heads_[n.row](value[n.skips[0]])));
      continue;
    }
    std::vector<Tensor> parts;
    for (int k : n.skips) parts.push_back(value[k]);
    parts.push_back(up_.at(static_cast<int>(id))(value[n.upsampled]));
    if (n.kind == NodeKind::kAggregation) {
      value[id] = elu(aggregate_.at(static_cast<int>(id))(concat_channels(parts)));
    } else {
      value[id] = fuse_.at(n.row)(parts);
    }
  }
  return disps;
}

// ---------------------------------------------------------------- pose net

PoseConfig toy_pose() {
  PoseConfig c;
  c.encoder_channels = {16, 16, 32, 64, 128};
  c.residual_blocks = {1, 1, 1, 1};
  c.decoder_width = 64;
  return c;
}

PoseNet::PoseNet(const PoseConfig& config, std::uint64_t seed) : store_(std::make_unique<ParamStore>()) {
  if (config.encoder_channels.size() < 2 || config.residual_blocks.size() + 1 < config.encoder_channels.size())
    throw BuildError("pose encoder channel/block lists are inconsistent");
  Rng rng(seed);
  ParamStore& st = *store_;
  encoder_ = std::make_unique<ResidualEncoder>(st, config.encoder_channels, config.residual_blocks, 6, rng);
  const int W = config.decoder_width;
  squeeze_ = make_conv(st, "pose.squeeze", {.in = config.encoder_channels.back(), .out = W, .kernel = 1}, rng);
  pose0_ = make_conv(st, "pose.conv0", {.in = W, .out = W, .kernel = 3}, rng);
  pose1_ = make_conv(st, "pose.conv1", {.in = W, .out = W, .kernel = 3}, rng);
  head_ = make_conv(st, "pose.head", {.in = W, .out = 6, .kernel = 1}, rng);
}

PoseNet::~PoseNet() = default;
PoseNet::PoseNet(PoseNet&&) noexcept = default;
PoseNet& PoseNet::operator=(PoseNet&&) noexcept = default;

Tensor PoseNet::forward(const Tensor& pair, const Mode& mode) const {
  if (pair.shape().c != 6) throw ContractViolation("pose network expects 6 input channels, got " + std::to_string(pair.shape().c));
  Tensor x = encoder_->features(pair, mode).back();
  x = relu(squeeze_(x));
  x = relu(pose0_(x));
  x = relu(pose1_(x));
  return scale(global_avg_pool(head_(x)), 0.01);
}

// ---------------------------------------------------------------- audit

bool AuditTable::closed_forms_match() const {
  return std::all_of(rows.begin(), rows.end(), [](const AuditRow& r) { return r.closed_form == 0 || r.closed_form == r.params; });
}

std::string AuditTable::text() const {
  std::ostringstream os;
  os << "architecture: " << arch << "\n";
  char line[160];
  std::snprintf(line, sizeof line, "%-14s %-12s %12s %12s\n", "node", "kind", "params", "closed_form");
  os << line;
  for (const AuditRow& r : rows) {
    std::snprintf(line, sizeof line, "%-14s %-12s %12zu %12s\n", r.node.c_str(), r.kind.c_str(), r.params,
                  r.closed_form ? std::to_string(r.closed_form).c_str() : "-");
    os << line;
  }
  for (const auto& [k, v] : subtotals) {
    std::snprintf(line, sizeof line, "subtotal %-18s %12zu\n", k.c_str(), v);
    os << line;
  }
  std::snprintf(line, sizeof line, "total %21s %12zu\n", "", total);
  os << line;
  return os.str();
}

std::string AuditTable::key_values() const {
  std::ostringstream os;
  os << "arch=" << arch << "\n";
  for (const AuditRow& r : rows) {
    os << "node." << r.node << ".kind=" << r.kind << "\n";
    os << "node." << r.node << ".params=" << r.params << "\n";
    if (r.closed_form) os << "node." << r.node << ".closed_form=" << r.closed_form << "\n";
  }
  for (const auto& [k, v] : subtotals) os << "subtotal." << k << "=" << v << "\n";
  os << "total=" << total << "\n";
  return os.str();
}

AuditTable count_params(const DepthNet& net) {
  AuditTable t;
  const ParamStore& st = net.params();
  const NodeGraph& g = net.graph();
  const ArchConfig& cfg = g.config;
  t.arch = to_string(cfg.encoder_kind) + (cfg.dense ? "+dense" : "+unet") + "+" + to_string(cfg.fusion);
  auto row = [&](const std::string& node, const std::string& kind, std::size_t closed = 0) {
    AuditRow r{node, kind, st.count(node + "."), closed};
    t.subtotals[kind] += r.params;
    t.rows.push_back(r);
  };
  for (int i = 1; i <= cfg.num_levels; ++i) row("encoder." + std::to_string(i), "encoder");
  for (const GraphNode& n : g.nodes) {
    if (n.kind == NodeKind::kAggregation) row(n.name, "aggregation");
    if (n.kind == NodeKind::kDecoder) {
      row(n.name + ".up", "upsample");
      row(n.name + ".fuse", "fusion",
          fuse_params_closed_form({.c_in = n.in_channels, .c_out = n.out_channels, .kind = cfg.fusion, .r = cfg.reduction}));
    }
    if (n.kind == NodeKind::kDisp) row(n.name, "disp");
  }
  for (const auto& [k, v] : t.subtotals) t.total += v;
  if (t.total != st.count()) throw ContractViolation("audit rows do not cover every parameter");
  t.subtotals["decoder"] = t.total - t.subtotals["encoder"];
  return t;
}

std::vector<std::pair<std::string, Tensor>> named_tensors(const ParamStore& store) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < store.size(); ++i) out.emplace_back(store.name(i), store.value(i));
  return out;
}

void load_named(ParamStore& store, const std::vector<std::pair<std::string, Tensor>>& tensors) {
  if (tensors.size() != store.size())
    throw ContractViolation("checkpoint has " + std::to_string(tensors.size()) + " tensors, model has " +
                            std::to_string(store.size()));
  for (const auto& [name, t] : tensors) {
    const std::size_t i = store.find(name);
    if (i == ParamStore::kNone) throw ContractViolation("checkpoint tensor " + name + " has no matching parameter");
    store.set_value(i, t);
  }
}

}  // namespace hrdepth
