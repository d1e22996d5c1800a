#include <algorithm>
#include <set>
#include <sstream>

#include "doctest.h"
#include "hrdepth/arch.hpp"
#include "hrdepth/gradcheck.hpp"
#include "hrdepth/serialize.hpp"

using namespace hrdepth;

TEST_CASE("residual18 graph has the dense node pattern") {
  NodeGraph g = build_graph(hr_depth_res18());
  CHECK(g.count(NodeKind::kEncoder) == 5);
  CHECK(g.count(NodeKind::kAggregation) == 6);
  CHECK(g.count(NodeKind::kDecoder) == 5);
  CHECK(g.count(NodeKind::kDisp) == 4);
  // Row i carries L-1-i aggregation nodes.
  for (int i = 1; i <= 3; ++i)
    for (int j = 1; j <= 4 - i; ++j) CHECK_NOTHROW(g.find("agg." + std::to_string(i) + "." + std::to_string(j)));
  CHECK_THROWS(g.find("agg.4.1"));
  CHECK_THROWS(g.find("agg.1.4"));
}

TEST_CASE("aggregation nodes take the expected inputs") {
  NodeGraph g = build_graph(hr_depth_res18());
  const GraphNode& a11 = g.at("agg.1.1");
  CHECK(a11.upsampled == g.find("enc.2"));
  CHECK(a11.skips == std::vector<int>{g.find("enc.1")});
  const GraphNode& a13 = g.at("agg.1.3");
  CHECK(a13.upsampled == g.find("agg.2.2"));
  CHECK(a13.skips == std::vector<int>{g.find("enc.1"), g.find("agg.1.1"), g.find("agg.1.2")});
  const GraphNode& d1 = g.at("dec.1");
  CHECK(d1.upsampled == g.find("dec.2"));
  CHECK(d1.skips == std::vector<int>{g.find("enc.1"), g.find("agg.1.1"), g.find("agg.1.2"), g.find("agg.1.3")});
  CHECK(g.at("dec.4").upsampled == g.find("enc.5"));
  CHECK(g.at("dec.4").skips == std::vector<int>{g.find("enc.4")});
  CHECK(g.at("dec.0").skips.empty());
  // Topological order: every input precedes its consumer.
  for (const GraphEdge& e : g.edges()) CHECK(e.from < e.to);
}

TEST_CASE("decoder input channels equal the concatenation widths") {
  for (const ArchConfig& cfg : {hr_depth_res18(), hr_depth_lite(), baseline_unet(), toy_res18()}) {
    NodeGraph g = build_graph(cfg);
    for (int i = 1; i < cfg.num_levels; ++i) {
      const GraphNode& d = g.at("dec." + std::to_string(i));
      int expected = cfg.encoder_channels[i - 1] + d.up_out;
      for (int s : d.skips)
        if (g.nodes[s].kind == NodeKind::kAggregation) expected += g.nodes[s].out_channels;
      CHECK(d.in_channels == expected);
      CHECK(d.up_out == cfg.decoder_channels[i]);
    }
  }
}

TEST_CASE("two-level graph degenerates to a plain skip") {
  ArchConfig cfg = toy_res18();
  cfg.num_levels = 2;
  cfg.encoder_channels = {16, 16};
  cfg.decoder_channels = {8, 8};
  cfg.num_scales = 1;
  NodeGraph g = build_graph(cfg);
  CHECK(g.count(NodeKind::kAggregation) == 0);
  CHECK(g.at("dec.1").skips == std::vector<int>{g.find("enc.1")});
  DepthNet net(cfg, 1);
  auto out = net.forward(random_tensor(Shape{1, 3, 8, 12}, 2, 0.0, 1.0));
  REQUIRE(out.size() == 1);
  CHECK(out[0].shape() == Shape{1, 1, 8, 12});
}

TEST_CASE("fusion kind leaves the topology unchanged") {
  auto edges = [](FusionKind k) {
    std::vector<std::tuple<int, int, bool>> v;
    for (const GraphEdge& e : build_graph(hr_depth_res18(k)).edges()) v.emplace_back(e.from, e.to, e.upsampled);
    return v;
  };
  CHECK(edges(FusionKind::kConv3x3) == edges(FusionKind::kFse));
  CHECK(edges(FusionKind::kSePlusConv) == edges(FusionKind::kFse));
}

TEST_CASE("inconsistent channel lists name the offending node") {
  ArchConfig cfg = hr_depth_res18();
  cfg.decoder_channels = {16, 32, 64};
  try {
    build_graph(cfg);
    FAIL("expected BuildError");
  } catch (const BuildError& e) {
    CHECK(std::string(e.what()).find("dec.3") != std::string::npos);
  }
  cfg = hr_depth_res18();
  cfg.decoder_channels = {16, 32, 64, 128, 254};
  try {
    build_graph(cfg);
    FAIL("expected BuildError");
  } catch (const BuildError& e) {
    CHECK(std::string(e.what()).find("dec.4") != std::string::npos);
  }
  cfg = hr_depth_res18();
  cfg.num_scales = 5;
  CHECK_THROWS_AS(build_graph(cfg), BuildError);
}

TEST_CASE("fusion block closed forms") {
  CHECK(fuse_params_closed_form({.c_in = 64, .c_out = 32, .kind = FusionKind::kFse, .r = 4}) == 4128);
  CHECK(fuse_params_closed_form({.c_in = 64, .c_out = 32, .kind = FusionKind::kConv3x3, .r = 4}) == 18464);
  for (FusionKind k : {FusionKind::kFse, FusionKind::kConv3x3, FusionKind::kSePlusConv}) {
    ParamStore st;
    Rng rng(3);
    FuseBlockSpec spec{.c_in = 64, .c_out = 32, .kind = k, .r = 4};
    FuseBlock b(st, "f", spec, rng);
    CHECK(st.count() == fuse_params_closed_form(spec));
  }
  ParamStore st;
  Rng rng(3);
  CHECK_THROWS_AS(FuseBlock(st, "bad", {.c_in = 30, .c_out = 8, .kind = FusionKind::kFse, .r = 4}, rng), BuildError);
}

TEST_CASE("saturated fSE gate reduces to a 1x1 conv of the concatenation") {
  ParamStore st;
  Rng rng(5);
  FuseBlock b(st, "f", {.c_in = 16, .c_out = 6, .kind = FusionKind::kFse, .r = 4}, rng);
  st.set_value(b.squeeze_index(), Tensor(st.value(b.squeeze_index()).shape(), 1.0));
  st.set_value(b.excite_index(), Tensor(st.value(b.excite_index()).shape(), 100.0));
  Tensor a = random_tensor(Shape{2, 10, 4, 5}, 6, 0.1, 1.0);
  Tensor c = random_tensor(Shape{2, 6, 4, 5}, 7, 0.1, 1.0);
  Tensor y = b({a, c});
  for (double g : b.gate(concat_channels({a, c})).to_vector()) CHECK(g == 1.0);
  Tensor ref = elu(conv2d(concat_channels({a, c}), st.value(st.find("f.conv.weight")), st.value(st.find("f.conv.bias")), {}));
  CHECK(y.to_vector() == ref.to_vector());
}

TEST_CASE("parameter audit reproduces the budget plan") {
  auto total = [](const ArchConfig& c) {
    AuditTable t = count_params(DepthNet(c, 1));
    CHECK(t.closed_forms_match());
    return t;
  };
  AuditTable base = total(baseline_unet());
  AuditTable conv = total(hr_depth_res18(FusionKind::kConv3x3));
  AuditTable fse = total(hr_depth_res18(FusionKind::kFse));
  AuditTable lite = total(hr_depth_lite());
  CHECK(base.subtotals["encoder"] == 11176512);
  CHECK(base.total == 14329236);
  CHECK(conv.total == 15666260);
  CHECK(fse.total == 14298324);
  CHECK(lite.subtotals["encoder"] == 2816432);
  CHECK(lite.total == 3175788);
  CHECK(conv.total > base.total);
  CHECK(base.total > fse.total);
  CHECK(fse.total > lite.total);
  CHECK(fse.text().find("dec.3.fuse") != std::string::npos);
  CHECK(fse.key_values().find("total=14298324\n") != std::string::npos);
}

TEST_CASE("conv3x3 fusion always costs more than fSE") {
  for (const ArchConfig& base : {hr_depth_res18(), hr_depth_lite(), toy_res18()}) {
    ArchConfig c = base;
    c.fusion = FusionKind::kConv3x3;
    CHECK(count_params(DepthNet(c, 1)).total > count_params(DepthNet(base, 1)).total);
  }
}

TEST_CASE("depth maps follow the scale arithmetic and lie in (0,1)") {
  DepthNet net(hr_depth_res18(), 11);
  auto out = net.forward(random_tensor(Shape{1, 3, 192, 640}, 12, 0.0, 1.0));
  REQUIRE(out.size() == 4);
  const int hs[] = {192, 96, 48, 24}, ws[] = {640, 320, 160, 80};
  for (int k = 0; k < 4; ++k) {
    CHECK(out[k].shape() == Shape{1, 1, hs[k], ws[k]});
    const auto v = out[k].to_vector();
    CHECK(*std::min_element(v.begin(), v.end()) > 0.0);
    CHECK(*std::max_element(v.begin(), v.end()) < 1.0);
  }
  DepthNet toy(toy_res18(), 11);
  auto hi = toy.forward(random_tensor(Shape{1, 3, 320, 1024}, 13, 0.0, 1.0));
  CHECK(hi[0].shape() == Shape{1, 1, 320, 1024});
  CHECK(hi[3].shape() == Shape{1, 1, 40, 128});
  CHECK_THROWS_AS(toy.forward(Tensor(Shape{1, 3, 48, 50})), ContractViolation);
}

TEST_CASE("lite network runs end to end") {
  DepthNet net(hr_depth_lite(), 3);
  auto out = net.forward(random_tensor(Shape{2, 3, 64, 96}, 4, 0.0, 1.0));
  CHECK(out[0].shape() == Shape{2, 1, 64, 96});
  CHECK(out[3].shape() == Shape{2, 1, 8, 12});
}

TEST_CASE("pose network contract") {
  PoseNet pose(toy_pose(), 21);
  Tensor pair = random_tensor(Shape{2, 6, 64, 96}, 22, 0.0, 1.0);
  Tensor p = pose.forward(pair);
  CHECK(p.shape() == Shape{2, 6, 1, 1});
  CHECK(p.to_vector() == pose.forward(pair).to_vector());
  PoseNet again(toy_pose(), 21);
  CHECK(again.forward(pair).to_vector() == p.to_vector());
  auto [w, b] = pose.head_indices();
  pose.params().set_value(w, Tensor(pose.params().value(w).shape(), 0.0));
  pose.params().set_value(b, Tensor(pose.params().value(b).shape(), 0.0));
  for (double v : pose.forward(pair).to_vector()) CHECK(v == 0.0);
  CHECK(pose.forward(random_tensor(Shape{1, 6, 32, 32}, 23)).shape() == Shape{1, 6, 1, 1});
  CHECK_THROWS_AS(pose.forward(Tensor(Shape{1, 3, 64, 64})), ContractViolation);
}

TEST_CASE("every parameter receives gradient") {
  for (const ArchConfig& cfg : {toy_res18(), hr_depth_lite()}) {
    DepthNet net(cfg, 31);
    ParamStore& st = net.params();
    std::set<std::size_t> reached;
    for (int trial = 0; trial < 5; ++trial) {
      Tape tape;
      st.bind(tape);
      auto out = net.forward(random_tensor(Shape{2, 3, 64, 64}, 40 + trial, 0.0, 1.0), Mode{.training = true});
      Tensor loss = sum(out[0]);
      for (std::size_t k = 1; k < out.size(); ++k) loss = add(loss, sum(out[k]));
      Gradients g = tape.backward(loss);
      for (std::size_t i = 0; i < st.size(); ++i) {
        if (!st.trainable(i)) continue;
        const Tensor gi = g.of(st.get(i));
        for (double v : gi.data())
          if (v != 0.0) {
            reached.insert(i);
            break;
          }
      }
      st.unbind();
    }
    std::size_t trainable = 0;
    for (std::size_t i = 0; i < st.size(); ++i) {
      if (!st.trainable(i)) continue;
      ++trainable;
      if (!reached.count(i)) INFO("no gradient reached " << st.name(i));
      CHECK(reached.count(i) == 1);
    }
    CHECK(reached.size() == trainable);
  }
}

TEST_CASE("checkpoint round trip restores identical outputs") {
  DepthNet a(toy_res18(), 1), b(toy_res18(), 2);
  Tensor img = random_tensor(Shape{1, 3, 64, 64}, 3, 0.0, 1.0);
  CHECK(a.forward(img)[0].to_vector() != b.forward(img)[0].to_vector());
  Checkpoint ck;
  ck.meta["arch"] = "toy-res18";
  ck.tensors = named_tensors(a.params());
  std::stringstream ss;
  write_checkpoint(ss, ck);
  Checkpoint back = read_checkpoint(ss);
  CHECK(back.meta.at("arch") == "toy-res18");
  load_named(b.params(), back.tensors);
  CHECK(a.forward(img)[0].to_vector() == b.forward(img)[0].to_vector());
  DepthNet lite(hr_depth_lite(), 1);
  CHECK_THROWS_AS(load_named(lite.params(), back.tensors), ContractViolation);
}
