#include <cmath>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "hrdepth/gradcheck.hpp"
#include "hrdepth/training.hpp"

using namespace hrdepth;

namespace {

TrainConfig small_config(int frames, int epochs, int decay_epoch) {
  TrainConfig c;
  c.width = 64;
  c.height = 64;
  c.frames = frames;
  c.epochs = epochs;
  c.decay_epoch = decay_epoch;
  c.loss.num_scales = 2;
  c.seed = 7;
  return c;
}

std::string checkpoint_bytes(const Checkpoint& ck) {
  std::ostringstream os;
  write_checkpoint(os, ck);
  return os.str();
}

std::vector<double> trainable_values(const ParamStore& s) {
  std::vector<double> out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s.trainable(i)) {
      auto d = s.value(i).data();
      out.insert(out.end(), d.begin(), d.end());
    }
  return out;
}

}  // namespace

TEST_CASE("adam first step moves by lr against the gradient sign") {
  ParamStore store;
  store.add("w", Tensor::scalar(0.5));
  Adam opt;
  opt.attach(store, "");
  REQUIRE(opt.step({{1.0}}, 1e-3));
  // m_hat = v_hat = g, so the step is lr * g / (|g| + eps).
  CHECK(store.value(0).item() - 0.5 == doctest::Approx(-1e-3 / (1.0 + 1e-8)).epsilon(1e-12));
  CHECK(opt.steps() == 1);
}

TEST_CASE("adam zero gradient from rest leaves parameters, moments decay afterwards") {
  ParamStore store;
  store.add("w", Tensor(Shape{1, 1, 1, 3}, 2.0));
  Adam opt;
  opt.attach(store, "");
  REQUIRE(opt.step({{0.0, 0.0, 0.0}}, 1e-3));
  for (double v : store.value(0).data()) CHECK(v == 2.0);
  REQUIRE(opt.step({{1.0, 1.0, 1.0}}, 1e-3));
  REQUIRE(opt.step({{0.0, 0.0, 0.0}}, 1e-3));
  CHECK(opt.first_moment(0)[0] == doctest::Approx(0.9 * 0.1).epsilon(1e-15));
  CHECK(opt.second_moment(0)[0] == doctest::Approx(0.999 * 0.001).epsilon(1e-15));
}

TEST_CASE("adam treats parameters with identical history identically") {
  ParamStore store;
  store.add("a", Tensor(Shape{1, 1, 1, 2}, std::vector<double>{0.3, -0.7}));
  store.add("b", Tensor(Shape{1, 1, 1, 2}, std::vector<double>{0.3, -0.7}));
  Adam opt;
  opt.attach(store, "");
  Rng rng(3);
  for (int k = 0; k < 5; ++k) {
    std::vector<double> g{rng.normal(), rng.normal()};
    REQUIRE(opt.step({g, g}, 1e-2));
  }
  CHECK(store.value(0).to_vector() == store.value(1).to_vector());
}

TEST_CASE("adam rejects a non-finite gradient without touching state") {
  ParamStore store;
  store.add("enc.w", Tensor(Shape{1, 1, 1, 2}, 1.0));
  Adam opt;
  opt.attach(store, "depth/");
  REQUIRE(opt.step({{0.5, 0.5}}, 1e-3));
  const auto before = store.value(0).to_vector();
  const auto m = opt.first_moment(0);
  std::string diag;
  CHECK_FALSE(opt.step({{0.5, std::numeric_limits<double>::quiet_NaN()}}, 1e-3, &diag));
  CHECK(diag.find("depth/enc.w") != std::string::npos);
  CHECK(store.value(0).to_vector() == before);
  CHECK(opt.first_moment(0) == m);
  CHECK(opt.steps() == 1);
}

TEST_CASE("adam state survives a checkpoint round trip") {
  ParamStore store;
  store.add("w", Tensor(Shape{1, 2, 1, 1}, 1.0));
  store.add("stat", Tensor(Shape{1, 2, 1, 1}, 0.0), false);
  Adam opt;
  opt.attach(store, "p/");
  CHECK(opt.slots() == 1);
  REQUIRE(opt.step({{0.25, -4.0}}, 1e-3));
  Checkpoint ck;
  opt.save(ck);
  std::stringstream ss;
  write_checkpoint(ss, ck);
  Checkpoint back = read_checkpoint(ss);
  Adam other;
  other.attach(store, "p/");
  other.load(back);
  CHECK(other.steps() == 1);
  CHECK(other.first_moment(0) == opt.first_moment(0));
  CHECK(other.second_moment(0) == opt.second_moment(0));
}

TEST_CASE("train config parses, round trips and rejects bad input") {
  TrainConfig c = parse_train_config(
      "# toy run\nmode = selfsup\narch = toy-res18\nfusion = conv3x3\nepochs = 4\ndecay_epoch = 3\n"
      "lr = 2e-4\nsteps = 10\nwidth = 96\nheight = 64\nscales = 3\nautomask = true\nseed = 9\n");
  CHECK(c.fusion == FusionKind::kConv3x3);
  CHECK(c.epochs == 4);
  CHECK(c.lr == 2e-4);
  CHECK(c.max_steps == 10);
  CHECK(c.loss.num_scales == 3);
  CHECK(c.loss.automask);
  c.validate();
  TrainConfig back = parse_train_config(c.to_text());
  CHECK(back.to_text() == c.to_text());

  CHECK_THROWS_AS(parse_train_config("colour = red\n"), ConfigError);
  CHECK_THROWS_AS(parse_train_config("epochs = many\n"), ConfigError);
  CHECK_THROWS_AS(parse_train_config("arch = vgg\n"), ConfigError);
  CHECK_THROWS_AS(parse_train_config("epochs\n"), ConfigError);
  CHECK_THROWS_AS(parse_train_config("epochs = 5\ndecay_epoch = 5\n").validate(), ConfigError);
  CHECK_THROWS_AS(parse_train_config("width = 100\n").validate(), ConfigError);
}

TEST_CASE("learning rate drops by the decay factor at the decay epoch") {
  TrainConfig c;
  CHECK(scheduled_lr(c, 0) == 1e-3);
  CHECK(scheduled_lr(c, 14) == 1e-3);
  CHECK(scheduled_lr(c, 15) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(scheduled_lr(c, 19) == doctest::Approx(1e-4).epsilon(1e-15));
}

TEST_CASE("self-supervised loop follows the schedule and is bitwise deterministic") {
  TrainConfig c = small_config(5, 2, 1);  // 3 samples, 3 steps per epoch
  const auto data = load_training_data(c);
  REQUIRE(data.size() == 3);
  int checkpoints = 0;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](int, const Checkpoint&) { ++checkpoints; };
  TrainResult a = train_selfsup(c, data, hooks);
  TrainResult b = train_selfsup(c, data);
  REQUIRE(a.log.size() == 6);
  CHECK_FALSE(a.aborted);
  CHECK(checkpoints == 2);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].line() == b.log[i].line());
    CHECK(a.log[i].lr == (i < 3 ? 1e-3 : 1e-4));
    CHECK(std::isfinite(a.log[i].loss));
  }
  CHECK(checkpoint_bytes(a.checkpoint) == checkpoint_bytes(b.checkpoint));
  CHECK(a.checkpoint.meta.at("step") == "6");
}

TEST_CASE("zero learning rate keeps parameters and loss constant") {
  TrainConfig c = small_config(3, 3, 2);  // a single sample
  c.lr = 0.0;
  const auto data = load_training_data(c);
  TrainResult r = train_selfsup(c, data);
  REQUIRE(r.log.size() == 3);
  CHECK(r.log[1].loss == r.log[0].loss);
  CHECK(r.log[2].loss == r.log[0].loss);
  ArchConfig a = toy_res18();
  a.num_scales = 2;
  DepthNet initial(a, c.seed);
  DepthNet trained = depth_net_from_checkpoint(r.checkpoint);
  CHECK(trainable_values(trained.params()) == trainable_values(initial.params()));
}

TEST_CASE("resuming from an epoch checkpoint continues the loss log exactly") {
  TrainConfig c = small_config(4, 3, 2);  // 2 samples, 2 steps per epoch
  const auto data = load_training_data(c);
  Checkpoint mid;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](int epoch, const Checkpoint& ck) {
    if (epoch == 0) mid = ck;
  };
  TrainResult full = train_selfsup(c, data, hooks);
  REQUIRE(full.log.size() == 6);
  std::stringstream ss;
  write_checkpoint(ss, mid);
  Checkpoint restored = read_checkpoint(ss);
  TrainResult rest = train_selfsup(c, data, {}, &restored);
  REQUIRE(rest.log.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(rest.log[i].step == full.log[i + 2].step);
    CHECK(std::abs(rest.log[i].loss - full.log[i + 2].loss) <= 1e-10);
  }
  CHECK(checkpoint_bytes(rest.checkpoint) == checkpoint_bytes(full.checkpoint));

  TrainConfig other = c;
  other.seed = 8;
  CHECK_THROWS_AS(train_selfsup(other, data, {}, &restored), ContractViolation);
}

TEST_CASE("one step on random data changes nearly every parameter") {
  // Large enough that the deepest feature maps are not a couple of pixels wide;
  // on tiny inputs whole ReLU channels are inactive and receive exactly zero gradient.
  const int S = 192;
  std::vector<Sample> data;
  for (std::uint64_t k = 0; k < 2; ++k) {
    Sample s;
    s.id = "random" + std::to_string(k);
    s.target = random_tensor({1, 3, S, S}, 11 + 3 * k, 0.0, 1.0);
    s.sources = {random_tensor({1, 3, S, S}, 12 + 3 * k, 0.0, 1.0), random_tensor({1, 3, S, S}, 13 + 3 * k, 0.0, 1.0)};
    s.source_poses = {std::nullopt, std::nullopt};
    s.K = CameraIntrinsics::centered(0.58 * S, 1.92 * S, S, S);
    data.push_back(s);
  }
  TrainConfig c = small_config(3, 1, 0);
  c.width = c.height = S;
  c.batch_size = 2;
  TrainConfig c0 = c;
  c0.lr = 0.0;
  TrainResult before = train_selfsup(c0, data);
  TrainResult after = train_selfsup(c, data);
  std::size_t total = 0, changed = 0;
  for (const auto& [name, t] : before.checkpoint.tensors) {
    if (name.rfind("adam/", 0) == 0) continue;
    const Tensor& u = after.checkpoint.tensor(name);
    if (name.find("running_") != std::string::npos) continue;
    for (std::size_t i = 0; i < t.numel(); ++i) {
      ++total;
      changed += t.data()[i] != u.data()[i];
    }
  }
  REQUIRE(total > 0);
  CHECK(static_cast<double>(changed) / static_cast<double>(total) >= 0.99);
}

TEST_CASE("non-finite loss aborts with the last good checkpoint") {
  TrainConfig c = small_config(3, 2, 1);
  auto data = load_training_data(c);
  std::vector<double> v = data[0].target.to_vector();
  v[100] = std::numeric_limits<double>::quiet_NaN();
  data[0].target = Tensor(data[0].target.shape(), v);
  std::string diag;
  TrainHooks hooks;
  hooks.on_diagnostic = [&](const std::string& d) { diag = d; };
  TrainResult r = train_selfsup(c, data, hooks);
  CHECK(r.aborted);
  CHECK(r.log.empty());
  CHECK(r.checkpoint.meta.at("step") == "0");
  CHECK(diag.find("non-finite loss") != std::string::npos);
}

TEST_CASE("distillation keeps the teacher frozen and reduces the gap") {
  TrainConfig tc = small_config(4, 1, 0);
  const auto data = load_training_data(tc);
  ArchConfig ta = toy_res18();
  ta.num_scales = 2;
  DepthNet teacher(ta, 5);
  const std::uint64_t hash = params_hash(teacher.params());

  TrainConfig c = small_config(4, 6, 5);
  c.mode = TrainMode::kDistill;
  c.arch = "hr-depth-lite";
  c.teacher = "in-memory";
  c.lr = 1e-3;
  TrainResult r = train_distill(c, teacher, data);
  REQUIRE(r.log.size() == 12);
  CHECK(params_hash(teacher.params()) == hash);
  CHECK(r.log.back().loss < r.log.front().loss);
  CHECK(r.checkpoint.meta.at("arch") == "hr-depth-lite");
  CHECK(r.checkpoint.meta.at("mode") == "distill");

  DepthNet student = depth_net_from_checkpoint(r.checkpoint);
  CHECK(student.config().encoder_kind == EncoderKind::kMobileLite);

  TrainConfig bad = c;
  bad.loss.num_scales = 3;
  CHECK_THROWS_AS(train_distill(bad, teacher, data), ContractViolation);
}

TEST_CASE("self-distillation from an identical network starts near zero") {
  TrainConfig c = small_config(3, 1, 0);  // a single sample
  c.mode = TrainMode::kDistill;
  c.teacher = "in-memory";
  c.lr = 0.0;
  c.arch = "toy-res18";
  const auto data = load_training_data(c);
  ArchConfig ta = toy_res18();
  ta.num_scales = 2;
  DepthNet twin(ta, c.seed);
  DepthNet stranger(ta, c.seed + 100);
  // Settle the running statistics on the sample so inference matches batch statistics.
  for (int k = 0; k < 200; ++k) {
    twin.forward(data[0].target, Mode{true});
    stranger.forward(data[0].target, Mode{true});
  }
  const double same = train_distill(c, twin, data).log.front().loss;
  const double diff = train_distill(c, stranger, data).log.front().loss;
  MESSAGE("same-weights loss " << same << ", different-weights loss " << diff);
  CHECK(same < 1e-2 * diff);
}
