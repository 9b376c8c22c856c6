#include <gtest/gtest.h>

#include <filesystem>

#include "drsf/grad_check.hpp"
#include "drsf/model.hpp"
#include "drsf/ops.hpp"
#include "drsf/rng.hpp"

using namespace drsf;
using namespace drsf::model;

namespace {

Tensor random_images(RngStream& rng, std::size_t n, std::size_t hw) {
  std::vector<double> v(n * 3 * hw * hw);
  for (double& x : v) x = rng.uniform(0.0, 1.0);
  return Tensor({n, 3, hw, hw}, std::move(v));
}

ModelConfig small_config(TaskMode mode = TaskMode::segmentation) {
  ModelConfig cfg;
  cfg.backbone.stage_channels = {4, 6, 8};
  cfg.backbone.dfdr_mask = {true, true, true};
  cfg.head.mode = mode;
  return cfg;
}

void zero_head(Model& m) {
  for (const char* name : {"head.weight", "head.bias"}) {
    Parameter& p = m.params().get(name);
    p.value = Tensor::zeros(p.value.shape()).as_trainable();
  }
}

}  // namespace

TEST(Backbone, MaskAllFalseHasNoSideOutputsAndNoDfdrParams) {
  ModelConfig cfg = small_config();
  cfg.backbone.dfdr_mask = {false, false, false};
  Model m(cfg, 1);
  RngStream rng(1);
  EXPECT_TRUE(m.forward(random_images(rng, 2, 8), Mode::train).sides.empty());
  EXPECT_EQ(count_params(m).dfdr_only, 0u);
  EXPECT_EQ(m.params().scalar_count("dfdr."), 0u);
}

TEST(Backbone, SideOutputsFollowMaskInTrainModeOnly) {
  ModelConfig cfg = small_config();
  cfg.backbone.dfdr_mask = {true, false, true};
  Model m(cfg, 2);
  RngStream rng(2);
  const Tensor x = random_images(rng, 2, 8);
  const ForwardResult train = m.forward(x, Mode::train);
  ASSERT_EQ(train.sides.size(), 2u);
  EXPECT_EQ(train.sides[0].stage, 0u);
  EXPECT_EQ(train.sides[1].stage, 2u);
  EXPECT_EQ(train.final_primary.shape(), train.features.shape());
  EXPECT_TRUE(m.forward(x, Mode::eval).sides.empty());
}

TEST(Backbone, IndivisibleImageSizeRejected) {
  Model m(small_config(), 3);
  EXPECT_THROW(m.forward(Tensor::zeros({1, 3, 6, 6}), Mode::eval), ShapeError);
  EXPECT_THROW(m.forward(Tensor::zeros({1, 1, 8, 8}), Mode::eval), ShapeError);
}

TEST(Backbone, MaskLengthMustMatchStages) {
  ModelConfig cfg = small_config();
  cfg.backbone.dfdr_mask = {true, true};
  EXPECT_THROW(Model(cfg, 0), InvalidArgument);
}

TEST(Backbone, EvalMatchesTrainUnderControlledRunningStats) {
  ModelConfig cfg = small_config();
  cfg.bn_momentum = 1.0;  // running stats become exactly this batch's stats
  Model m(cfg, 4);
  RngStream rng(4);
  const Tensor x = random_images(rng, 4, 8);
  const ForwardResult train = m.forward(x, Mode::train);
  for (const StageSide& s : train.sides) m.set_running(s.stage, s.running);
  const ForwardResult eval = m.forward(x, Mode::eval);
  for (std::size_t i = 0; i < eval.logits.numel(); ++i) EXPECT_NEAR(eval.logits[i], train.logits[i], 1e-10);
}

TEST(Backbone, GradientMatchesFiniteDifferencesOnRandomParameters) {
  Model m(small_config(), 5);
  RngStream rng(5);
  const Tensor x = random_images(rng, 2, 8);
  const auto loss = [&]() {
    const ForwardResult r = m.forward(x, Mode::train);
    return dfdr::prediction_entropy(softmax(r.logits, 1), TaskMode::segmentation);
  };
  GradCheckOptions opts;
  opts.max_coords = 10;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    opts.seed = seed;
    EXPECT_LT(grad_check_params(loss, m.params(), opts).max_rel_error, 1e-4);
  }
}

TEST(Head, ZeroWeightsGiveUniformPixels) {
  Model m(small_config(), 6);
  zero_head(m);
  RngStream rng(6);
  const Tensor p = softmax(m.forward(random_images(rng, 2, 8), Mode::eval).logits, 1);
  for (double v : p.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Head, SegmentationShapeContractAcrossConfigs) {
  RngStream rng(7);
  for (const auto& channels : {std::vector<std::size_t>{4}, std::vector<std::size_t>{4, 4},
                               std::vector<std::size_t>{3, 5, 7, 9}}) {
    ModelConfig cfg = small_config();
    cfg.backbone.stage_channels = channels;
    cfg.backbone.dfdr_mask.assign(channels.size(), true);
    Model m(cfg, 7);
    const ForwardResult r = m.forward(random_images(rng, 2, 16), Mode::train);
    EXPECT_EQ(r.logits.shape(), (Shape{2, 4, 16, 16}));
  }
}

TEST(Head, SoftmaxRowsSumToOne) {
  Model m(small_config(), 8);
  RngStream rng(8);
  const Tensor p = softmax(m.forward(random_images(rng, 2, 8), Mode::eval).logits, 1);
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < 64; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += p[(n * 4 + k) * 64 + i];
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Head, ClassificationLogitsArePooled) {
  Model m(small_config(TaskMode::classification), 9);
  RngStream rng(9);
  EXPECT_EQ(m.forward(random_images(rng, 3, 8), Mode::eval).logits.shape(), (Shape{3, 4}));
  EXPECT_THROW(m.head_forward(Tensor::zeros({1, 5, 2, 2}), 8, 8), ShapeError);
}

TEST(CountParams, EachStageAddsSixC) {
  ModelConfig cfg = small_config();
  cfg.backbone.dfdr_mask = {false, false, false};
  const std::size_t base = count_params(Model(cfg, 0)).total;
  for (std::size_t s = 0; s < 3; ++s) {
    ModelConfig one = cfg;
    one.backbone.dfdr_mask[s] = true;
    const ParamCount c = count_params(Model(one, 0));
    EXPECT_EQ(c.dfdr_only, 6 * cfg.backbone.stage_channels[s]);
    EXPECT_EQ(c.total, base + c.dfdr_only);
    EXPECT_DOUBLE_EQ(c.delta_fraction, static_cast<double>(c.dfdr_only) / static_cast<double>(base));
  }
}

TEST(CountParams, ClassifierIsExcluded) {
  ModelConfig cfg = small_config();
  const ParamCount without = count_params(Model(cfg, 0));
  cfg.num_domains = 4;
  const Model with(cfg, 0);
  EXPECT_TRUE(with.has_classifier());
  EXPECT_GT(with.params().scalar_count("mdsf."), 0u);
  EXPECT_EQ(count_params(with).total, without.total);
}

TEST(CountParams, DefaultConfigOverheadIsSmall) {
  const ParamCount c = count_params(Model(ModelConfig{}, 0));
  // conv: 3*16*9+16 + 16*32*9+32 + 32*64*9+64 = 23584; head 64*4+4 = 260; dfdr 6*(16+32+64) = 672.
  EXPECT_EQ(c.total, 23584u + 260u + 672u);
  EXPECT_EQ(c.dfdr_only, 672u);
  EXPECT_LT(c.delta_fraction, 0.10);
}

TEST(EvalGraph, NoInterferenceMdsfOrLossNodes) {
  ModelConfig cfg = small_config();
  cfg.num_domains = 3;
  Model m(cfg, 10);
  RngStream rng(10);
  const Tensor x = random_images(rng, 2, 8);
  Tape tape(Tape::Kind::trace);
  m.forward(x, Mode::eval);
  ASSERT_FALSE(tape.nodes().empty());
  bool saw_gain = false;
  for (const TapeNode& n : tape.nodes()) {
    EXPECT_EQ(n.scope.find("interference"), std::string::npos) << n.op << " in " << n.scope;
    EXPECT_EQ(n.scope.find("mdsf"), std::string::npos) << n.op << " in " << n.scope;
    EXPECT_EQ(n.scope.find("loss"), std::string::npos) << n.op << " in " << n.scope;
    saw_gain = saw_gain || n.scope.find("dfdr/gain") != std::string::npos;
  }
  EXPECT_TRUE(saw_gain);
}

TEST(EvalGraph, TrainGraphDoesContainInterference) {
  Model m(small_config(), 11);
  RngStream rng(11);
  Tape tape(Tape::Kind::trace);
  m.forward(random_images(rng, 2, 8), Mode::train);
  bool saw = false;
  for (const TapeNode& n : tape.nodes()) saw = saw || n.scope.find("interference") != std::string::npos;
  EXPECT_TRUE(saw);
}

TEST(Init, DeterministicPerSeedAndName) {
  const Model a(small_config(), 12), b(small_config(), 12), c(small_config(), 13);
  EXPECT_EQ(checkpoint_hash(a), checkpoint_hash(b));
  EXPECT_NE(checkpoint_hash(a), checkpoint_hash(c));
  // Adding the classifier must not change any other parameter's initial value.
  ModelConfig with = small_config();
  with.num_domains = 3;
  const Model d(with, 12);
  for (const Parameter& p : a.params()) EXPECT_EQ(d.params().get(p.name).value.to_vector(), p.value.to_vector()) << p.name;
}

TEST(Checkpoint, RoundTripPreservesEverything) {
  ModelConfig cfg = small_config();
  cfg.num_domains = 3;
  Model m(cfg, 14);
  RngStream rng(14);
  const Tensor x = random_images(rng, 2, 8);
  for (const StageSide& s : m.forward(x, Mode::train).sides) m.set_running(s.stage, s.running);
  const auto path = std::filesystem::temp_directory_path() / "drsf_test_model.ckpt";
  save_checkpoint(m, path.string());
  const Model back = load_checkpoint(path.string());
  EXPECT_EQ(checkpoint_hash(back), checkpoint_hash(m));
  EXPECT_EQ(back.forward(x, Mode::eval).logits.to_vector(), m.forward(x, Mode::eval).logits.to_vector());
  EXPECT_EQ(back.running(1)->var, m.running(1)->var);
}

TEST(Checkpoint, CorruptionIsDataError) {
  const std::string bytes = serialize_checkpoint(Model(small_config(), 15));
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
  std::string flipped = bytes;
  flipped[flipped.size() - 5] ^= 0x10;
  EXPECT_THROW(deserialize_checkpoint(flipped), DataError);
  EXPECT_THROW(load_checkpoint("/nonexistent/model.ckpt"), DataError);
}
