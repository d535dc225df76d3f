#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "jpool/twostream.hpp"

namespace jpool {
namespace {

namespace fs = std::filesystem;
using net3d::c3d_mini;

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

std::vector<VideoSample> videos(std::size_t n, std::uint64_t seed) {
  SynthSpec spec;
  spec.n_videos = n;
  spec.seed = seed;
  return synth_generate(spec);
}

Schedule single_phase(double lr, std::size_t steps, unsigned groups, std::size_t batch) {
  Schedule s;
  s.phases.push_back({"p", lr, steps, groups, 0, 0.1});
  s.batch_size = batch;
  return s;
}

bool params_equal(const net3d::ParamSet& a, const net3d::ParamSet& b) { return a == b; }

// --- attention loss ---------------------------------------------------------------------

TEST(AttentionLoss, PerfectHardPredictionIsZero) {
  const double inf = std::numeric_limits<double>::infinity();
  Tensor target({2, 2, 2, 2});
  target.at({0, 1, 0, 1}) = 1.0;
  target.at({1, 0, 0, 0}) = 1.0;
  Tensor logits(target.dims());
  for (std::size_t k = 0; k < logits.size(); ++k) logits[k] = target[k] == 1.0 ? inf : -inf;
  const auto l = attention_loss(logits, target);
  EXPECT_EQ(l.value, 0.0);
  for (double g : l.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(AttentionLoss, HalfProbabilityGivesLn2PerVoxel) {
  Tensor target({1, 2, 2, 2});
  target.at({0, 1, 1, 0}) = 1.0;
  const auto l = attention_loss(Tensor(target.dims()), target);
  EXPECT_NEAR(l.value / 8.0, 0.693147, 1e-6);
  EXPECT_NEAR(l.value / 8.0, std::log(2.0), 1e-9);
}

TEST(AttentionLoss, GradientIsSigmoidMinusTargetOverM) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> d(-3.0, 3.0), u(0.0, 1.0);
  Tensor logits({4, 2, 2, 2}), target({4, 2, 2, 2});
  for (double& v : logits.values()) v = d(rng);
  for (double& v : target.values()) v = u(rng);
  target[3] = 0.0;
  target[5] = 1.0;
  const auto l = attention_loss(logits, target);
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const double p_hat = 1.0 / (1.0 + std::exp(-logits[k]));
    EXPECT_NEAR(l.grad[k], (p_hat - target[k]) / 4.0, 1e-9);
  }
  const auto numeric = numeric_gradient(logits.storage(), [&] { return attention_loss(logits, target).value; });
  EXPECT_LT(relative_error(l.grad.values(), numeric), 1e-6);
}

TEST(AttentionLoss, StableForLargeLogits) {
  Tensor target({1, 1, 1, 2});
  target[0] = 1.0;
  Tensor logits({1, 1, 1, 2});
  logits[0] = -800.0;
  logits[1] = 800.0;
  const auto l = attention_loss(logits, target);
  EXPECT_DOUBLE_EQ(l.value, 1600.0);
}

TEST(AttentionLoss, ShapeMismatchThrows) {
  EXPECT_THROW(attention_loss(Tensor({2, 2, 2, 2}), Tensor({2, 2, 2, 1})), ShapeError);
}

// --- attention stream -------------------------------------------------------------------

TEST(AttentionNet, MiniOutputShapeAndRange) {
  AttentionNet net(c3d_mini(), "conv5b", 4, 1);
  EXPECT_EQ(net.channels(), 64u);
  Tensor clip({1, 16, 32, 32});
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  for (double& v : clip.values()) v = d(rng);
  const HeatMapStack s = attention_fwd(net, clip);
  EXPECT_EQ(s.maps.dims(), (Dims{64, 2, 2, 2}));
  for (double v : s.maps.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(AttentionNet, ZeroFinalLayerGivesUniformHalf) {
  AttentionNet net(c3d_mini(), "conv5b", 4, 1);
  auto& last = net.network().params()[net.logits_index()];
  last.weight.fill(0.0);
  last.bias.fill(0.0);
  const HeatMapStack s = attention_fwd(net, Tensor({1, 16, 32, 32}, 0.3));
  for (double v : s.maps.values()) EXPECT_EQ(v, 0.5);
}

TEST(AttentionNet, ConfigResizesLastConvAndAddsSigmoid) {
  const auto cfg = attention_config(c3d_mini(), "conv5b", 64);
  EXPECT_EQ(cfg.layers.back().kind, net3d::LayerKind::kSigmoid);
  EXPECT_EQ(cfg.layers[cfg.layers.size() - 2].channels_out, 64u);
  EXPECT_THROW(attention_config(c3d_mini(), "pool5", 64), ConfigError);
  EXPECT_THROW(attention_config(c3d_mini(), "relu5b", 64), ConfigError);
}

TEST(AttentionNet, InheritsTrunkFromFeatureStream) {
  const TwoStreamModel m = make_two_stream(c3d_mini(), "conv5b", 4, 3, 9);
  for (const char* layer : {"conv1a", "conv3b", "conv5a"})
    EXPECT_EQ(m.attention.network().state(layer), m.feature.state(layer)) << layer;
  EXPECT_NE(m.attention.network().state("conv5b").weight.dims(), m.feature.state("conv5b").weight.dims());
}

// --- two-stream forward / backward ------------------------------------------------------

TEST(TwoStream, ScoresFormProbabilityVector) {
  const TwoStreamModel m = make_two_stream(c3d_mini(), "conv5b", 4, 3, 2);
  const auto v = videos(2, 4);
  for (const auto& vid : v) {
    const auto p = two_stream_fwd(m, slice_frames(vid.frames, 0, 16));
    ASSERT_EQ(p.size(), 3u);
    double s = 0.0;
    for (double x : p) {
      EXPECT_GE(x, 0.0);
      s += x;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(TwoStream, HardAttentionWithIdentityReproducesJdd) {
  const auto cfg = c3d_mini();
  const TwoStreamModel m = make_two_stream(cfg, "conv5b", 4, 3, 7);
  ASSERT_EQ(m.w, Matrix::identity(8));
  const net3d::Network extractor(cfg, 7);
  const auto v = videos(3, 11);
  for (const auto& vid : v) {
    const Clip c = make_clip(vid, 0, 16);
    const Matrix hard = make_heatmaps(c.joints, cfg, "conv5b", 16).matrix();
    TwoStreamCache cache;
    two_stream_fwd(m, c.frames, &cache, &hard);
    const Tensor maps = extractor.forward(c.frames, activation_layer(cfg, "conv5b"));
    ExtractOptions opt;
    const PooledMatrix jdd = pool_clip(maps, c.joints, cfg, opt);
    EXPECT_EQ(cache.p, jdd.p);
  }
}

TEST(TwoStream, ZeroFeaturesLeaveHeadBias) {
  TwoStreamModel m = make_two_stream(c3d_mini(), "conv5b", 4, 3, 2);
  m.feature.state("conv5b").weight.fill(0.0);
  m.feature.state("conv5b").bias.fill(0.0);
  auto& bias = m.head.state("fc_out").bias;
  bias[0] = 0.5;
  bias[1] = -1.0;
  bias[2] = 2.0;
  TwoStreamCache cache;
  const auto p = two_stream_fwd(m, Tensor({1, 16, 32, 32}, 0.7), &cache);
  for (double v : cache.p.storage()) EXPECT_EQ(v, 0.0);
  const auto expect = net3d::softmax(bias.values());
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(p[k], expect[k], 1e-15);
}

TEST(TwoStream, EndToEndGradientMatchesFiniteDifferences) {
  const auto r = gradcheck::two_stream();
  EXPECT_TRUE(r.pass()) << r.rel_error;
  EXPECT_LT(r.rel_error, 1e-4);
}

TEST(TwoStream, GradientWithoutNormalizationMatchesFiniteDifferences) {
  TwoStreamModel m = make_two_stream(gradcheck::tiny_two_stream_config(), "conv3a", 1, 2, 4);
  m.normalize = false;
  Tensor clip({1, 4, 8, 8});
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  for (double& v : clip.values()) v = d(rng);
  TwoStreamCache cache;
  two_stream_fwd(m, clip, &cache);
  const auto g = two_stream_bwd(m, cache, 0);
  auto loss = [&] { return -std::log(two_stream_fwd(m, clip)[0]); };
  EXPECT_LT(relative_error(g.w.storage(), numeric_gradient(m.w.storage(), loss)), 1e-4);
  auto& fw = m.feature.state("conv2a").weight.storage();
  EXPECT_LT(relative_error(g.feature[m.feature.config().index_of("conv2a")].weight.storage(),
                           numeric_gradient(fw, loss)),
            1e-4);
}

TEST(TwoStream, HeadGradientIsProbsMinusOneHot) {
  const TwoStreamModel m = make_two_stream(c3d_mini(), "conv5b", 4, 3, 6);
  const auto v = videos(1, 2);
  TwoStreamCache cache;
  const auto p = two_stream_fwd(m, slice_frames(v[0].frames, 0, 16), &cache);
  const auto g = two_stream_bwd(m, cache, 2, kGroupHead);
  const auto& db = g.head[m.head.config().index_of("fc_out")].bias;
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(db[k], p[k] - (k == 2 ? 1.0 : 0.0), 1e-15);
  EXPECT_NEAR(g.loss, -std::log(p[2]), 1e-12);
}

TEST(TwoStream, FrozenAttentionLeavesOtherGradientsUnchanged) {
  const TwoStreamModel m = make_two_stream(c3d_mini(), "conv5b", 4, 3, 6);
  const auto v = videos(1, 3);
  TwoStreamCache cache;
  two_stream_fwd(m, slice_frames(v[0].frames, 0, 16), &cache);
  const auto all = two_stream_bwd(m, cache, 1);
  const auto frozen = two_stream_bwd(m, cache, 1, kGroupFeature | kGroupBilinear | kGroupHead);
  EXPECT_TRUE(params_equal(all.feature, frozen.feature));
  EXPECT_TRUE(params_equal(all.head, frozen.head));
  EXPECT_EQ(all.w, frozen.w);
  EXPECT_TRUE(params_equal(frozen.attention, m.attention.network().zero_grads()));
  double mass = 0.0;
  for (const auto& st : all.attention) mass += l2_norm(st.weight.values());
  EXPECT_GT(mass, 0.0);
}

TEST(TwoStream, BackwardNeedsForwardCache) {
  const TwoStreamModel m = make_two_stream(gradcheck::tiny_two_stream_config(), "conv3a", 1, 2, 4);
  EXPECT_THROW(two_stream_bwd(m, TwoStreamCache{}, 0), Error);
}

TEST(TwoStream, ShapeMismatchThrows) {
  const TwoStreamModel m = make_two_stream(gradcheck::tiny_two_stream_config(), "conv3a", 1, 2, 4);
  EXPECT_THROW(two_stream_fwd(m, Tensor({1, 4, 8, 6})), ShapeError);
  const Matrix wrong(3, 8);
  EXPECT_THROW(two_stream_fwd(m, Tensor({1, 4, 8, 8}), nullptr, &wrong), ShapeError);
}

// --- schedules --------------------------------------------------------------------------

TEST(Schedule, JsonRoundTripAndStepDecay) {
  const auto s = schedule_from_json(nlohmann::json::parse(R"({
    "batch_size": 2, "momentum": 0.5, "seed": 3,
    "phases": [{"name": "head", "lr": 0.1, "steps": 4, "groups": ["head"]},
               {"name": "all", "lr": 1e-3, "steps": 6, "groups": ["all"], "decay_every": 2}]})"));
  EXPECT_EQ(s.total_steps(), 10u);
  EXPECT_EQ(s.phases[0].groups, static_cast<unsigned>(kGroupHead));
  EXPECT_DOUBLE_EQ(s.lr_at(3), 0.1);
  EXPECT_DOUBLE_EQ(s.lr_at(4), 1e-3);
  EXPECT_DOUBLE_EQ(s.lr_at(6), 1e-3 * 0.1);
  EXPECT_DOUBLE_EQ(s.lr_at(9), 1e-3 * 0.1 * 0.1);
  EXPECT_THROW(s.lr_at(10), ConfigError);
  const auto back = schedule_from_json(to_json(s));
  EXPECT_EQ(to_json(back), to_json(s));
}

TEST(Schedule, RejectsBadInput) {
  EXPECT_THROW(schedule_from_json(nlohmann::json::parse(R"({"phases": []})")), ConfigError);
  EXPECT_THROW(schedule_from_json(nlohmann::json::parse(
                   R"({"phases": [{"lr": 0.1, "steps": 1, "groups": ["trunk"]}]})")),
               ConfigError);
  EXPECT_THROW(schedule_from_json(nlohmann::json::parse(
                   R"({"momentum": 1.0, "phases": [{"lr": 0.1, "steps": 1}]})")),
               ConfigError);
  const auto path = fs::temp_directory_path() / "jpool_bad_schedule.json";
  {
    std::ofstream(path) << R"({"phases": [{"steps": 1}]})";
  }
  EXPECT_THROW(read_schedule(path), ParseError);
}

TEST(BatchSampler, EpochsArePermutations) {
  BatchSampler s(10, 5, 1);
  std::multiset<std::size_t> seen;
  for (std::size_t step = 0; step < 4; ++step)
    for (std::size_t i : s.indices(step)) seen.insert(i);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(seen.count(i), 2u);
}

TEST(BatchSampler, BatchDependsOnlyOnStep) {
  BatchSampler a(7, 3, 9), b(7, 3, 9);
  const auto late = a.indices(11);
  for (std::size_t step = 0; step < 11; ++step) b.indices(step);
  EXPECT_EQ(b.indices(11), late);
  BatchSampler full(7, 0, 9);
  EXPECT_EQ(full.indices(5), (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6}));
}

// --- training ---------------------------------------------------------------------------

TEST(TrainAttention, ZeroLearningRateKeepsParametersBitwise) {
  const auto cfg = c3d_mini();
  AttentionNet net(cfg, "conv5b", 4, 1);
  const auto before = net.network().params();
  const auto data = attention_examples(videos(2, 1), cfg, "conv5b", 1);
  const auto rep = train_attention(net, data, single_phase(0.0, 3, kGroupAll, 2));
  EXPECT_EQ(rep.losses.size(), 3u);
  EXPECT_TRUE(params_equal(net.network().params(), before));
}

TEST(TrainAttention, SingleExampleOverfits) {
  const auto cfg = c3d_mini();
  AttentionNet net(cfg, "conv5b", 4, mix_seed(7, 1));
  net.copy_trunk(net3d::Network(cfg, 7));
  const auto data = attention_examples(videos(1, 1), cfg, "conv5b", 1);
  std::size_t reached = 0;
  bool hit = false;
  TrainOptions opt;
  opt.on_step = [&](std::size_t step, double loss) {
    if (loss < 0.05) {
      reached = step;
      hit = true;
    }
    return !hit;
  };
  train_attention(net, data, single_phase(0.05, 500, kGroupAll, 1), opt);
  ASSERT_TRUE(hit);
  EXPECT_LT(reached, 500u);
}

TEST(TrainAttention, LastLayerFullBatchDescentIsMonotone) {
  const auto cfg = c3d_mini();
  AttentionNet net(cfg, "conv5b", 4, 3);
  const auto trunk_before = net.network().params();
  const auto data = attention_examples(videos(3, 2), cfg, "conv5b", 1);
  Schedule s = single_phase(0.02, 15, kGroupAttentionLast, 0);
  s.momentum = 0.0;
  const auto rep = train_attention(net, data, s);
  ASSERT_EQ(rep.losses.size(), 15u);
  for (std::size_t i = 1; i < rep.losses.size(); ++i) EXPECT_LT(rep.losses[i], rep.losses[i - 1]) << i;
  for (std::size_t i = 0; i < net.logits_index(); ++i)
    EXPECT_EQ(net.network().params()[i], trunk_before[i]);
}

TEST(TrainAttention, HeldOutLossDropsAndCheckpointPersists) {
  const auto cfg = c3d_mini();
  AttentionNet net(cfg, "conv5b", 4, mix_seed(7, 1));
  net.copy_trunk(net3d::Network(cfg, 7));
  const auto all = videos(16, 21);
  const auto train = attention_examples({all.begin(), all.begin() + 12}, cfg, "conv5b", 1);
  const auto held = attention_examples({all.begin() + 12, all.end()}, cfg, "conv5b", 1);
  const double before = attention_eval_loss(net, held);
  const auto dir = fresh_dir("jpool_att_ckpt");
  TrainOptions opt;
  opt.checkpoint_dir = dir;
  const auto rep = train_attention(net, train, single_phase(0.05, 15, kGroupAll, 4), opt);
  EXPECT_LT(attention_eval_loss(net, held), before);
  const auto manifest = read_json_file(dir / "checkpoint.json");
  EXPECT_EQ(manifest.at("kind"), "attention");
  EXPECT_EQ(manifest.at("step"), 15);
  EXPECT_EQ(manifest.at("loss_history").size(), 15u);
  EXPECT_EQ(manifest.at("config_hash"), rep.config_hash);
  EXPECT_TRUE(fs::exists(dir / "attention" / "conv5b.weight.jpt"));
}

TEST(TrainAttention, DivergenceAbortsWithDiagnostic) {
  const auto cfg = c3d_mini();
  AttentionNet net(cfg, "conv5b", 4, 3);
  const auto data = attention_examples(videos(2, 1), cfg, "conv5b", 1);
  try {
    train_attention(net, data, single_phase(1e300, 5, kGroupAll, 2));
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(TrainAttention, RejectsTargetsOfWrongSize) {
  const auto cfg = c3d_mini();
  AttentionNet net(cfg, "conv5b", 2, 3);
  const auto data = attention_examples(videos(1, 1), cfg, "conv5b", 1);
  EXPECT_THROW(train_attention(net, data, single_phase(0.1, 1, kGroupAll, 1)), ShapeError);
}

TEST(Finetune, PhaseOneFreezesStreams) {
  const auto cfg = c3d_mini();
  TwoStreamModel m = make_two_stream(cfg, "conv5b", 4, 3, 7);
  const auto att = m.attention.network().params();
  const auto feat = m.feature.params();
  const Matrix w = m.w;
  const auto head = m.head.params();
  const auto data = class_examples(videos(6, 3), 16, 1);
  TrainOptions opt;
  opt.stop_at = 40;
  finetune_two_stream(m, data, default_finetune_schedule(40, 2), opt);
  EXPECT_TRUE(params_equal(m.attention.network().params(), att));
  EXPECT_TRUE(params_equal(m.feature.params(), feat));
  EXPECT_EQ(m.w, w);
  EXPECT_FALSE(params_equal(m.head.params(), head));
}

TEST(Finetune, ReachesTrainingAccuracyOnSyntheticClasses) {
  const auto cfg = c3d_mini();
  TwoStreamModel m = make_two_stream(cfg, "conv5b", 4, 3, 7);
  const auto data = class_examples(videos(12, 3), 16, 1);
  const auto rep = finetune_two_stream(m, data, default_finetune_schedule(1500, 6));
  EXPECT_EQ(rep.losses.size(), 1506u);
  EXPECT_GE(two_stream_accuracy(m, data), 0.95);
}

TEST(Finetune, ResumeReproducesLossesExactly) {
  const auto cfg = c3d_mini();
  const auto data = class_examples(videos(6, 5), 16, 1);
  Schedule s = default_finetune_schedule(30, 4);
  s.checkpoint_every = 32;

  TwoStreamModel straight = make_two_stream(cfg, "conv5b", 4, 3, 7);
  TrainOptions a;
  a.checkpoint_dir = fresh_dir("jpool_ft_straight");
  const auto full = finetune_two_stream(straight, data, s, a);
  ASSERT_EQ(full.losses.size(), 34u);

  TwoStreamModel first = make_two_stream(cfg, "conv5b", 4, 3, 7);
  TrainOptions b;
  b.checkpoint_dir = fresh_dir("jpool_ft_resume");
  b.stop_at = 32;
  const auto part = finetune_two_stream(first, data, s, b);
  EXPECT_EQ(part.losses.size(), 32u);

  TwoStreamModel second = make_two_stream(cfg, "conv5b", 4, 3, 99);  // overwritten on resume
  b.stop_at = 0;
  b.resume = true;
  const auto resumed = finetune_two_stream(second, data, s, b);
  EXPECT_TRUE(resumed.resumed);
  EXPECT_EQ(resumed.losses, full.losses);
  EXPECT_EQ(second.w, straight.w);
  EXPECT_TRUE(params_equal(second.head.params(), straight.head.params()));

  Schedule other = s;
  other.seed = 2;
  EXPECT_THROW(finetune_two_stream(second, data, other, b), ConfigError);
}

TEST(Finetune, CheckpointRoundTrip) {
  const auto cfg = c3d_mini();
  TwoStreamModel m = make_two_stream(cfg, "conv5b", 4, 3, 7);
  const auto dir = fresh_dir("jpool_ts_weights");
  save_two_stream(m, dir);
  TwoStreamModel n = make_two_stream(cfg, "conv5b", 4, 3, 8);
  load_two_stream(n, dir);
  const auto v = videos(1, 1);
  const Tensor clip = slice_frames(v[0].frames, 0, 16);
  const auto pm = two_stream_fwd(m, clip), pn = two_stream_fwd(n, clip);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(pm[k], pn[k], 1e-5);
}

TEST(HeatmapHits, PerfectPredictorHitsExactly) {
  const auto cfg = c3d_mini();
  AttentionNet net(cfg, "conv5b", 4, 3);
  const auto data = attention_examples(videos(2, 1), cfg, "conv5b", 1);
  const auto r = heatmap_hits(net, data);
  EXPECT_EQ(r.count, 2u * 64u);
  EXPECT_DOUBLE_EQ(r.within_rate(), 1.0);  // a 2x2x2 grid is within one cell everywhere
  EXPECT_LE(r.exact, r.within_one);
}

}  // namespace
}  // namespace jpool
