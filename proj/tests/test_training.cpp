#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "femae/training.hpp"
#include "net_fixtures.hpp"

namespace femae {
namespace {

std::vector<Tensor<float>> tiny_clouds(std::size_t n, std::size_t points = 40) {
  std::vector<Tensor<float>> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen_synthetic<float>({kFamilies[i % 3], points, 0.0, i}).points);
  return out;
}

std::vector<Sample<float>> tiny_samples(std::size_t n) {
  std::vector<Sample<float>> out;
  auto clouds = tiny_clouds(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back({"s" + std::to_string(i), static_cast<int>(i % 3), clouds[i]});
  return out;
}

TrainConfig short_run(std::size_t steps = 6, std::uint64_t seed = 3) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 2;
  t.warmup_steps = 1;
  t.base_lr = 1e-2;
  t.seed = seed;
  return t;
}

std::map<std::string, Tensor<float>> snapshot(const PointFemae<float>& m) {
  std::map<std::string, Tensor<float>> out;
  for (const auto& e : m.params().entries()) out[e.param->name] = e.param->value;
  return out;
}

TEST(Pretrainer, DeterministicPerSeed) {
  PointFemae<float> a(testing::tiny_config()), b(testing::tiny_config());
  auto ra = run_pretrain(a, tiny_clouds(5), short_run());
  auto rb = run_pretrain(b, tiny_clouds(5), short_run());
  ASSERT_EQ(ra.size(), 6u);
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(ra[i].loss_global, rb[i].loss_global);
    EXPECT_EQ(ra[i].loss_local, rb[i].loss_local);
  }
  EXPECT_EQ(snapshot(a), snapshot(b));
  PointFemae<float> c(testing::tiny_config());
  auto rc = run_pretrain(c, tiny_clouds(5), short_run(6, 4));
  EXPECT_NE(rc[0].loss(), ra[0].loss());
}

TEST(Pretrainer, GlobalOnlyVariantLogsOneTerm) {
  PointFemae<float> m(testing::tiny_config(Variant::A));
  auto rows = run_pretrain(m, tiny_clouds(4), short_run(3));
  for (const auto& r : rows) {
    EXPECT_TRUE(r.loss_global.has_value());
    EXPECT_FALSE(r.loss_local.has_value());
    EXPECT_EQ(r.loss(), *r.loss_global);
  }
  std::ostringstream csv;
  write_pretrain_header(csv);
  write_pretrain_row(csv, {4, 0.5, std::nullopt, 0.001});
  EXPECT_EQ(csv.str(), "step,loss_g,loss_l,lr\n4,0.5,,0.001\n");
}

TEST(Pretrainer, DualBranchLogsBothTerms) {
  PointFemae<float> m(testing::tiny_config());
  auto rows = run_pretrain(m, tiny_clouds(4), short_run(2));
  EXPECT_TRUE(rows[0].loss_global && rows[0].loss_local);
  EXPECT_DOUBLE_EQ(rows[0].lr, 0.0);
}

TEST(Pretrainer, ClassifierUntouched) {
  PointFemae<float> m(testing::tiny_config());
  const auto before = snapshot(m);
  run_pretrain(m, tiny_clouds(4), short_run(3));
  for (const auto& e : m.params().entries()) {
    if (e.group == ParamGroup::Classifier) {
      EXPECT_EQ(e.param->value, before.at(e.param->name)) << e.param->name;
    } else if (e.group == ParamGroup::Transformer) {
      EXPECT_NE(e.param->value, before.at(e.param->name)) << e.param->name;
    }
  }
}

TEST(Pretrainer, ResumeMatchesUninterruptedRun) {
  const auto clouds = tiny_clouds(5);
  PointFemae<float> full(testing::tiny_config());
  auto ref = run_pretrain(full, clouds, short_run(8));

  PointFemae<float> first(testing::tiny_config());
  Pretrainer<float> t1(first, clouds, short_run(8));
  for (int i = 0; i < 4; ++i) t1.step();
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(t1.checkpoint()));

  ModelConfig other = testing::tiny_config();
  other.init_seed = 1234;
  PointFemae<float> second(other);
  Pretrainer<float> t2(second, clouds, short_run(8));
  t2.resume(ck);
  EXPECT_EQ(t2.next_step(), 4u);
  auto rest = t2.run();
  ASSERT_EQ(rest.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(rest[i].step, ref[4 + i].step);
    EXPECT_NEAR(rest[i].loss(), ref[4 + i].loss(), 1e-6);
  }
}

TEST(Pretrainer, NonFiniteLossAborts) {
  PointFemae<float> m(testing::tiny_config());
  for (const auto& e : m.params().entries()) {
    if (e.group == ParamGroup::Embedder) e.param->value.fill(std::numeric_limits<float>::quiet_NaN());
  }
  Pretrainer<float> t(m, tiny_clouds(3), short_run());
  try {
    t.step();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(Pretrainer, EmptyDataIsUsageError) {
  PointFemae<float> m(testing::tiny_config());
  EXPECT_THROW(Pretrainer<float>(m, {}, short_run()), UsageError);
  TrainConfig bad = short_run();
  bad.warmup_steps = 6;
  EXPECT_THROW(Pretrainer<float>(m, tiny_clouds(2), bad), ConfigError);
}

TEST(Finetuner, LemAndHeadKeepsFrozenTensorsBitwise) {
  PointFemae<float> m(testing::tiny_config());
  const auto before = snapshot(m);
  TrainConfig t = short_run(5);
  t.finetune_mode = FinetuneMode::LemAndHead;
  run_finetune(m, tiny_samples(6), t);
  for (const auto& e : m.params().entries()) {
    const bool trainable = e.group == ParamGroup::Lem || e.group == ParamGroup::Classifier;
    EXPECT_EQ(e.param->trainable, trainable) << e.param->name;
    if (!trainable) EXPECT_EQ(e.param->value, before.at(e.param->name)) << e.param->name;
  }
  std::size_t moved = 0;
  for (const auto& e : m.params().entries())
    if (e.group == ParamGroup::Lem && e.param->value != before.at(e.param->name)) ++moved;
  EXPECT_GT(moved, 0u);
}

TEST(Finetuner, FullModeFreezesOnlyDecoders) {
  PointFemae<float> m(testing::tiny_config());
  const auto before = snapshot(m);
  run_finetune(m, tiny_samples(6), short_run(3));
  for (const auto& e : m.params().entries()) {
    const bool decoder = e.group == ParamGroup::DecoderGlobal || e.group == ParamGroup::DecoderLocal;
    EXPECT_EQ(e.param->trainable, !decoder) << e.param->name;
    if (decoder) EXPECT_EQ(e.param->value, before.at(e.param->name)) << e.param->name;
  }
}

TEST(Finetuner, RejectsLemModeWithoutLem) {
  PointFemae<float> m(testing::tiny_config(Variant::A));
  TrainConfig t = short_run();
  t.finetune_mode = FinetuneMode::LemAndHead;
  EXPECT_THROW(Finetuner<float>(m, tiny_samples(3), t), ConfigError);
}

TEST(Finetuner, LabelOutsideClassesIsUsageError) {
  PointFemae<float> m(testing::tiny_config());
  auto items = tiny_samples(3);
  items[1].label = 3;
  EXPECT_THROW(Finetuner<float>(m, items, short_run()), UsageError);
}

TEST(Finetuner, LogsLossAndBatchAccuracy) {
  PointFemae<float> m(testing::tiny_config());
  auto rows = run_finetune(m, tiny_samples(6), short_run(4));
  for (const auto& r : rows) {
    EXPECT_GT(r.loss, 0.0);
    EXPECT_TRUE(r.acc == 0.0 || r.acc == 0.5 || r.acc == 1.0);
  }
  std::ostringstream csv;
  write_finetune_header(csv);
  write_finetune_row(csv, {2, 1.25, 0.5, 0.1});
  EXPECT_EQ(csv.str(), "step,loss,acc\n2,1.25,0.5\n");
}

TEST(Finetuner, ResumeMatchesUninterruptedRun) {
  const auto items = tiny_samples(6);
  PointFemae<float> full(testing::tiny_config());
  auto ref = run_finetune(full, items, short_run(6));
  PointFemae<float> a(testing::tiny_config());
  Finetuner<float> t1(a, items, short_run(6));
  for (int i = 0; i < 3; ++i) t1.step();
  PointFemae<float> b(testing::tiny_config());
  Finetuner<float> t2(b, items, short_run(6));
  t2.resume(t1.checkpoint());
  auto rest = t2.run();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(rest[i].loss, ref[3 + i].loss, 1e-6);
}

TEST(Prepare, ResamplesOnlyWhenCountsDiffer) {
  const ModelConfig c = testing::tiny_config();
  auto cloud = gen_synthetic<float>({ShapeFamily::Box, 40, 0.0, 1}).points;
  Rng r1(0), r2(0);
  auto a = prepare(cloud, c, Augmentation::None, r1);
  EXPECT_EQ(a.centers, patchify(cloud, c.patches, c.group_size).centers);
  auto big = gen_synthetic<float>({ShapeFamily::Box, 100, 0.0, 1}).points;
  auto b = prepare(big, c, Augmentation::None, r2);
  EXPECT_EQ(b.groups.shape(), (Shape{c.patches, c.group_size, 3}));
}

TEST(StepRng, StreamsAreIndependentAndStable) {
  EXPECT_EQ(step_rng(1, 2)(), step_rng(1, 2)());
  EXPECT_NE(step_rng(1, 2)(), step_rng(1, 3)());
  EXPECT_NE(step_rng(1, 2, 0)(), step_rng(1, 2, 1)());
  EXPECT_NE(step_rng(1, 2)(), step_rng(2, 2)());
}

}  // namespace
}  // namespace femae
