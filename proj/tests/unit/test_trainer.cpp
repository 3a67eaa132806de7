// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "test_support.hpp"
#include "wsms/errors.hpp"
#include "wsms/trainer.hpp"

namespace wsms {
namespace {

namespace fs = std::filesystem;

WsmsSpec tiny_model(int stages = 2, int classes = 5) {
  return WsmsSpec{build_resnet(1, classes, 4), stages, Integration::None, 8, Sharing::Shared};
}

SynthSplits tiny_synth(int per_class = 16, int test_per_class = 8, std::uint64_t seed = 1) {
  SynthScaleConfig c;
  c.image_size = 16;
  c.samples_per_class = per_class;
  c.test_samples_per_class = test_per_class;
  c.seed = seed;
  return synth_scale_dataset(c);
}

TrainConfig quick_config(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.lr_schedule = {{1, 0.05}};
  c.weight_decay = 5e-4;
  c.record_wallclock = false;
  return c;
}

std::vector<std::string> json_lines(const TrainResult& r) {
  std::vector<std::string> out;
  for (const auto& rec : r.records) out.push_back(to_json_line(rec));
  return out;
}

TEST(Sgd, PlainStepAndZeroGradient) {
  ParamStore<double> store;
  const auto id = store.add("w", ParamRole::ConvWeight, Tensor<double>(Shape{2}, std::vector<double>{1.0, -2.0}));
  Velocity<double> v;
  GradMap<double> g{{id, Tensor<double>(Shape{2}, std::vector<double>{0.5, 0.25})}};
  sgd_momentum_step(store, g, v, 0.1, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(store.value(id)[0], 1.0 - 0.1 * 0.5);
  EXPECT_DOUBLE_EQ(store.value(id)[1], -2.0 - 0.1 * 0.25);

  ParamStore<double> still;
  const auto s = still.add("w", ParamRole::ConvWeight, Tensor<double>(Shape{3}, 0.7));
  Velocity<double> v0;
  sgd_momentum_step(still, {{s, Tensor<double>(Shape{3})}}, v0, 0.1, 0.9, 0.0);
  for (double x : still.value(s).data()) EXPECT_EQ(x, 0.7);
}

TEST(Sgd, TwoMomentumStepsOnConstantGradient) {
  ParamStore<double> store;
  const auto id = store.add("w", ParamRole::FullyConnected, Tensor<double>(Shape{1}, 3.0));
  Velocity<double> v;
  const GradMap<double> g{{id, Tensor<double>(Shape{1}, 0.4)}};
  sgd_momentum_step(store, g, v, 0.1, 0.9, 0.0);
  sgd_momentum_step(store, g, v, 0.1, 0.9, 0.0);
  EXPECT_NEAR(3.0 - store.value(id)[0], 0.1 * 0.4 * (1.0 + 1.9), 1e-15);
}

TEST(Sgd, MissingGradientNamesParameter) {
  ParamStore<float> store;
  store.add("a", ParamRole::ConvWeight, Tensor<float>(Shape{1}));
  const auto b = store.add("b.gamma", ParamRole::BatchNorm, Tensor<float>(Shape{1}));
  Velocity<float> v;
  try {
    sgd_momentum_step(store, {{ParamId{0}, Tensor<float>(Shape{1})}}, v, 0.1, 0.9, 0.0);
    FAIL() << "expected InvalidState";
  } catch (const InvalidState& e) {
    EXPECT_NE(std::string(e.what()).find(to_string(b)), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("b.gamma"), std::string::npos) << e.what();
  }
}

TEST(Sgd, WeightDecayRulesAndRunningStatsUntouched) {
  ParamStore<double> store;
  const auto w = store.add("w", ParamRole::ConvWeight, Tensor<double>(Shape{1}, 2.0));
  const auto bn = make_batch_norm(store, "bn", 1);
  store.running_stats(bn.stats).mean[0] = 0.3;
  const GradMap<double> zero{{w, Tensor<double>(Shape{1})}, {bn.gamma, Tensor<double>(Shape{1})},
                             {bn.beta, Tensor<double>(Shape{1})}};
  Velocity<double> v;
  sgd_momentum_step(store, zero, v, 0.5, 0.0, 0.1, false);
  EXPECT_DOUBLE_EQ(store.value(w)[0], 2.0 - 0.5 * 0.1 * 2.0);
  EXPECT_EQ(store.value(bn.gamma)[0], 1.0);
  Velocity<double> v2;
  sgd_momentum_step(store, zero, v2, 0.5, 0.0, 0.1, true);
  EXPECT_DOUBLE_EQ(store.value(bn.gamma)[0], 1.0 - 0.5 * 0.1);
  EXPECT_EQ(store.running_stats(bn.stats).mean[0], 0.3);
}

TEST(Sgd, ZeroDecayMatchesPlainMomentumExactly) {
  std::mt19937_64 rng(3);
  ParamStore<double> store;
  const auto id = store.add("w", ParamRole::ConvWeight, testing::random_tensor(Shape{20}, rng));
  Tensor<double> p = store.value(id), vel(Shape{20});
  Velocity<double> v;
  for (int step = 0; step < 5; ++step) {
    const auto g = testing::random_tensor(Shape{20}, rng);
    sgd_momentum_step(store, {{id, g}}, v, 0.05, 0.9, 0.0);
    for (std::size_t i = 0; i < 20; ++i) {
      vel[i] = 0.9 * vel[i] + g[i];
      p[i] -= 0.05 * vel[i];
    }
  }
  EXPECT_EQ(std::memcmp(p.ptr(), store.value(id).ptr(), 20 * sizeof(double)), 0);
}

TEST(Sgd, SharedParameterStepEqualsStepOnSummedStageGradients) {
  std::mt19937_64 rng(4);
  auto model = build_wsms<double>(WsmsSpec{build_resnet(1, 3, 2), 3, Integration::None}, 2);
  const auto x = testing::random_tensor(Shape{2, 3, 8, 8}, rng);
  const std::vector<int> labels{1, 2};
  auto grads = [&](std::vector<StageRoute> routes) {
    Tape<double> t;
    auto f = forward_wsms(t, model, t.constant(x), ForwardOptions{Mode::Train, std::move(routes)});
    return t.backward(softmax_cross_entropy(t, f.logits, labels));
  };
  using R = StageRoute;
  const auto joint = grads({R::Active, R::Active, R::Active});
  GradMap<double> summed;
  for (auto routes : {std::vector<R>{R::Active, R::Detached, R::Detached}, {R::Detached, R::Active, R::Detached},
                      {R::Detached, R::Detached, R::Active}}) {
    for (auto& [id, g] : grads(routes)) {
      auto [it, fresh] = summed.try_emplace(id, Tensor<double>(g.shape()));
      for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
    }
  }
  auto a = model.params, b = model.params;
  Velocity<double> va, vb;
  sgd_momentum_step(a, joint, va, 0.1, 0.9, 1e-4);
  sgd_momentum_step(b, summed, vb, 0.1, 0.9, 1e-4);
  for (ParamId id : a.ids()) {
    if (a.role(id) == ParamRole::ConvWeight) EXPECT_LE(testing::max_abs_diff(a.value(id), b.value(id)), 1e-12);
  }
}

TEST(LrSchedule, Presets) {
  const auto r = resnet_schedule();
  EXPECT_EQ(lr_at(r, 1), 0.01);
  EXPECT_EQ(lr_at(r, 2), 0.1);
  EXPECT_EQ(lr_at(r, 81), 0.1);
  EXPECT_EQ(lr_at(r, 82), 0.01);
  EXPECT_EQ(lr_at(r, 123), 0.001);
  EXPECT_EQ(lr_at(r, kResnetEpochs), 0.001);
  EXPECT_EQ(kResnetEpochs, 164);
  const auto d = densenet_schedule();
  EXPECT_EQ(lr_at(d, 1), 0.1);
  EXPECT_EQ(lr_at(d, 149), 0.1);
  EXPECT_EQ(lr_at(d, 150), 0.01);
  EXPECT_EQ(lr_at(d, 225), 0.001);
  EXPECT_EQ(kDensenetEpochs, 300);
  EXPECT_EQ(lr_at(LrSchedule{{1, 0.3}}, 999), 0.3);
  EXPECT_THROW(lr_at(r, 0), InvalidArgument);
}

TEST(LrSchedule, NonIncreasingAfterPeak) {
  for (const auto& [s, epochs] : {std::pair{resnet_schedule(), kResnetEpochs}, {densenet_schedule(), kDensenetEpochs}}) {
    int peak = 1;
    for (int e = 1; e <= epochs; ++e)
      if (lr_at(s, e) > lr_at(s, peak)) peak = e;
    for (int e = peak + 1; e <= epochs; ++e) EXPECT_LE(lr_at(s, e), lr_at(s, e - 1));
  }
}

TEST(LrSchedule, ParseFormatAndValidate) {
  EXPECT_EQ(parse_schedule(format_schedule(resnet_schedule())), resnet_schedule());
  EXPECT_EQ(parse_schedule("1:0.05, 11:0.01"), (LrSchedule{{1, 0.05}, {11, 0.01}}));
  EXPECT_THROW(parse_schedule("1:0.1, 1:0.01"), InvalidArgument);
  EXPECT_THROW(parse_schedule("2:0.1"), InvalidArgument);
  EXPECT_THROW(parse_schedule("1:-0.1"), InvalidArgument);
  EXPECT_THROW(parse_schedule("1=0.1"), InvalidArgument);
  TrainConfig c;
  c.momentum = 1.0;
  EXPECT_THROW(validate(c), InvalidArgument);
}

TEST(Evaluate, ArgmaxTiesGoToLowestIndex) {
  const std::vector<float> v{0.5f, 2.0f, 2.0f, -1.0f};
  EXPECT_EQ(argmax<float>(v), 1);
  const std::vector<double> flat(5, 0.0);
  EXPECT_EQ(argmax<double>(flat), 0);
}

TEST(Evaluate, PerfectLogitsGiveZeroError) {
  auto splits = tiny_synth(4, 4);
  for (auto& img : splits.test_seen.images) img.label = 2;
  auto model = build_wsms<float>(tiny_model(), 1);
  model.params.value(model.fc_weight).fill(0.0f);
  model.params.value(model.fc_bias)[2] = 10.0f;
  const auto r = evaluate(model, splits.test_seen);
  EXPECT_EQ(r.error_percent, 0.0);
  ASSERT_EQ(r.rows.size(), splits.test_seen.size());
  for (std::size_t i = 1; i < r.rows.size(); ++i) EXPECT_LT(r.rows[i - 1].id, r.rows[i].id);
}

TEST(Evaluate, RandomInitIsNearChance) {
  // 500 balanced examples over 5 classes.
  const auto splits = tiny_synth(4, 100);
  double total = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto model = build_wsms<float>(tiny_model(), seed);
    const double err = evaluate(model, splits.test_held_out).error_percent;
    EXPECT_GE(err, 0.0);
    EXPECT_LE(err, 100.0);
    total += err;
  }
  EXPECT_NEAR(total / 3.0, 80.0, 5.0);
}

TEST(Evaluate, ClassOrChannelMismatch) {
  const auto splits = tiny_synth(4, 4);
  auto model = build_wsms<float>(tiny_model(2, 10), 1);
  EXPECT_THROW(evaluate(model, splits.test_seen), InvalidArgument);
}

TEST(Predictions, CsvRoundTripAndValidation) {
  const std::vector<Prediction> rows{{3, 1, 1}, {9, 0, 4}};
  std::stringstream ss;
  write_predictions_csv(ss, rows);
  EXPECT_EQ(ss.str(), "id,true,pred,correct\n3,1,1,1\n9,0,4,0\n");
  EXPECT_EQ(read_predictions_csv(ss), rows);
  std::stringstream no_header("3,1,1,1\n");
  EXPECT_THROW(read_predictions_csv(no_header), FormatError);
  std::stringstream bad_flag("id,true,pred,correct\n3,1,1,0\n");
  EXPECT_THROW(read_predictions_csv(bad_flag), FormatError);
  EXPECT_THROW(load_predictions_csv("/nonexistent/preds.csv"), FormatError);
}

TEST(Predictions, ComparePredsSetAlgebra) {
  auto dump = [](std::initializer_list<int> wrong) {
    std::vector<Prediction> rows;
    for (int id = 0; id < 10; ++id) {
      const bool miss = std::find(wrong.begin(), wrong.end(), id) != wrong.end();
      rows.push_back({id, id % 3, miss ? (id % 3 + 1) % 3 : id % 3});
    }
    return rows;
  };
  const auto a = dump({1, 4, 7, 8});
  const auto b = dump({2, 4, 7, 8});
  const auto c = dump({8, 9});
  EXPECT_EQ(compare_preds({a, b}, c), (std::vector<std::int64_t>{4, 7}));
  EXPECT_EQ(compare_preds({a}, c), (std::vector<std::int64_t>{1, 4, 7}));
  EXPECT_THROW(compare_preds({}, c), InvalidArgument);
}

TEST(Train, ZeroEpochsEvaluatesOnlyAndKeepsParams) {
  const auto splits = tiny_synth();
  auto model = build_wsms<float>(tiny_model(), 3);
  const auto before = model.params;
  const auto r = train(model, TrainData{&splits.train, {{"test", &splits.test_seen}}}, quick_config(0));
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_EQ(r.records[0].epoch, 0);
  EXPECT_FALSE(r.records[0].train_loss.has_value());
  EXPECT_TRUE(r.records[0].test_error.has_value());
  for (ParamId id : before.ids()) {
    EXPECT_EQ(std::memcmp(before.value(id).ptr(), model.params.value(id).ptr(), before.value(id).size() * sizeof(float)),
              0);
  }
}

TEST(Train, SameSeedGivesIdenticalRecords) {
  const auto splits = tiny_synth();
  const TrainData data{&splits.train, {{"test", &splits.test_seen}, {"held_out", &splits.test_held_out}}};
  auto run = [&](std::uint64_t seed) {
    auto model = build_wsms<float>(tiny_model(), 5);
    auto cfg = quick_config(2);
    cfg.seed = seed;
    return json_lines(train(model, data, cfg));
  };
  const auto a = run(1);
  EXPECT_EQ(a, run(1));
  EXPECT_NE(a, run(2));
  EXPECT_EQ(a.size(), 3u);
  EXPECT_NE(a[1].find("\"held_out\""), std::string::npos);
}

TEST(Train, NonFiniteLossReportsEpochAndBatch) {
  auto splits = tiny_synth(4, 2);
  for (auto& img : splits.train.images) img.pixels[0] = std::numeric_limits<float>::quiet_NaN();
  auto model = build_wsms<float>(tiny_model(), 1);
  auto cfg = quick_config(1);
  cfg.batch_size = 64;
  try {
    train(model, TrainData{&splits.train, {}}, cfg);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.epoch(), 1);
    EXPECT_EQ(e.batch(), 0);
    EXPECT_NE(std::string(e.what()).find("batch 0"), std::string::npos);
  }

  auto one_bad = tiny_synth(4, 2);
  one_bad.train.images[13].pixels[5] = std::numeric_limits<float>::infinity();
  auto model2 = build_wsms<float>(tiny_model(), 1);
  cfg.batch_size = 4;
  cfg.augment = false;
  try {
    train(model2, TrainData{&one_bad.train, {}}, cfg);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_GE(e.batch(), 0);
    EXPECT_LT(e.batch(), 5);
  }
}

TEST(Train, CheckpointReloadReproducesEvaluation) {
  const auto splits = tiny_synth();
  const fs::path dir = fs::temp_directory_path() / "wsms_test_trainer_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto model = build_wsms<float>(tiny_model(), 7);
  TrainOutputs out;
  out.final_checkpoint = dir / "final.bin";
  out.best_checkpoint = dir / "best.bin";
  out.metadata["note"] = "unit";
  const auto r = train(model, TrainData{&splits.train, {{"test", &splits.test_seen}}}, quick_config(2), out);
  const auto direct = evaluate(model, splits.test_seen);
  EXPECT_EQ(direct.error_percent, r.final_test_error);

  auto ckpt = load_checkpoint<float>(*out.final_checkpoint);
  EXPECT_EQ(ckpt.metadata.at("epoch"), "2");
  EXPECT_EQ(ckpt.metadata.at("note"), "unit");
  auto fresh = build_wsms<float>(tiny_model(), 99);
  assign_params(fresh.params, ckpt.params);
  const auto reloaded = evaluate(fresh, splits.test_seen);
  EXPECT_EQ(reloaded.error_percent, direct.error_percent);
  EXPECT_EQ(std::memcmp(&reloaded.mean_loss, &direct.mean_loss, sizeof(double)), 0);
  EXPECT_EQ(reloaded.rows, direct.rows);

  const auto best = load_checkpoint<float>(*out.best_checkpoint);
  EXPECT_EQ(std::stoi(best.metadata.at("epoch")), r.best_epoch);
  for (const auto& rec : r.records) EXPECT_GE(*rec.test_error, r.best_test_error);
  fs::remove_all(dir);
}

TEST(Train, TrainingErrorFallsWellBelowChance) {
  const auto splits = tiny_synth(24, 4);
  auto model = build_wsms<float>(tiny_model(), 1);
  auto cfg = quick_config(10);
  cfg.lr_schedule = {{1, 0.05}, {8, 0.01}};
  const auto r = train(model, TrainData{&splits.train, {{"test", &splits.test_seen}}}, cfg);
  EXPECT_NEAR(*r.records.front().test_error, 80.0, 20.0);
  EXPECT_LT(*r.records.back().train_error, 40.0);
  EXPECT_LT(*r.records.back().train_loss, *r.records[1].train_loss);
}

TEST(Metrics, JsonLineShape) {
  MetricsRecord rec;
  rec.epoch = 3;
  rec.lr = 0.1;
  rec.train_loss = 0.5;
  rec.test_error = 12.5;
  rec.evals["test"] = 12.5;
  EXPECT_EQ(to_json_line(rec), R"({"epoch":3,"lr":0.1,"train_loss":0.5,"train_error":null,"test_error":12.5,"eval":{"test":12.5}})");
}

}  // namespace
}  // namespace wsms
