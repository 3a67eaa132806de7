// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wsms/checkpoint.hpp"
#include "wsms/data.hpp"
#include "wsms/wsms.hpp"

namespace wsms {

// Piecewise-constant learning rate: each change point sets the rate from its
// epoch (inclusive) until the next one.
struct LrChange {
  int epoch = 1;
  double lr = 0.1;
  bool operator==(const LrChange&) const = default;
};
using LrSchedule = std::vector<LrChange>;

void validate(const LrSchedule& schedule);
double lr_at(const LrSchedule& schedule, int epoch);

// ResNet recipe: short 0.01 warm-up epoch, then 0.1 / 0.01 / 0.001.
LrSchedule resnet_schedule();
inline constexpr int kResnetEpochs = 164;
LrSchedule densenet_schedule();
inline constexpr int kDensenetEpochs = 300;

// "1:0.01, 2:0.1, 82:0.01"
std::string format_schedule(const LrSchedule& schedule);
LrSchedule parse_schedule(const std::string& text);

struct TrainConfig {
  int epochs = kResnetEpochs;
  int batch_size = 128;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  LrSchedule lr_schedule = resnet_schedule();
  std::uint64_t seed = 1;
  int eval_every = 1;
  bool bn_decay = true;  // weight decay also on BN gamma/beta
  bool augment = true;
  bool record_wallclock = true;
};

void validate(const TrainConfig& config);

template <typename T>
using Velocity = GradMap<T>;

// v <- momentum * v + g + wd * p;  p <- p - lr * v, for every parameter in the
// store. Running statistics are not parameters and are never touched.
template <typename T>
void sgd_momentum_step(ParamStore<T>& params, const GradMap<T>& grads, Velocity<T>& velocity, double lr,
                       double momentum, double weight_decay, bool bn_decay = true);

// Fixed evaluation batch so results never depend on who calls evaluate.
inline constexpr int kEvalBatch = 100;

struct Prediction {
  std::int64_t id = 0;
  int truth = 0;
  int predicted = 0;
  bool correct() const { return truth == predicted; }
  bool operator==(const Prediction&) const = default;
};

struct EvalResult {
  double error_percent = 0;
  double mean_loss = 0;
  std::vector<Prediction> rows;  // ordered by id
};

// Index of the largest value; ties go to the lowest index.
template <typename T>
int argmax(std::span<const T> values);

template <typename T>
EvalResult evaluate(WsmsModel<T>& model, const Dataset& data);

void write_predictions_csv(std::ostream& os, const std::vector<Prediction>& rows);
std::vector<Prediction> read_predictions_csv(std::istream& is);
std::vector<Prediction> load_predictions_csv(const std::filesystem::path& path);

// Ids misclassified by every baseline and classified correctly by the target,
// ascending. Only ids present in all dumps are considered.
std::vector<std::int64_t> compare_preds(const std::vector<std::vector<Prediction>>& baselines,
                                        const std::vector<Prediction>& target);

struct MetricsRecord {
  int epoch = 0;
  double lr = 0;
  std::optional<double> train_loss;     // absent for the initial evaluation
  std::optional<double> train_error;    // percent
  std::optional<double> test_error;     // percent on the primary evaluation split
  std::map<std::string, double> evals;  // percent error of each named evaluation split
  std::optional<double> wallclock;      // seconds since training started
};

std::string to_json_line(const MetricsRecord& record);

struct NamedSplit {
  std::string name;
  const Dataset* data = nullptr;
};

// The first evaluation split is the "test" split used for best-checkpoint
// selection.
struct TrainData {
  const Dataset* train = nullptr;
  std::vector<NamedSplit> evals;
};

struct TrainOutputs {
  std::optional<std::filesystem::path> final_checkpoint;
  std::optional<std::filesystem::path> best_checkpoint;
  CheckpointMetadata metadata;  // copied into both checkpoints
  std::function<void(const MetricsRecord&)> on_record;
};

struct TrainResult {
  std::vector<MetricsRecord> records;
  int best_epoch = 0;
  double best_test_error = 100.0;
  double final_test_error = 100.0;
};

// Throws NumericalError on a non-finite loss or gradient.
template <typename T>
TrainResult train(WsmsModel<T>& model, const TrainData& data, const TrainConfig& config,
                  const TrainOutputs& outputs = {});

template <typename T>
Tensor<T> make_batch(const Dataset& data, std::span<const std::size_t> indices);

}  // namespace wsms
