// SPDX-License-Identifier: Apache-2.0
#include "wsms/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "wsms/errors.hpp"
#include "wsms/layers.hpp"
#include "wsms/rng.hpp"

namespace wsms {

void validate(const LrSchedule& schedule) {
  if (schedule.empty()) throw InvalidArgument("learning-rate schedule is empty");
  if (schedule.front().epoch != 1) {
    throw InvalidArgument("learning-rate schedule must start at epoch 1, starts at " +
                          std::to_string(schedule.front().epoch));
  }
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    if (!(schedule[i].lr > 0) || !std::isfinite(schedule[i].lr)) {
      throw InvalidArgument("learning rate at epoch " + std::to_string(schedule[i].epoch) + " must be positive");
    }
    if (i > 0 && schedule[i].epoch <= schedule[i - 1].epoch) {
      throw InvalidArgument("learning-rate change points must be strictly increasing (epoch " +
                            std::to_string(schedule[i].epoch) + " after " + std::to_string(schedule[i - 1].epoch) +
                            ")");
    }
  }
}

double lr_at(const LrSchedule& schedule, int epoch) {
  if (epoch < 1) throw InvalidArgument("epoch must be >= 1, got " + std::to_string(epoch));
  validate(schedule);
  double lr = schedule.front().lr;
  for (const auto& c : schedule) {
    if (c.epoch > epoch) break;
    lr = c.lr;
  }
  return lr;
}

LrSchedule resnet_schedule() { return {{1, 0.01}, {2, 0.1}, {82, 0.01}, {123, 0.001}}; }
LrSchedule densenet_schedule() { return {{1, 0.1}, {150, 0.01}, {225, 0.001}}; }

std::string format_schedule(const LrSchedule& schedule) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < schedule.size(); ++i) os << (i ? ", " : "") << schedule[i].epoch << ':' << schedule[i].lr;
  return os.str();
}

LrSchedule parse_schedule(const std::string& text) {
  LrSchedule out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw InvalidArgument("schedule entry '" + item + "' is not epoch:lr");
    try {
      std::size_t used = 0;
      const std::string e = item.substr(0, colon), l = item.substr(colon + 1);
      LrChange c;
      c.epoch = std::stoi(e, &used);
      if (e.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(e);
      c.lr = std::stod(l, &used);
      if (l.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(l);
      out.push_back(c);
    } catch (const std::logic_error&) {
      throw InvalidArgument("schedule entry '" + item + "' is not epoch:lr");
    }
  }
  validate(out);
  return out;
}

void validate(const TrainConfig& c) {
  if (c.epochs < 0) throw InvalidArgument("epochs must be >= 0");
  if (c.batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (!(c.momentum >= 0 && c.momentum < 1)) throw InvalidArgument("momentum must be in [0, 1)");
  if (!(c.weight_decay >= 0)) throw InvalidArgument("weight_decay must be >= 0");
  if (c.eval_every < 1) throw InvalidArgument("eval_every must be >= 1");
  validate(c.lr_schedule);
}

template <typename T>
void sgd_momentum_step(ParamStore<T>& params, const GradMap<T>& grads, Velocity<T>& velocity, double lr,
                       double momentum, double weight_decay, bool bn_decay) {
  const std::vector<ParamId> ids = params.ids();
  for (ParamId id : ids) {
    if (!grads.count(id)) throw InvalidState("no gradient for trainable parameter " + to_string(id) + " (" + params.name(id) + ")");
  }
  const T lr_t = static_cast<T>(lr), m = static_cast<T>(momentum);
  for (ParamId id : ids) {
    Tensor<T>& p = params.value(id);
    const Tensor<T>& g = grads.at(id);
    if (g.shape() != p.shape()) {
      throw InvalidState("gradient for " + to_string(id) + " has shape " + g.shape().str() + ", parameter " +
                         p.shape().str());
    }
    auto [it, fresh] = velocity.try_emplace(id, Tensor<T>(p.shape()));
    Tensor<T>& v = it->second;
    const T wd = (params.role(id) == ParamRole::BatchNorm && !bn_decay) ? T(0) : static_cast<T>(weight_decay);
    T* pv = p.ptr();
    T* vv = v.ptr();
    const T* gv = g.ptr();
    const std::size_t n = p.size();
    for (std::size_t i = 0; i < n; ++i) {
      vv[i] = m * vv[i] + gv[i] + wd * pv[i];
      pv[i] -= lr_t * vv[i];
    }
  }
}

template <typename T>
int argmax(std::span<const T> values) {
  if (values.empty()) throw InvalidArgument("argmax of an empty range");
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

template <typename T>
Tensor<T> make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  const std::size_t per = data.pixels_per_image();
  Tensor<T> out(Shape{static_cast<std::int64_t>(indices.size()), data.channels, data.height, data.width});
  T* dst = out.ptr();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& px = data.images.at(indices[b]).pixels;
    if (px.size() != per) throw InvalidArgument("image " + std::to_string(data.images[indices[b]].id) + " has wrong size");
    std::copy(px.begin(), px.end(), dst + b * per);
  }
  return out;
}

namespace {

void check_classes(const WsmsSpec& spec, const Dataset& data) {
  if (spec.backbone.head.class_count != data.class_count) {
    throw InvalidArgument("model has " + std::to_string(spec.backbone.head.class_count) + " classes, dataset has " +
                          std::to_string(data.class_count));
  }
  if (spec.backbone.input_channels != data.channels) {
    throw InvalidArgument("model expects " + std::to_string(spec.backbone.input_channels) +
                          " input channels, dataset has " + std::to_string(data.channels));
  }
}

std::vector<int> labels_of(const Dataset& data, std::span<const std::size_t> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) {
    const int l = data.images[i].label;
    if (l < 0 || l >= data.class_count) {
      throw InvalidArgument("image " + std::to_string(data.images[i].id) + " has label " + std::to_string(l) +
                            " outside [0, " + std::to_string(data.class_count) + ")");
    }
    out.push_back(l);
  }
  return out;
}

template <typename T>
void count_errors(const Tensor<T>& logits, std::span<const int> labels, std::size_t& wrong,
                  std::vector<int>* predicted = nullptr) {
  const auto k = static_cast<std::size_t>(logits.shape()[1]);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const int p = argmax(std::span<const T>(logits.ptr() + b * k, k));
    if (p != labels[b]) ++wrong;
    if (predicted) predicted->push_back(p);
  }
}

}  // namespace

template <typename T>
EvalResult evaluate(WsmsModel<T>& model, const Dataset& data) {
  check_classes(model.spec, data);
  EvalResult out;
  if (data.size() == 0) return out;
  std::size_t wrong = 0;
  double loss_sum = 0;
  std::vector<int> predicted;
  predicted.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += kEvalBatch) {
    const std::size_t end = std::min(data.size(), start + kEvalBatch);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const std::vector<int> labels = labels_of(data, idx);
    Tape<T> tape;
    Var x = tape.constant(make_batch<T>(data, idx));
    const WsmsForward f = forward_wsms(tape, model, x, {Mode::Eval, {}});
    Var loss = softmax_cross_entropy(tape, f.logits, labels);
    loss_sum += static_cast<double>(tape.value(loss).item()) * static_cast<double>(idx.size());
    count_errors(tape.value(f.logits), labels, wrong, &predicted);
  }
  out.error_percent = 100.0 * static_cast<double>(wrong) / static_cast<double>(data.size());
  out.mean_loss = loss_sum / static_cast<double>(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    out.rows.push_back({data.images[i].id, data.images[i].label, predicted[i]});
  }
  std::sort(out.rows.begin(), out.rows.end(), [](const Prediction& a, const Prediction& b) { return a.id < b.id; });
  return out;
}

void write_predictions_csv(std::ostream& os, const std::vector<Prediction>& rows) {
  os << "id,true,pred,correct\n";
  for (const auto& r : rows) os << r.id << ',' << r.truth << ',' << r.predicted << ',' << (r.correct() ? 1 : 0) << '\n';
}

std::vector<Prediction> read_predictions_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "id,true,pred,correct") {
    throw FormatError("prediction dump must start with header 'id,true,pred,correct'");
  }
  std::vector<Prediction> rows;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    Prediction p;
    int correct = -1;
    char c1 = 0, c2 = 0, c3 = 0;
    if (!(ls >> p.id >> c1 >> p.truth >> c2 >> p.predicted >> c3 >> correct) || c1 != ',' || c2 != ',' ||
        c3 != ',' || (correct != 0 && correct != 1) || (correct == 1) != p.correct()) {
      throw FormatError("prediction dump line " + std::to_string(line_no) + ": malformed row '" + line + "'");
    }
    rows.push_back(p);
  }
  return rows;
}

std::vector<Prediction> load_predictions_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return read_predictions_csv(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<std::int64_t> compare_preds(const std::vector<std::vector<Prediction>>& baselines,
                                        const std::vector<Prediction>& target) {
  if (baselines.empty()) throw InvalidArgument("compare_preds needs at least one baseline dump");
  std::map<std::int64_t, bool> candidates;  // id -> still qualifies
  for (const auto& p : target) candidates[p.id] = p.correct();
  for (const auto& dump : baselines) {
    std::set<std::int64_t> seen;
    for (const auto& p : dump) {
      auto it = candidates.find(p.id);
      if (it == candidates.end()) continue;
      seen.insert(p.id);
      if (p.correct()) it->second = false;
    }
    for (auto& [id, ok] : candidates) {
      if (!seen.count(id)) ok = false;
    }
  }
  std::vector<std::int64_t> out;
  for (const auto& [id, ok] : candidates) {
    if (ok) out.push_back(id);
  }
  return out;
}

std::string to_json_line(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["train_loss"] = r.train_loss ? nlohmann::ordered_json(*r.train_loss) : nlohmann::ordered_json(nullptr);
  j["train_error"] = r.train_error ? nlohmann::ordered_json(*r.train_error) : nlohmann::ordered_json(nullptr);
  j["test_error"] = r.test_error ? nlohmann::ordered_json(*r.test_error) : nlohmann::ordered_json(nullptr);
  for (const auto& [name, err] : r.evals) j["eval"][name] = err;
  if (r.wallclock) j["wallclock"] = *r.wallclock;
  return j.dump();
}

template <typename T>
TrainResult train(WsmsModel<T>& model, const TrainData& data, const TrainConfig& config, const TrainOutputs& outputs) {
  validate(config);
  if (!data.train || data.train->size() == 0) throw InvalidArgument("training split is empty");
  check_classes(model.spec, *data.train);
  for (const auto& e : data.evals) {
    if (!e.data) throw InvalidArgument("evaluation split '" + e.name + "' is missing");
    check_classes(model.spec, *e.data);
  }
  const Dataset& train_set = *data.train;
  const auto start = std::chrono::steady_clock::now();
  TrainResult result;
  Velocity<T> velocity;

  auto save = [&](const std::optional<std::filesystem::path>& path, int epoch, const MetricsRecord& rec) {
    if (!path) return;
    CheckpointMetadata meta = outputs.metadata;
    meta["epoch"] = std::to_string(epoch);
    if (rec.test_error) {
      std::ostringstream os;
      os.precision(17);
      os << *rec.test_error;
      meta["test_error"] = os.str();
    }
    save_checkpoint(*path, model.params, meta);
  };

  auto run_evals = [&](MetricsRecord& rec) {
    for (std::size_t i = 0; i < data.evals.size(); ++i) {
      const double err = evaluate(model, *data.evals[i].data).error_percent;
      rec.evals[data.evals[i].name] = err;
      if (i == 0) rec.test_error = err;
    }
  };

  auto finish = [&](MetricsRecord rec) {
    if (config.record_wallclock) {
      rec.wallclock = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    if (rec.test_error && (result.records.empty() || *rec.test_error < result.best_test_error)) {
      result.best_test_error = *rec.test_error;
      result.best_epoch = rec.epoch;
      save(outputs.best_checkpoint, rec.epoch, rec);
    }
    if (rec.test_error) result.final_test_error = *rec.test_error;
    if (outputs.on_record) outputs.on_record(rec);
    result.records.push_back(std::move(rec));
  };

  {
    MetricsRecord initial;
    initial.lr = lr_at(config.lr_schedule, 1);
    run_evals(initial);
    if (config.epochs == 0) save(outputs.final_checkpoint, 0, initial);
    finish(std::move(initial));
  }

  constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const double lr = lr_at(config.lr_schedule, epoch);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(derive_seed({config.seed, static_cast<std::uint64_t>(epoch), kShuffleStream}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0;
    std::size_t wrong = 0;
    long batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(config.batch_size), ++batch_index) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
      const std::span<const std::size_t> idx(order.data() + begin, end - begin);
      const std::vector<int> labels = labels_of(train_set, idx);
      Tensor<T> batch;
      if (config.augment) {
        Dataset view;
        view.channels = train_set.channels;
        view.height = train_set.height;
        view.width = train_set.width;
        view.class_count = train_set.class_count;
        for (std::size_t i : idx) {
          const LabeledImage& img = train_set.images[i];
          std::mt19937_64 rng(derive_seed({config.seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(img.id)}));
          view.images.push_back(augment(img, train_set, rng));
        }
        std::vector<std::size_t> all(view.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        batch = make_batch<T>(view, all);
      } else {
        batch = make_batch<T>(train_set, idx);
      }

      Tape<T> tape;
      Var x = tape.constant(std::move(batch));
      const WsmsForward f = forward_wsms(tape, model, x, {Mode::Train, {}});
      Var loss = softmax_cross_entropy(tape, f.logits, labels);
      const double loss_value = static_cast<double>(tape.value(loss).item());
      if (!std::isfinite(loss_value)) {
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(batch_index),
                             epoch, batch_index);
      }
      const GradMap<T> grads = tape.backward(loss);
      for (const auto& [id, g] : grads) {
        for (T v : g.data()) {
          if (!std::isfinite(static_cast<double>(v))) {
            throw NumericalError("non-finite gradient for " + model.params.name(id) + " at epoch " +
                                     std::to_string(epoch) + ", batch " + std::to_string(batch_index),
                                 epoch, batch_index);
          }
        }
      }
      sgd_momentum_step(model.params, grads, velocity, lr, config.momentum, config.weight_decay, config.bn_decay);
      loss_sum += loss_value * static_cast<double>(idx.size());
      count_errors(tape.value(f.logits), labels, wrong);
    }

    MetricsRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.train_error = 100.0 * static_cast<double>(wrong) / static_cast<double>(train_set.size());
    if (epoch % config.eval_every == 0 || epoch == config.epochs) run_evals(rec);
    if (epoch == config.epochs) save(outputs.final_checkpoint, epoch, rec);
    finish(std::move(rec));
  }
  return result;
}

#define WSMS_INSTANTIATE_TRAINER(T)                                                                               \
  template void sgd_momentum_step<T>(ParamStore<T>&, const GradMap<T>&, Velocity<T>&, double, double, double,    \
                                     bool);                                                                       \
  template int argmax<T>(std::span<const T>);                                                                     \
  template Tensor<T> make_batch<T>(const Dataset&, std::span<const std::size_t>);                                 \
  template EvalResult evaluate<T>(WsmsModel<T>&, const Dataset&);                                                 \
  template TrainResult train<T>(WsmsModel<T>&, const TrainData&, const TrainConfig&, const TrainOutputs&);

WSMS_INSTANTIATE_TRAINER(float)
WSMS_INSTANTIATE_TRAINER(double)

}  // namespace wsms
