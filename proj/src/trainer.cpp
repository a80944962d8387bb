#include "stabmoe/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace stabmoe {

double scheduled_eta(const TrainConfig& config, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) throw std::invalid_argument("scheduled_eta: no steps");
  if (step >= total_steps) throw std::out_of_range("scheduled_eta: step past schedule");
  const auto warm = static_cast<std::size_t>(
      std::ceil(config.warmup_ratio * static_cast<double>(total_steps)));
  if (step < warm)
    return config.eta_peak * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double floor = config.min_lr_ratio * config.eta_peak;
  const double progress =
      static_cast<double>(step - warm) / static_cast<double>(std::max<std::size_t>(total_steps - warm, 1));
  return floor + (config.eta_peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::size_t batches_per_task(const TrainConfig& config, const TaskSpec& spec) {
  if (config.batch_size == 0) throw std::invalid_argument("batches_per_task: batch_size must be >= 1");
  const std::size_t per_epoch = (spec.train_size + config.batch_size - 1) / config.batch_size;
  return per_epoch * config.epochs_per_task;
}

namespace {

struct BatchPass {
  std::vector<LayerTape> tapes;
  std::vector<Matrix> inputs;  // per layer, m x in
  std::vector<Matrix> omegas;  // per layer, m x n
};

BatchPass forward_batch(const MoeModel& model, const LabeledBatch& batch) {
  BatchPass pass;
  const auto m = static_cast<Index>(batch.size());
  pass.tapes.reserve(batch.size());
  for (Index j = 0; j < m; ++j) pass.tapes.push_back(model_forward(model, batch.inputs.row(j).transpose()).tape);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    Matrix x(m, layer.in_dim());
    Matrix w(m, static_cast<Index>(layer.n_experts()));
    for (Index j = 0; j < m; ++j) {
      x.row(j) = pass.tapes[static_cast<std::size_t>(j)].layers[l].input.transpose();
      w.row(j) = pass.tapes[static_cast<std::size_t>(j)].layers[l].omega.transpose();
    }
    pass.inputs.push_back(std::move(x));
    pass.omegas.push_back(std::move(w));
  }
  return pass;
}

std::size_t count_frozen(const ExpertMask& mask) {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

}  // namespace

ContinualLearner::ContinualLearner(MoeModel model, TrainConfig config)
    : model_(std::move(model)), config_(config) {
  if (model_.layers.empty()) throw std::invalid_argument("ContinualLearner: model has no layers");
  if (!(config_.eta_peak > 0.0)) throw std::invalid_argument("ContinualLearner: eta_peak must be > 0");
  if (!(config_.delta > 0.0 && config_.delta <= 1.0))
    throw std::invalid_argument("ContinualLearner: delta must lie in (0, 1]");
  if (config_.batch_size == 0 || config_.epochs_per_task == 0 || config_.decompose_stride == 0)
    throw std::invalid_argument("ContinualLearner: batch_size, epochs_per_task and decompose_stride must be >= 1");
  const std::size_t n = model_.n_experts();
  drift_ = DriftLog(model_.layers.size(), n);
  for (const auto& layer : model_.layers) {
    covariances_.emplace_back(layer.in_dim());
    history_moments_.push_back(Matrix::Zero(layer.in_dim(), layer.in_dim()));
    inverses_.emplace_back();
    plans_.emplace_back();
    stats_.emplace_back(layer.n_experts());
    base_checksums_.push_back(tensor_checksum(layer.base));
  }
}

void ContinualLearner::begin_task() {
  const std::size_t task = tasks_done_ + 1;
  for (std::size_t l = 0; l < model_.layers.size(); ++l) {
    stats_[l].begin_task();
    inverses_[l].reset();
    if (config_.toggles.expert_stabilizer && task >= 2) {
      const Matrix& history = history_moments_[l];
      inverses_[l].emplace(damped_inverse(decompose(history, config_.delta, config_.window),
                                          relative_damping(history, config_.mu_rel)));
    }
  }
}

void ContinualLearner::end_task() {
  for (std::size_t l = 0; l < model_.layers.size(); ++l) {
    stats_[l].end_task();
    history_moments_[l] = covariances_[l].moment();
  }
  ++tasks_done_;
}

TaskReport ContinualLearner::train_task(const TaskSpec& spec) {
  if (spec.input_dim != model_.input_dim() || spec.classes != model_.classes())
    throw std::invalid_argument("train_task: task shape does not match the model");
  const std::size_t task = tasks_done_ + 1;
  begin_task();

  const std::size_t total = batches_per_task(config_, spec);
  const std::size_t per_epoch = total / config_.epochs_per_task;
  const auto warm = static_cast<std::size_t>(
      std::ceil(config_.freeze_warmup_fraction * static_cast<double>(total)));
  const std::size_t decide_at = std::max<std::size_t>(warm, 1) - 1;
  const bool gating = config_.toggles.activation_gate && task >= 2;
  const std::size_t n_layers = model_.layers.size();
  const std::size_t n = model_.n_experts();

  TaskReport report;
  report.task = task;
  report.batches = total;
  report.frozen_counts.assign(n_layers, 0);
  report.batch_losses.reserve(total);
  // open_events[l][i]: index into report.freeze_events while expert i is frozen
  std::vector<std::vector<std::ptrdiff_t>> open_events(n_layers, std::vector<std::ptrdiff_t>(n, -1));

  for (std::size_t b = 0; b < total; ++b) {
    const std::size_t cursor = (b % per_epoch) * config_.batch_size;
    const LabeledBatch batch = sample(spec, Split::Train, config_.batch_size, cursor);
    BatchPass pass = forward_batch(model_, batch);

    for (std::size_t l = 0; l < n_layers; ++l) {
      covariances_[l].ingest(pass.inputs[l]);
      stats_[l].ingest(pass.omegas[l], pass.inputs[l].rowwise().squaredNorm());
    }

    if (gating && (b == decide_at || (config_.freeze_per_batch && b > decide_at))) {
      for (std::size_t l = 0; l < n_layers; ++l) {
        ExpertMask mask = freeze_decide(stats_[l], config_.tau_score, task);
        for (std::size_t i = 0; i < n; ++i) {
          auto& open = open_events[l][i];
          const std::uint64_t sum = expert_checksum(model_.layers[l].experts[i]);
          if (mask[i] && open < 0) {
            open = static_cast<std::ptrdiff_t>(report.freeze_events.size());
            report.freeze_events.push_back({task, l, i, b, sum, 0});
          } else if (!mask[i] && open >= 0) {
            report.freeze_events[static_cast<std::size_t>(open)].checksum_at_release = sum;
            open = -1;
          }
        }
        if (b == decide_at) report.frozen_counts[l] = count_frozen(mask);
        stats_[l].set_frozen(std::move(mask));
      }
    }

    std::vector<ExpertMask> frozen;
    frozen.reserve(n_layers);
    for (const auto& s : stats_) frozen.push_back(s.frozen());

    auto diverged = [&](const char* what) {
      std::ostringstream msg;
      msg << "train_task: non-finite " << what << " at task " << task << " batch " << b
          << " (step " << global_step_ << ", eta " << scheduled_eta(config_, b, total) << ")";
      for (std::size_t l = 0; l < n_layers; ++l)
        msg << "; layer " << l << " router norm " << model_.layers[l].router.norm();
      msg << "; readout norm " << model_.readout.norm();
      return std::runtime_error(msg.str());
    };

    GradientSet grads = batch_backward(model_, pass.tapes, batch.labels, frozen);
    if (!std::isfinite(grads.loss)) throw diverged("loss");
    report.batch_losses.push_back(grads.loss);
    report.skipped_expert_grads += grads.skipped_expert_grads;
    for (const auto& mask : frozen) report.frozen_expert_batches += count_frozen(mask);
    if (gating && b >= decide_at) ++report.post_freeze_batches;

    const double eta = scheduled_eta(config_, b, total);
    for (std::size_t l = 0; l < n_layers; ++l) {
      MoeLayer& layer = model_.layers[l];
      LayerGradients& g = grads.layers[l];

      if (config_.toggles.router_stabilizer) {
        if (b % config_.decompose_stride == 0 || !plans_[l])
          plans_[l] = RouterUpdatePlan{decompose(covariances_[l], config_.delta, config_.window)};
        layer.router -= eta * project_router_gradient(g.router, *plans_[l]);
      } else {
        layer.router -= eta * g.router;
      }

      const DampedInverse* inv = inverses_[l] ? &*inverses_[l] : nullptr;
      double epsilon = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (frozen[l][i]) continue;
        LoraStep step = lora_chain_update(layer, i, g.a[i], g.b[i], inv, eta, frozen[l]);
        epsilon += realized_epsilon(g.a[i], inv, eta);
        if (task >= 2) {
          const Expert& e = layer.experts[i];
          drift_.add_degradation(l, i, degradation(step.b * step.a - e.b * e.a, history_moments_[l]));
        }
        layer.experts[i].a = std::move(step.a);
        layer.experts[i].b = std::move(step.b);
      }
      if (!std::isfinite(epsilon)) throw diverged("expert update");
      drift_.record({task, global_step_, l, eta, coupled_lambda(eta), epsilon});
    }
    model_.readout -= eta * grads.readout;
    ++model_.revision;
    ++global_step_;
  }

  for (std::size_t l = 0; l < n_layers; ++l) {
    GatingRow row;
    row.task = task;
    row.layer = l;
    row.utilization = stats_[l].utilization();
    row.sensitivity_pre = stats_[l].sensitivity_pre();
    row.scores = activation_scores(stats_[l]);
    row.frozen = stats_[l].frozen();
    report.gating.push_back(std::move(row));
    for (std::size_t i = 0; i < n; ++i)
      if (open_events[l][i] >= 0)
        report.freeze_events[static_cast<std::size_t>(open_events[l][i])].checksum_at_release =
            expert_checksum(model_.layers[l].experts[i]);
  }
  end_task();
  return report;
}

double accuracy(const MoeModel& model, const LabeledBatch& data, std::size_t top_k) {
  if (data.size() == 0) throw std::invalid_argument("accuracy: empty data");
  std::size_t correct = 0;
  for (Index j = 0; j < data.inputs.rows(); ++j) {
    const Vector logits = model_logits(model, data.inputs.row(j).transpose(), top_k);
    Index best = 0;
    logits.maxCoeff(&best);
    correct += best == data.labels[static_cast<std::size_t>(j)] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<double> evaluate(const MoeModel& model, const std::vector<TaskSpec>& specs,
                             std::size_t top_k) {
  std::vector<double> row;
  row.reserve(specs.size());
  for (const auto& spec : specs) row.push_back(accuracy(model, full_split(spec, Split::Test), top_k));
  return row;
}

double routing_drift(const MoeModel& model, const Eigen::Ref<const Vector>& reference_hist,
                     const Eigen::Ref<const Matrix>& probe_inputs, std::size_t layer) {
  return js_divergence(routing_histogram(model, probe_inputs, layer), reference_hist);
}

namespace {

double mean_layer_entropy(const MoeModel& model, const Matrix& inputs) {
  double total = 0.0;
  for (std::size_t l = 0; l < model.layers.size(); ++l)
    total += normalized_entropy(routing_histogram(model, inputs, l));
  return total / static_cast<double>(model.layers.size());
}

}  // namespace

ProbeResult rerouting_probe(const MoeModel& snapshot_model, const TaskSpec& task1,
                            const TrainConfig& config, std::size_t epochs) {
  MoeModel model = snapshot_model;
  const LabeledBatch test = full_split(task1, Split::Test);
  ProbeResult result;
  result.entropy_trace.push_back(mean_layer_entropy(model, test.inputs));
  if (epochs > 0) {
    TrainConfig schedule = config;
    schedule.epochs_per_task = epochs;
    const std::size_t total = batches_per_task(schedule, task1);
    const std::size_t per_epoch = total / epochs;
    std::vector<ExpertMask> all_frozen;
    for (const auto& layer : model.layers) all_frozen.emplace_back(layer.n_experts(), true);
    for (std::size_t b = 0; b < total; ++b) {
      const LabeledBatch batch =
          sample(task1, Split::Train, config.batch_size, (b % per_epoch) * config.batch_size);
      const BatchPass pass = forward_batch(model, batch);
      const GradientSet grads = batch_backward(model, pass.tapes, batch.labels, all_frozen);
      const double eta = scheduled_eta(schedule, b, total);
      for (std::size_t l = 0; l < model.layers.size(); ++l)
        model.layers[l].router -= eta * grads.layers[l].router;
      ++model.revision;
      ++result.steps;
      if ((b + 1) % per_epoch == 0) result.entropy_trace.push_back(mean_layer_entropy(model, test.inputs));
    }
  }
  result.accuracy = accuracy(model, test, config.top_k);
  return result;
}

double RunMetrics::final_task1_drift() const {
  if (drift_trace.empty() || drift_trace.back().empty())
    throw std::logic_error("final_task1_drift: no drift recorded");
  double total = 0.0;
  for (double v : drift_trace.back()) total += v;
  return total / static_cast<double>(drift_trace.back().size());
}

RunResult run_stream(const RunSpec& spec) {
  StreamConfig stream = spec.stream;
  stream.seed = spec.train.seed;
  ModelShape shape = spec.model;
  shape.input_dim = stream.input_dim;
  shape.classes = stream.classes;

  RunResult result;
  result.specs = make_stream(stream);
  const std::size_t T = result.specs.size();
  ContinualLearner learner(make_model(shape, mix_seed(spec.train.seed, 1)), spec.train);

  std::vector<Matrix> test_inputs;
  for (const auto& s : result.specs) test_inputs.push_back(full_split(s, Split::Test).inputs);

  RunMetrics& m = result.metrics;
  m.accuracy = AccuracyMatrix(T);
  const std::size_t L = shape.layers;
  std::vector<Vector> reference;

  for (std::size_t t = 0; t < T; ++t) {
    m.tasks.push_back(learner.train_task(result.specs[t]));
    const MoeModel& model = learner.model();
    for (std::size_t s = 0; s <= t; ++s)
      m.accuracy.set(s, t, accuracy(model, full_split(result.specs[s], Split::Test), spec.train.top_k));

    std::vector<std::vector<Vector>> hist(t + 1);
    for (std::size_t s = 0; s <= t; ++s)
      for (std::size_t l = 0; l < L; ++l)
        hist[s].push_back(routing_histogram(model, test_inputs[s], l));
    if (t == 0) reference = hist[0];
    std::vector<double> entropy, drift;
    for (std::size_t l = 0; l < L; ++l) {
      entropy.push_back(normalized_entropy(hist[0][l]));
      drift.push_back(js_divergence(hist[0][l], reference[l]));
    }
    m.routing_histograms.push_back(std::move(hist));
    m.entropy_trace.push_back(std::move(entropy));
    m.drift_trace.push_back(std::move(drift));

    if (spec.keep_snapshots) result.snapshots.push_back(snapshot(model));
    if (spec.probe_every_task || t + 1 == T)
      m.probes.emplace_back(rerouting_probe(model, result.specs[0], spec.train, spec.train.probe_epochs));
    else
      m.probes.emplace_back();
  }
  m.final_average = m.accuracy.final_average();
  m.drift_log = learner.drift_log();
  for (std::size_t l = 0; l < L; ++l)
    m.base_unchanged = m.base_unchanged &&
                       tensor_checksum(learner.model().layers[l].base) == learner.base_checksums()[l];
  return result;
}

}  // namespace stabmoe
