#include "segcam/trainer.hpp"

#include <cmath>
#include <numeric>

#include "segcam/rng.hpp"

namespace segcam {

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  // Zero is allowed here so a run can be checked to leave parameters intact.
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("learning_rate must be finite and non-negative");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw std::invalid_argument("Adam epsilon must be positive");
}

MetricsAccumulator::MetricsAccumulator(int num_classes)
    : num_classes_(num_classes),
      intersection_(static_cast<std::size_t>(num_classes)),
      uni_(static_cast<std::size_t>(num_classes)) {}

void MetricsAccumulator::add(const TensorF& pred, const TensorF& truth) {
  if (pred.shape() != truth.shape()) {
    throw ShapeError("metrics: prediction " + pred.shape().to_string() + " vs truth " + truth.shape().to_string());
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = static_cast<int>(pred[i]);
    const int t = static_cast<int>(truth[i]);
    if (p < 0 || p >= num_classes_ || t < 0 || t >= num_classes_) {
      throw ShapeError("metrics: class id out of range");
    }
    ++total_;
    if (p == t) {
      ++correct_;
      ++intersection_[p];
      ++uni_[p];
    } else {
      ++uni_[p];
      ++uni_[t];
    }
  }
}

SegMetrics MetricsAccumulator::result() const {
  SegMetrics m;
  m.pixel_accuracy = total_ ? static_cast<double>(correct_) / static_cast<double>(total_) : 0.0;
  double sum = 0.0;
  int defined = 0;
  for (int c = 0; c < num_classes_; ++c) {
    if (uni_[c] == 0) {
      m.class_iou.emplace_back(std::nullopt);
      continue;
    }
    const double iou = static_cast<double>(intersection_[c]) / static_cast<double>(uni_[c]);
    m.class_iou.emplace_back(iou);
    sum += iou;
    ++defined;
  }
  m.mean_iou = defined ? sum / defined : 0.0;
  return m;
}

SegMetrics compute_metrics(const TensorF& pred_mask, const TensorF& true_mask, int num_classes) {
  MetricsAccumulator acc(num_classes);
  acc.add(pred_mask, true_mask);
  return acc.result();
}

std::vector<int> mask_labels(const TensorF& mask) {
  std::vector<int> labels(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) labels[i] = static_cast<int>(mask[i]);
  return labels;
}

double dataset_loss(const Network& model, const std::vector<Sample>& samples) {
  double total = 0.0;
  for (const auto& s : samples) {
    auto pass = model.forward(s.image);
    const auto labels = mask_labels(s.mask);
    const NodeId loss = pass.graph.cross_entropy(pass.logits, labels);
    total += pass.graph.value(loss)[0];
  }
  return samples.empty() ? 0.0 : total / static_cast<double>(samples.size());
}

std::vector<EpochMetrics> train(Network& model, const std::vector<Sample>& samples, const TrainConfig& config,
                                const std::function<void(const EpochMetrics&)>& on_epoch) {
  config.validate();
  if (samples.empty()) throw std::invalid_argument("training set is empty");
  for (const auto& s : samples) model.check_input(s.image.shape());

  auto& params = model.parameters();
  std::vector<std::vector<double>> m(params.size()), v(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i].assign(params[i].value.size(), 0.0);
    v[i].assign(params[i].value.size(), 0.0);
  }

  SplitMix64 shuffle_rng(config.seed, rng_stream::kShuffle);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<EpochMetrics> history;
  std::uint64_t step = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    }
    MetricsAccumulator acc(model.num_classes());
    double loss_sum = 0.0;
    int batch_index = 0;

    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const auto batch = static_cast<float>(end - start);
      std::vector<TensorF> grads;
      grads.reserve(params.size());
      for (const auto& p : params) grads.emplace_back(p.value.shape());

      for (std::size_t k = start; k < end; ++k) {
        const Sample& s = samples[order[k]];
        auto pass = model.forward(s.image);
        acc.add(predict_mask(pass.logits_value()), s.mask);
        const auto labels = mask_labels(s.mask);
        const NodeId loss = pass.graph.cross_entropy(pass.logits, labels);
        const float value = pass.graph.value(loss)[0];
        if (!std::isfinite(value)) {
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(batch_index),
                              epoch, batch_index);
        }
        loss_sum += value;
        const auto store = pass.graph.backward(loss, TensorF(Shape{1}, 1.0f / batch));
        for (std::size_t i = 0; i < params.size(); ++i) {
          const auto& g = store.at(pass.params[i]);
          for (std::size_t j = 0; j < g.size(); ++j) grads[i][j] += g[j];
        }
      }

      ++step;
      const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].value.data();
        for (std::size_t j = 0; j < p.size(); ++j) {
          const double g = grads[i][j];
          m[i][j] = config.beta1 * m[i][j] + (1.0 - config.beta1) * g;
          v[i][j] = config.beta2 * v[i][j] + (1.0 - config.beta2) * g * g;
          const double mhat = m[i][j] / bc1;
          const double vhat = v[i][j] / bc2;
          p[j] = static_cast<float>(p[j] - config.learning_rate * mhat / (std::sqrt(vhat) + config.epsilon));
        }
      }
    }

    const SegMetrics sm = acc.result();
    EpochMetrics em{epoch, loss_sum / static_cast<double>(samples.size()), sm.pixel_accuracy, sm.mean_iou};
    history.push_back(em);
    if (on_epoch) on_epoch(em);
  }
  return history;
}

SegMetrics evaluate(const Network& model, const std::vector<Sample>& samples) {
  MetricsAccumulator acc(model.num_classes());
  for (const auto& s : samples) {
    auto pass = model.forward(s.image);
    acc.add(predict_mask(pass.logits_value()), s.mask);
  }
  return acc.result();
}

}  // namespace segcam
