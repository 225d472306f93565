#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "segcam/synth.hpp"
#include "segcam/unet.hpp"

namespace segcam {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 4;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Non-finite loss during training.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, int epoch, int batch)
      : std::runtime_error(what), epoch_(epoch), batch_(batch) {}
  int epoch() const { return epoch_; }
  int batch() const { return batch_; }

 private:
  int epoch_;
  int batch_;
};

struct SegMetrics {
  double pixel_accuracy = 0.0;
  // nullopt where the class is absent from both prediction and truth
  std::vector<std::optional<double>> class_iou;
  double mean_iou = 0.0;
};

/// Confusion counts accumulated over any number of mask pairs.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(int num_classes);
  void add(const TensorF& pred_mask, const TensorF& true_mask);
  SegMetrics result() const;

 private:
  int num_classes_;
  std::uint64_t correct_ = 0;
  std::uint64_t total_ = 0;
  std::vector<std::uint64_t> intersection_;
  std::vector<std::uint64_t> uni_;
};

SegMetrics compute_metrics(const TensorF& pred_mask, const TensorF& true_mask, int num_classes);

struct EpochMetrics {
  int epoch = 0;  // 1-based
  double loss = 0.0;
  double pixel_accuracy = 0.0;
  double mean_iou = 0.0;
};

/// Mean cross-entropy of the model over `samples` (no parameter update).
double dataset_loss(const Network& model, const std::vector<Sample>& samples);

/// Adam on mean per-pixel cross-entropy. Sample order is reshuffled every
/// epoch with SplitMix64(config.seed, shuffle stream). Loss, accuracy and
/// mIoU reported per epoch are measured on the forward passes used for the
/// updates.
std::vector<EpochMetrics> train(Network& model, const std::vector<Sample>& samples, const TrainConfig& config,
                                const std::function<void(const EpochMetrics&)>& on_epoch = {});

SegMetrics evaluate(const Network& model, const std::vector<Sample>& samples);

std::vector<int> mask_labels(const TensorF& mask);

}  // namespace segcam
