#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "bdnet/model.hpp"

namespace bdnet {

enum class OptimizerKind { SGD, Adam };
enum class LrSchedule { Cosine, Linear };

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::Adam;
  LrSchedule schedule = LrSchedule::Linear;
  double lr = 1e-3;
  double momentum = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  /// Binary activations + real weights first, then fully binary fine-tuning
  /// from those weights. Off: train at the network's current precision.
  bool two_step = false;
  /// Share of epochs spent in the first step.
  double step1_fraction = 0.5;

  void validate() const;
};

struct Split {
  Tensor x;
  std::vector<int> y;
  std::size_t size() const { return y.size(); }
  /// Samples idx[begin, end) stacked into one batch.
  Split gather(const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end) const;
};

struct Dataset {
  Split train;
  Split val;
  std::size_t classes = 0;
  void validate() const;
};

enum class SyntheticKind { Blobs, Spirals };
SyntheticKind synthetic_kind_from_string(const std::string& s);

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::Blobs;
  std::size_t n = 512;  // total samples, split train/val
  std::size_t classes = 2;
  std::uint64_t seed = 0;
  double val_fraction = 0.25;
  double noise = 0.1;   // point-cloud spread
  double pixel_noise = 0.05;
  std::size_t channels = 3;
  std::size_t h = 16;
  std::size_t w = 16;
};

/// 2-D labeled point clouds (Gaussian blobs or interleaved spirals) lifted to
/// images: each coordinate modulates its own stripe texture, plus noise.
Dataset gen_synthetic(const SyntheticSpec& spec);

/// Rows `label,pix0,pix1,...` with C*H*W pixels each; the last val_fraction of
/// rows (after a seeded shuffle) become the validation split.
Dataset read_csv_dataset(std::istream& is, Shape sample, std::size_t classes,
                         double val_fraction, std::uint64_t seed);

struct EpochStats {
  std::size_t epoch;
  std::string split;
  double loss;
  double accuracy;
};

struct TrainReport {
  std::vector<EpochStats> rows;
  std::vector<double> accuracy_curve(const std::string& split) const;
  void write_csv(std::ostream& os) const;
};

/// Plain optimizers over a parameter list. Weight decay is added to the
/// gradient of Weight/Bias parameters only.
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(const std::vector<Param*>& params, double lr, double weight_decay) = 0;
};

class SGD final : public Optimizer {
 public:
  explicit SGD(double momentum) : momentum_(momentum) {}
  void step(const std::vector<Param*>& params, double lr, double weight_decay) override;

 private:
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

class Adam final : public Optimizer {
 public:
  Adam(double beta1, double beta2, double eps) : b1_(beta1), b2_(beta2), eps_(eps) {}
  void step(const std::vector<Param*>& params, double lr, double weight_decay) override;

 private:
  double b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

double scheduled_lr(const TrainConfig& cfg, std::size_t epoch, std::size_t epochs);

TrainReport train(Network& net, const Dataset& data, const TrainConfig& cfg);

/// Mean loss and accuracy with inference-mode batch norm.
struct EvalResult {
  double loss;
  double accuracy;
};
EvalResult evaluate(Network& net, const Split& split, std::size_t batch_size = 128);

/// Training-mode loss on one batch; fills parameter gradients. Running
/// statistics are left untouched.
double loss_and_grad(Network& net, const Split& batch);

}  // namespace bdnet
