#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bdnet/kernels.hpp"
#include "bdnet/layers.hpp"
#include "bdnet/tensor.hpp"

namespace bdnet {

/// A = every depth-wise conv binary. B = stride-2 depth-wise convs stay
/// real-valued.
enum class Variant { A, B };

/// Float: no quantization anywhere. BinaryActivations: activations are
/// binarized, weights stay real (first step of two-step training). Binary:
/// weights and activations binarized.
enum class Precision { Float, BinaryActivations, Binary };

const char* to_string(Variant v);
const char* to_string(Precision p);
Precision precision_from_string(const std::string& s);

struct StageSpec {
  std::size_t channels;
  std::size_t stride;
};

struct ModelConfig {
  Variant variant = Variant::A;
  std::size_t n_convs = 2;
  double width_multiplier = 1.0;
  std::vector<StageSpec> stages = {{32, 1}, {64, 2}, {128, 1}, {128, 2}, {256, 1}};
  std::size_t in_channels = 3;
  std::size_t in_h = 32;
  std::size_t in_w = 32;
  std::size_t classes = 10;
  BlockTopology topology = BlockTopology::PreBNResidual;
  /// Replace every 3x3 depth-wise conv with a 3x3 regular conv (the
  /// configuration of binary MobileNets that avoid depth-wise convs).
  bool regular_conv = false;

  /// Naively binarized stack: one binary conv per layer, no residuals.
  static ModelConfig baseline();
  /// Pre-BN residuals with 1.58-bit (dual) depth-wise convs.
  static ModelConfig bdnet();

  /// Stage channels after width multiplication, rounded up to a multiple of 8.
  std::vector<std::size_t> scaled_channels() const;
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

enum class ParamKind {
  Weight,     // conv / linear weights (latent real weights of binary convs); decayed
  Bias,       // linear bias; decayed
  Norm,       // BN scale/shift and activation shifts/slopes
  Quantizer,  // thresholds and magnitudes of sign quantizers
  Buffer,     // BN running statistics; not trained
};

struct Param {
  std::string name;
  Shape shape;
  ParamKind kind = ParamKind::Weight;
  std::vector<float> value;
  std::vector<float> grad;

  Param(std::string name, Shape shape, ParamKind kind, float fill = 0.0f);
  bool trainable() const { return kind != ParamKind::Buffer; }
};

/// Per-layer arithmetic description used by the cost model.
struct LayerCost {
  std::string name;
  std::string type;  // e.g. "float_conv", "binary_dw", "linear"
  std::uint64_t macs = 0;
  bool binary = false;
  std::size_t branches = 1;
};

class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor forward(const Tensor& x, bool training) = 0;
  /// Returns dL/dx and accumulates parameter gradients; uses state cached by
  /// the most recent training forward.
  virtual Tensor backward(const Tensor& dy) = 0;
  virtual std::vector<Param*> params() = 0;
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual std::vector<LayerCost> costs(const Shape& in) const = 0;
  /// Inference through the packed XNOR-popcount kernels where applicable.
  virtual Tensor forward_bitwise(const Tensor& x) const = 0;
  virtual const std::string& name() const = 0;
  virtual void set_precision(Precision p) { precision_ = p; }

 protected:
  Precision precision_ = Precision::Binary;
};

class Network {
 public:
  Network(ModelConfig cfg, std::uint64_t seed);
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  const ModelConfig& config() const { return cfg_; }
  Shape input_shape(std::size_t batch) const {
    return {batch, cfg_.in_channels, cfg_.in_h, cfg_.in_w};
  }

  Tensor forward(const Tensor& x, bool training);
  void backward(const Tensor& dlogits);
  Tensor forward_bitwise(const Tensor& x) const;

  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  Param* find(const std::string& name);
  void zero_grad();

  Precision precision() const { return precision_; }
  void set_precision(Precision p);

  /// Sets every binary conv's weight magnitude to mean |w| per output channel.
  void reset_weight_magnitudes();
  /// Reorders multi-conv branches per channel so activation thresholds are
  /// nondecreasing; the network function is unchanged.
  void sort_branches();

  /// Replaces every sign quantizer by its straight-through linearization
  /// around the current weights and the activations produced by batch x, so
  /// the loss becomes smooth along the surrogate path. Running statistics
  /// are left untouched.
  void linearize_quantizers(const Tensor& x);
  void clear_linearization();

  /// (layer name, max over channels of the BN scale) for every BN.
  std::vector<std::pair<std::string, double>> bn_alpha_max() const;

  std::vector<LayerCost> costs() const;

  const std::vector<std::unique_ptr<Module>>& modules() const { return modules_; }

 private:
  ModelConfig cfg_;
  Precision precision_ = Precision::Binary;
  std::vector<std::unique_ptr<Module>> modules_;
};

/// Mean softmax cross-entropy over the batch with its gradient.
struct LossResult {
  double loss = 0.0;
  Tensor dlogits;
  std::size_t correct = 0;
};
LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Checkpoint: "BDCK", u32 version, u64 manifest length, JSON manifest
/// (config, precision, entry names/shapes, payload checksum), then one BDT1
/// record per entry.
inline constexpr std::uint32_t kCheckpointVersion = 1;
std::string save_checkpoint(const Network& net);
Network load_checkpoint(const std::string& bytes);

/// FNV-1a 64-bit.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace bdnet
