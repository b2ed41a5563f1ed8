#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "segkit/tensor.hpp"

namespace segkit {

enum class Family { unet, dilated_unet, unet_gcn_head, gcn_unet };

Family family_from_string(const std::string& s);
std::string to_string(Family f);

/// Declarative description of an architecture variant. Everything about a
/// built model (parameter shapes, counts, topology) is a deterministic
/// function of this struct plus the build seed.
struct ModelSpec {
  Family family = Family::unet;
  int depth = 4;
  int base_width = 32;
  int width_multiplier = 1;         // 1 or 2; 2 doubles every channel count
  std::vector<int> dilation_scheme;  // per encoder level; empty = family default
  int gcn_kernel = 0;                // odd, required iff the family has a GCN block
  bool batch_norm = true;
  bool br_relu = false;  // optional ReLU between the two BR convolutions
  int out_channels = 1;

  void validate() const;
  bool uses_gcn() const {
    return family == Family::unet_gcn_head || family == Family::gcn_unet;
  }
  int effective_width() const { return base_width * width_multiplier; }
  /// The per-level encoder dilations after defaults are applied.
  std::vector<int> effective_dilations() const;
};

struct ConvParams {
  Tensor w, b;
};

struct BnParams {
  Tensor gamma, beta;
  BatchNormStats stats;
};

/// conv3x3 (+bn) + relu
struct ConvBlock {
  ConvParams conv;
  std::optional<BnParams> bn;
  int dilation = 1;
};

struct DoubleConv {
  ConvBlock c1, c2;
};

struct GcnParams {
  SeparablePairWeights w;
  int k = 0;
};

/// Boundary refinement: score + conv3x3(conv3x3(score)), no activations
/// unless relu_between is set.
struct BrParams {
  ConvParams c1, c2;
  bool relu_between = false;
};

/// Two-branch large-kernel block, no nonlinearity inside.
Tensor gcn_block(Tape& tape, const Tensor& input, const GcnParams& p);
Tensor br_block(Tape& tape, const Tensor& score, const BrParams& p);

class Model {
 public:
  Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  /// Kaiming fan-in initialization scaled for ReLU, zero biases, seeded.
  static Model build(const ModelSpec& spec, uint64_t seed);

  /// Per-pixel probabilities in (0,1); requires H and W divisible by
  /// 2^depth (the data pipeline pads inputs accordingly).
  Tensor forward(Tape& tape, const Tensor& batch, bool training = false);

  struct ForwardResult {
    Tensor features;  // the map handed to the prediction head
    Tensor prob;
  };
  ForwardResult forward_with_features(Tape& tape, const Tensor& batch, bool training = false);

  const ModelSpec& spec() const { return spec_; }
  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
  /// Batch-norm running statistics, keyed for checkpointing.
  std::vector<std::pair<std::string, std::vector<double>*>> buffers();
  int64_t parameter_count() const;

 private:
  ModelSpec spec_;
  std::vector<DoubleConv> enc_;
  DoubleConv bottleneck_;
  std::vector<DoubleConv> dec_;
  ConvParams head_;                  // unet / dilated_unet
  GcnParams head_gcn_;               // unet_gcn_head
  BrParams head_br_;
  std::vector<GcnParams> level_gcn_;  // gcn_unet
  std::vector<BrParams> level_br_;
  std::vector<BrParams> merge_br_;
  BrParams final_br_;
  std::vector<std::pair<std::string, Tensor>> params_;

  Tensor apply_double_conv(Tape& tape, DoubleConv& dc, const Tensor& x, bool training);
  friend struct ModelBuilder;
};

}  // namespace segkit
