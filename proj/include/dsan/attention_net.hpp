#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dsan/volume.hpp"

namespace dsan::net {

struct NetworkConfig {
  // Residual blocks per stage; (3, 4, 6, 3) is ResNet34.
  std::array<int, 4> block_counts{3, 4, 6, 3};
  int base_channels = 64;
  // Stride of the first block of each residual stage. The stem (7^3 conv +
  // max-pool) halves twice, so with (1, 2, 2, 1) the total reduction is 16.
  std::array<int, 4> stride_plan{1, 2, 2, 1};
  // Soft-mask sigmoid sharpness and centre.
  double alpha = 100.0;
  double beta = 0.4;

  // Throws ContractError unless the last stage stride is 1, the total
  // reduction is 16, alpha > 0 and beta in (0, 1).
  void validate() const;

  // Two blocks per stage, 8 base channels; meant for 32^3 inputs.
  static NetworkConfig tiny();

  bool operator==(const NetworkConfig&) const = default;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

// Output spatial extent of the feature grid: ceil-halving once per stride-2
// stage (stem conv, stem pool, and every residual stage with stride 2).
Shape3 feature_shape(const NetworkConfig& config, Shape3 input);

struct ForwardOutput {
  torch::Tensor logit;          // [B]
  torch::Tensor features;       // [B, C, d, h, w], before global pooling
  torch::Tensor raw_attention;  // [B, d, h, w], >= 0
};

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(int in_channels, int out_channels, int stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv3d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::BatchNorm3d bn1_{nullptr}, bn2_{nullptr};
  torch::nn::Sequential shortcut_{nullptr};
};
TORCH_MODULE(BasicBlock);

// 3D ResNet backbone with a single-logit GAP classifier and an online CAM
// attention head. The attention head's 1x1x1 kernel is the classifier weight
// itself, read through a detached view, so the attention loss never reaches
// the classifier weight.
class AttentionResNetImpl : public torch::nn::Module {
 public:
  explicit AttentionResNetImpl(NetworkConfig config);

  // x: [B, 1, D, H, W] or [B, D, H, W]. Throws ContractError on non-finite
  // input.
  ForwardOutput forward(torch::Tensor x);

  const NetworkConfig& config() const { return config_; }
  // [C] view of the classifier weight (shares storage, requires grad).
  torch::Tensor classifier_weight() const;
  // [C] detached view of the same storage used as the attention kernel.
  torch::Tensor attention_kernel() const;
  torch::nn::Linear classifier() const { return fc_; }

 private:
  NetworkConfig config_;
  torch::nn::Sequential stem_{nullptr};
  std::array<torch::nn::Sequential, 4> stages_;
  torch::nn::Linear fc_{nullptr};
};
TORCH_MODULE(AttentionResNet);

// Deterministic initialisation: He-normal (fan-out) conv weights, unit BN
// scales, zero biases, uniform(+-1/sqrt(C)) classifier weight.
AttentionResNet init_model(const NetworkConfig& config, std::uint64_t seed);

// ReLU(sum_c w_c f_c) with no bias. f: [B, C, d, h, w] or [C, d, h, w];
// w: [C]. Result drops the channel axis.
torch::Tensor raw_attention(const torch::Tensor& f, const torch::Tensor& w);

// Trilinear upsampling of [B, d, h, w] to `size`, then per-sample min-max
// normalisation to [0, 1]. A constant map normalises to all zeros.
torch::Tensor upsample_normalize(const torch::Tensor& a, Shape3 size);

// T = 1 / (1 + exp(-alpha (a_norm - beta))) after upsample_normalize().
torch::Tensor soft_mask(const torch::Tensor& a, Shape3 size, double alpha = 100.0,
                        double beta = 0.4);

struct GradCamResult {
  torch::Tensor feature_map;  // [B, d, h, w], ReLU of gradient-weighted sum
  torch::Tensor heatmap;      // [B, D, H, W], upsampled and min-max normalised
};

// Grad-CAM on the last feature grid: channel weights are the spatial mean of
// d(logit)/d(features). Runs the model in its current train/eval mode.
GradCamResult grad_cam(AttentionResNet& model, const torch::Tensor& volume);

// Checkpoint: <stem>.pt holds the parameter and buffer map, <stem>.json the
// metadata. Both are written to temporaries and renamed into place.
struct CheckpointMeta {
  NetworkConfig config;
  int epoch = 0;
  std::optional<double> val_auc;
  std::uint64_t seed = 0;
  std::string sampling_strategy;  // "US" or "SS"
  // Preprocessing the model was trained on.
  nlohmann::json preprocessing;
};

void to_json(nlohmann::json& j, const CheckpointMeta& m);
void from_json(const nlohmann::json& j, CheckpointMeta& m);

void save_checkpoint(const std::filesystem::path& stem, AttentionResNet& model,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
  AttentionResNet model{nullptr};
  CheckpointMeta meta;
};

// Accepts the stem, the .pt path or the .json path.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Bitwise copy of all parameters and buffers from `src` into `dst`.
void copy_state(AttentionResNet& dst, AttentionResNet& src);

}  // namespace dsan::net
