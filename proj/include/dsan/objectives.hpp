#pragma once

#include <optional>
#include <span>

#include <torch/torch.h>

namespace dsan::loss {

// Floor on the attention-loss denominator; makes the empty/empty case 0.
inline constexpr double kAttentionEps = 1e-8;
inline constexpr double kDefaultLambda = 0.5;

// Per-sample binary cross entropy on sigmoid(logit), computed as
// max(x, 0) - x*y + log1p(exp(-|x|)). labels: 1 = COVID, 0 = CAP.
torch::Tensor classification_loss(const torch::Tensor& logits, const torch::Tensor& labels);
double classification_loss(double logit, int label);

// Per-sample sum((T - M)^2) / max(sum(T + M), eps), reduced over every axis
// but the first. T in [0,1], M binary, same shape.
torch::Tensor attention_loss(const torch::Tensor& attention, const torch::Tensor& mask);
double attention_loss(std::span<const double> attention, std::span<const double> mask);

// l_c + lambda * l_ex for COVID (label 1); l_c alone for CAP.
double total_loss(double l_c, double l_ex, int label, double lambda = kDefaultLambda);

// Mini-batch objective. l_c is the mean over the batch; l_ex is the mean
// over the COVID samples and is absent when the batch has none.
struct LossBreakdown {
  torch::Tensor l_c;
  std::optional<torch::Tensor> l_ex;
  torch::Tensor l_total;
  double lambda = kDefaultLambda;
};

// per_sample_l_c: [B]; covid_l_ex: [B_covid] (may be undefined or empty).
LossBreakdown combine(const torch::Tensor& per_sample_l_c, const torch::Tensor& covid_l_ex,
                      double lambda = kDefaultLambda);

}  // namespace dsan::loss
