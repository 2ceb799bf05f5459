#include "dsan/objectives.hpp"

#include "dsan/error.hpp"

namespace dsan::loss {

torch::Tensor classification_loss(const torch::Tensor& logits, const torch::Tensor& labels) {
  if (logits.sizes() != labels.sizes()) throw ContractError("logits and labels differ in shape");
  const auto y = labels.to(logits.dtype());
  return torch::clamp_min(logits, 0) - logits * y + torch::log1p(torch::exp(-logits.abs()));
}

double classification_loss(double logit, int label) {
  if (label != 0 && label != 1) throw ContractError("label must be 0 or 1");
  const auto x = torch::tensor({logit}, torch::kFloat64);
  const auto y = torch::tensor({static_cast<double>(label)}, torch::kFloat64);
  return classification_loss(x, y).item<double>();
}

torch::Tensor attention_loss(const torch::Tensor& attention, const torch::Tensor& mask) {
  if (attention.sizes() != mask.sizes()) {
    throw ContractError("attention map and infection mask differ in shape");
  }
  const auto t = attention.dim() == 1 ? attention.unsqueeze(0) : attention;
  const auto m = (mask.dim() == 1 ? mask.unsqueeze(0) : mask).to(t.dtype());
  const auto num = (t - m).square().flatten(1).sum(1);
  const auto den = (t + m).flatten(1).sum(1).clamp_min(kAttentionEps);
  return num / den;
}

double attention_loss(std::span<const double> attention, std::span<const double> mask) {
  if (attention.size() != mask.size()) {
    throw ContractError("attention map and infection mask differ in size");
  }
  const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  const auto t = torch::from_blob(const_cast<double*>(attention.data()),
                                  {1, static_cast<std::int64_t>(attention.size())}, opts);
  const auto m = torch::from_blob(const_cast<double*>(mask.data()),
                                  {1, static_cast<std::int64_t>(mask.size())}, opts);
  return attention_loss(t, m).item<double>();
}

double total_loss(double l_c, double l_ex, int label, double lambda) {
  return label == 1 ? l_c + lambda * l_ex : l_c;
}

LossBreakdown combine(const torch::Tensor& per_sample_l_c, const torch::Tensor& covid_l_ex,
                      double lambda) {
  LossBreakdown b;
  b.lambda = lambda;
  b.l_c = per_sample_l_c.mean();
  b.l_total = b.l_c;
  if (covid_l_ex.defined() && covid_l_ex.numel() > 0) {
    b.l_ex = covid_l_ex.mean();
    b.l_total = b.l_c + lambda * *b.l_ex;
  }
  return b;
}

}  // namespace dsan::loss
