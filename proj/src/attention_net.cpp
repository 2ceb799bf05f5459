#include "dsan/attention_net.hpp"

#include <cmath>
#include <fstream>

#include <ATen/CPUGeneratorImpl.h>

#include "dsan/error.hpp"

namespace dsan::net {

namespace F = torch::nn::functional;

void NetworkConfig::validate() const {
  for (int b : block_counts) {
    if (b < 1) throw ContractError("every stage needs at least one residual block");
  }
  if (base_channels < 1) throw ContractError("base_channels must be >= 1");
  int reduction = 4;  // stem conv + stem pool
  for (int s : stride_plan) {
    if (s != 1 && s != 2) throw ContractError("stage strides must be 1 or 2");
    reduction *= s;
  }
  if (stride_plan[3] != 1) throw ContractError("last stage stride must be 1");
  if (reduction != 16) {
    throw ContractError("stride plan must reduce the input by 16, got " + std::to_string(reduction));
  }
  if (!(alpha > 0.0)) throw ContractError("alpha must be > 0");
  if (!(beta > 0.0 && beta < 1.0)) throw ContractError("beta must lie in (0, 1)");
}

NetworkConfig NetworkConfig::tiny() {
  NetworkConfig c;
  c.block_counts = {2, 2, 2, 2};
  c.base_channels = 8;
  return c;
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"block_counts", c.block_counts},
                     {"base_channels", c.base_channels},
                     {"stride_plan", c.stride_plan},
                     {"alpha", c.alpha},
                     {"beta", c.beta}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  NetworkConfig d;
  c.block_counts = j.value("block_counts", d.block_counts);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.stride_plan = j.value("stride_plan", d.stride_plan);
  c.alpha = j.value("alpha", d.alpha);
  c.beta = j.value("beta", d.beta);
}

Shape3 feature_shape(const NetworkConfig& config, Shape3 input) {
  auto halve = [](std::int64_t v) { return (v + 1) / 2; };
  Shape3 s = input;
  auto step = [&] { s = {halve(s.d), halve(s.h), halve(s.w)}; };
  step();  // stem conv
  step();  // stem pool
  for (int stride : config.stride_plan) {
    if (stride == 2) step();
  }
  return s;
}

namespace {

torch::nn::Conv3d conv3(int in, int out, int stride) {
  return torch::nn::Conv3d(
      torch::nn::Conv3dOptions(in, out, 3).stride(stride).padding(1).bias(false));
}

}  // namespace

BasicBlockImpl::BasicBlockImpl(int in_channels, int out_channels, int stride) {
  conv1_ = register_module("conv1", conv3(in_channels, out_channels, stride));
  bn1_ = register_module("bn1", torch::nn::BatchNorm3d(out_channels));
  conv2_ = register_module("conv2", conv3(out_channels, out_channels, 1));
  bn2_ = register_module("bn2", torch::nn::BatchNorm3d(out_channels));
  if (stride != 1 || in_channels != out_channels) {
    shortcut_ = register_module(
        "shortcut",
        torch::nn::Sequential(
            torch::nn::Conv3d(
                torch::nn::Conv3dOptions(in_channels, out_channels, 1).stride(stride).bias(false)),
            torch::nn::BatchNorm3d(out_channels)));
  }
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
  auto out = torch::relu(bn1_(conv1_(x)));
  out = bn2_(conv2_(out));
  const auto identity = shortcut_ ? shortcut_->forward(x) : x;
  return torch::relu(out + identity);
}

AttentionResNetImpl::AttentionResNetImpl(NetworkConfig config) : config_(config) {
  config_.validate();
  const int c0 = config_.base_channels;
  // Odd kernels with padding k/2 give ceil(d/2) at stride 2.
  stem_ = register_module(
      "stem", torch::nn::Sequential(
                  torch::nn::Conv3d(
                      torch::nn::Conv3dOptions(1, c0, 7).stride(2).padding(3).bias(false)),
                  torch::nn::BatchNorm3d(c0), torch::nn::ReLU(),
                  torch::nn::MaxPool3d(torch::nn::MaxPool3dOptions(3).stride(2).padding(1))));
  int in = c0;
  for (int s = 0; s < 4; ++s) {
    const int out = c0 << s;
    torch::nn::Sequential stage;
    for (int b = 0; b < config_.block_counts[s]; ++b) {
      stage->push_back(BasicBlock(in, out, b == 0 ? config_.stride_plan[s] : 1));
      in = out;
    }
    stages_[s] = register_module("layer" + std::to_string(s + 1), stage);
  }
  fc_ = register_module("fc", torch::nn::Linear(in, 1));
}

torch::Tensor AttentionResNetImpl::classifier_weight() const { return fc_->weight.view({-1}); }

torch::Tensor AttentionResNetImpl::attention_kernel() const {
  return fc_->weight.detach().view({-1});
}

ForwardOutput AttentionResNetImpl::forward(torch::Tensor x) {
  if (x.dim() == 4) x = x.unsqueeze(1);
  if (x.dim() != 5 || x.size(1) != 1) {
    throw ContractError("network input must be [B, 1, D, H, W]");
  }
  if (!torch::isfinite(x).all().item<bool>()) throw ContractError("non-finite network input");
  auto f = stem_->forward(x);
  for (auto& stage : stages_) f = stage->forward(f);
  const auto pooled = f.mean({2, 3, 4});
  ForwardOutput out;
  out.logit = fc_(pooled).view({-1});
  out.features = f;
  out.raw_attention = raw_attention(f, attention_kernel());
  return out;
}

AttentionResNet init_model(const NetworkConfig& config, std::uint64_t seed) {
  AttentionResNet model(config);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  torch::NoGradGuard no_grad;
  for (auto& m : model->modules(/*include_self=*/false)) {
    if (auto* conv = m->as<torch::nn::Conv3d>()) {
      const auto& w = conv->weight;
      const double fan_out = static_cast<double>(w.size(0) * w.size(2) * w.size(3) * w.size(4));
      w.copy_(at::normal(0.0, std::sqrt(2.0 / fan_out), w.sizes(), gen));
      if (conv->bias.defined()) conv->bias.zero_();
    } else if (auto* bn = m->as<torch::nn::BatchNorm3d>()) {
      bn->weight.fill_(1.0);
      bn->bias.zero_();
    } else if (auto* lin = m->as<torch::nn::Linear>()) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(lin->weight.size(1)));
      lin->weight.copy_(at::rand(lin->weight.sizes(), gen) * (2.0 * bound) - bound);
      lin->bias.zero_();
    }
  }
  return model;
}

torch::Tensor raw_attention(const torch::Tensor& f, const torch::Tensor& w) {
  const bool batched = f.dim() == 5;
  if (!batched && f.dim() != 4) throw ContractError("features must be [B,C,d,h,w] or [C,d,h,w]");
  const auto fb = batched ? f : f.unsqueeze(0);
  if (w.dim() != 1 || w.size(0) != fb.size(1)) {
    throw ContractError("attention kernel length " + std::to_string(w.numel()) +
                        " does not match feature channels " + std::to_string(fb.size(1)));
  }
  const auto kernel = w.to(fb.dtype()).view({1, -1, 1, 1, 1});
  auto a = torch::relu(torch::conv3d(fb, kernel)).squeeze(1);
  return batched ? a : a.squeeze(0);
}

torch::Tensor upsample_normalize(const torch::Tensor& a, Shape3 size) {
  if (a.dim() != 4) throw ContractError("attention map must be [B, d, h, w]");
  auto up = F::interpolate(a.unsqueeze(1), F::InterpolateFuncOptions()
                                               .size(std::vector<int64_t>{size.d, size.h, size.w})
                                               .mode(torch::kTrilinear)
                                               .align_corners(false))
                .squeeze(1);
  const auto flat = up.flatten(1);
  const auto lo = std::get<0>(flat.min(1)).view({-1, 1, 1, 1});
  const auto hi = std::get<0>(flat.max(1)).view({-1, 1, 1, 1});
  const auto range = hi - lo;
  const auto positive = range > 0;
  // Substitute 1 for a zero range so the discarded branch stays finite.
  const auto safe = torch::where(positive, range, torch::ones_like(range));
  return torch::where(positive, (up - lo) / safe, torch::zeros_like(up));
}

torch::Tensor soft_mask(const torch::Tensor& a, Shape3 size, double alpha, double beta) {
  return torch::sigmoid(alpha * (upsample_normalize(a, size) - beta));
}

GradCamResult grad_cam(AttentionResNet& model, const torch::Tensor& volume) {
  torch::AutoGradMode grad_on(true);
  auto x = volume.dim() == 4 ? volume.unsqueeze(1) : volume;
  const ForwardOutput out = model->forward(x);
  const auto grads = torch::autograd::grad({out.logit.sum()}, {out.features},
                                           /*grad_outputs=*/{}, /*retain_graph=*/false)[0];
  const auto weights = grads.mean({2, 3, 4}, /*keepdim=*/true);
  GradCamResult r;
  r.feature_map = torch::relu((weights * out.features).sum(1)).detach();
  r.heatmap = upsample_normalize(r.feature_map, Shape3{x.size(2), x.size(3), x.size(4)});
  return r;
}

void to_json(nlohmann::json& j, const CheckpointMeta& m) {
  j = nlohmann::json{{"config", m.config},
                     {"epoch", m.epoch},
                     {"val_auc", m.val_auc ? nlohmann::json(*m.val_auc) : nlohmann::json(nullptr)},
                     {"seed", m.seed},
                     {"sampling_strategy", m.sampling_strategy},
                     {"preprocessing", m.preprocessing}};
}

void from_json(const nlohmann::json& j, CheckpointMeta& m) {
  m.config = j.at("config").get<NetworkConfig>();
  m.epoch = j.at("epoch").get<int>();
  if (j.contains("val_auc") && !j.at("val_auc").is_null()) m.val_auc = j.at("val_auc").get<double>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.sampling_strategy = j.at("sampling_strategy").get<std::string>();
  m.preprocessing = j.value("preprocessing", nlohmann::json::object());
}

namespace {

std::filesystem::path stem_of(const std::filesystem::path& p) {
  if (p.extension() == ".pt" || p.extension() == ".json") {
    auto s = p;
    s.replace_extension();
    return s;
  }
  return p;
}

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  auto p = stem;
  p += suffix;
  return p;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, AttentionResNet& model,
                     const CheckpointMeta& meta) {
  const auto stem = stem_of(path);
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  const auto pt = with_suffix(stem, ".pt");
  const auto js = with_suffix(stem, ".json");
  const auto pt_tmp = with_suffix(stem, ".pt.tmp");
  const auto js_tmp = with_suffix(stem, ".json.tmp");
  try {
    torch::serialize::OutputArchive archive;
    model->save(archive);
    archive.save_to(pt_tmp.string());
  } catch (const c10::Error& e) {
    throw IoError("cannot write checkpoint " + pt_tmp.string() + ": " + e.what_without_backtrace());
  }
  {
    std::ofstream out(js_tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + js_tmp.string());
    out << nlohmann::json(meta).dump(2) << '\n';
    if (!out) throw IoError("failed writing " + js_tmp.string());
  }
  std::filesystem::rename(pt_tmp, pt);
  std::filesystem::rename(js_tmp, js);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const auto stem = stem_of(path);
  const auto js = with_suffix(stem, ".json");
  std::ifstream in(js);
  if (!in) throw IoError("cannot open checkpoint metadata " + js.string());
  LoadedCheckpoint ck;
  try {
    ck.meta = nlohmann::json::parse(in).get<CheckpointMeta>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("bad checkpoint metadata " + js.string() + ": " + e.what());
  }
  ck.model = AttentionResNet(ck.meta.config);
  const auto mismatch = [&](const std::string& detail) {
    return ValidationError("checkpoint " + stem.string() + " does not match its configuration: " +
                           detail);
  };
  // Archive reads resize tensors silently, so compare against a fresh model.
  const AttentionResNet reference(ck.meta.config);
  const auto pt = with_suffix(stem, ".pt");
  if (!std::filesystem::exists(pt)) throw IoError("missing checkpoint weights " + pt.string());
  try {
    torch::serialize::InputArchive archive;
    archive.load_from(pt.string());
    ck.model->load(archive);
  } catch (const c10::Error& e) {
    throw mismatch(e.what_without_backtrace());
  }
  auto expected = reference->named_parameters();
  for (const auto& item : ck.model->named_parameters()) {
    if (item.value().sizes() != expected[item.key()].sizes()) throw mismatch(item.key());
  }
  ck.model->eval();
  return ck;
}

void copy_state(AttentionResNet& dst, AttentionResNet& src) {
  torch::NoGradGuard no_grad;
  auto dp = dst->named_parameters();
  for (const auto& item : src->named_parameters()) dp[item.key()].copy_(item.value());
  auto db = dst->named_buffers();
  for (const auto& item : src->named_buffers()) db[item.key()].copy_(item.value());
}

}  // namespace dsan::net
