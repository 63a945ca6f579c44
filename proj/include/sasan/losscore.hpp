#pragma once

// Differentiable loss terms and the combined unpaired objective.

#include <torch/torch.h>

#include <optional>
#include <string>
#include <vector>

#include "sasan/archnet.hpp"

namespace sasan::losscore {

struct LossWeights {
  double cycle = 10.0;     // lambda_c
  double identity = 2.5;   // lambda_id
  double reg = 1.0;        // lambda_reg
  double aux = 0.1;        // lambda_aux
  double voxel = 10.0;     // supervised mode only

  void validate() const;
};

struct SsimConfig {
  int window = 7;
  double dynamic_range = 2.0;  // images in [-1,1]

  double c1() const { return (0.01 * dynamic_range) * (0.01 * dynamic_range); }
  double c2() const { return (0.03 * dynamic_range) * (0.03 * dynamic_range); }

  static SsimConfig loss() { return {7, 2.0}; }
  /// Metric variant: images remapped to [0,1].
  static SsimConfig metric() { return {7, 1.0}; }
};

enum class Side { generator, discriminator };

/// Least-squares GAN loss with real target 1 and fake target 0.
/// Generator side: mean((fake - 1)^2). Discriminator side:
/// real_weight * mean((real - 1)^2) + mean(fake^2).
torch::Tensor lsgan_loss(const torch::Tensor& scores_real, const torch::Tensor& scores_fake, Side side,
                         double real_weight = 1.0);

/// Mean over all valid window positions of the SSIM index. Uniform window.
torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimConfig& cfg = SsimConfig::loss());

/// mean|x - x_rec| + (1 - ssim(x_rec, x)).
torch::Tensor cycle_loss(const torch::Tensor& x, const torch::Tensor& x_rec);

/// mean|y_id - y|.
torch::Tensor identity_loss(const torch::Tensor& y, const torch::Tensor& y_id);

/// mean|fake - real| on aligned pairs.
torch::Tensor voxel_loss(const torch::Tensor& fake, const torch::Tensor& real);

/// Frobenius distance between the Gram matrix of L2-normalized flattened maps
/// and the identity, averaged over the batch.
torch::Tensor attention_reg_loss(const torch::Tensor& maps);

/// Per sample: sum_c CE_c / (H*W) + sum_c DSC_c, averaged over the batch.
/// `target` must be one-hot over the class dimension.
torch::Tensor aux_seg_loss(const torch::Tensor& pred, const torch::Tensor& target);

/// One-hot encoding of an integer label batch [B,H,W] to [B,C,H,W] in the dtype given.
torch::Tensor one_hot(const torch::Tensor& labels, int num_classes, torch::Dtype dtype = torch::kFloat32);

/// The six trainable networks of one adaptation run. `gen_ab` translates A -> B
/// (attention and auxiliary classifier of domain A, synthesis of domain B).
struct ModelBundle {
  archnet::Generator gen_ab{nullptr};
  archnet::Generator gen_ba{nullptr};
  archnet::Discriminator disc_a{nullptr};
  archnet::Discriminator disc_b{nullptr};
  archnet::Discriminator disc_seg{nullptr};
  int num_classes = 0;

  static ModelBundle create(const archnet::GeneratorConfig& cfg, int num_classes);
  std::vector<torch::Tensor> generator_parameters() const;
  std::vector<torch::Tensor> discriminator_parameters() const;
  /// All networks as (prefix, module) pairs in a fixed order.
  std::vector<std::pair<std::string, std::shared_ptr<torch::nn::Module>>> named_modules() const;
  void to(torch::Dtype dtype);
};

struct AblationFlags {
  bool no_seg_disc = false;
  bool no_aux = false;
  bool no_reg = false;
};

struct LossTerm {
  std::string name;
  double weight = 1.0;
  torch::Tensor value;  // unweighted, scalar
  double weighted() const { return weight * value.item<double>(); }
};

struct LossBreakdown {
  std::vector<LossTerm> terms;
  torch::Tensor total;  // differentiable weighted sum

  double total_value() const { return total.item<double>(); }
  double term_value(const std::string& name) const;
  const LossTerm* find(const std::string& name) const;
};

/// Activations of one generator-side pass, reused by the discriminator side.
struct ForwardCache {
  torch::Tensor fake_b, fake_a;       // G_B(a), G_A(b)
  torch::Tensor seg_real_b, seg_fake_b;  // aux_B(att_B(b)), aux_B(att_B(fake_b))
  torch::Tensor seg_real_a, seg_fake_a;  // aux_A(att_A(a)), aux_A(att_A(fake_a))
};

struct ObjectiveInputs {
  torch::Tensor batch_a;                 // [B,1,H,W]
  torch::Tensor batch_b;                 // [B,1,H,W]
  torch::Tensor labels_a;                // [B,H,W] int64, required
  std::optional<torch::Tensor> labels_b;  // full-supervision mode only
  bool paired = false;                   // enables voxel terms
};

/// Generator-side objective for both directions: adversarial (image and
/// segmentation), cycle, identity, attention regularization, auxiliary
/// segmentation and, when paired, voxel terms. Fills `cache` for the
/// discriminator update.
LossBreakdown generator_objective(ModelBundle& models, const ObjectiveInputs& in, const LossWeights& weights,
                                  const AblationFlags& flags, ForwardCache* cache = nullptr);

/// Discriminator-side least-squares objective on the detached fakes of `cache`.
LossBreakdown discriminator_objective(ModelBundle& models, const ObjectiveInputs& in, const ForwardCache& cache,
                                      const AblationFlags& flags);

/// Convenience dispatcher over the two sides; recomputes the forward pass.
LossBreakdown unpaired_objective(ModelBundle& models, const ObjectiveInputs& in, const LossWeights& weights,
                                 Side side, const AblationFlags& flags);

}  // namespace sasan::losscore
