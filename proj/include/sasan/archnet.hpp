#pragma once

// Network architectures: attention module, self-attentive spatially adaptive
// normalization, SPADE-style residual decoder, PatchGAN discriminators,
// one-layer auxiliary classifier and the detached U-Net segmenter.

#include <torch/torch.h>

#include <array>
#include <vector>

namespace sasan::archnet {

struct AttentionConfig {
  int in_channels = 1;
  int num_attention = 8;
  std::array<int, 3> channels{16, 32, 64};  // one entry per resolution level
  int depth = 3;                            // number of 2x poolings
};

struct GeneratorConfig {
  int in_channels = 1;
  int out_channels = 1;
  int image_size = 64;
  int num_attention = 8;
  int embed_channels = 128;
  double instance_eps = 1e-5;
  std::array<int, 4> encoder_channels{32, 64, 128, 128};
  std::array<int, 4> encoder_kernels{7, 3, 3, 3};
  std::array<int, 4> encoder_strides{1, 2, 2, 1};
  std::array<int, 4> encoder_paddings{3, 1, 1, 1};
  std::array<int, 3> decoder_in{128, 128, 64};
  std::array<int, 3> decoder_out{128, 64, 32};
  int tail_channels = 16;

  /// Attention-map side lengths used by the three decoder blocks: S/4, S/2, S.
  std::array<int, 3> attention_resolutions() const {
    return {image_size / 4, image_size / 2, image_size};
  }
  AttentionConfig attention() const { return {in_channels, num_attention, {16, 32, 64}, 3}; }
  void validate() const;

  /// Full-size configuration from the layer tables: 256x256 images.
  static GeneratorConfig full_scale() {
    GeneratorConfig cfg;
    cfg.image_size = 256;
    return cfg;
  }
};

struct DiscriminatorConfig {
  int in_channels = 1;
  std::array<int, 3> channels{32, 64, 128};
  int kernel = 4;
  std::array<int, 4> strides{2, 2, 2, 1};
  double leaky_slope = 0.2;

  static DiscriminatorConfig image(int in_channels) { return {in_channels, {32, 64, 128}, 4, {2, 2, 2, 1}, 0.2}; }
  static DiscriminatorConfig segmentation(int num_classes) {
    return {num_classes, {32, 32, 32}, 4, {2, 2, 2, 1}, 0.2};
  }
  /// Side of the square score grid for a square input of the given side.
  int output_side(int input_side) const;
};

struct UNetConfig {
  int in_channels = 1;
  int num_classes = 4;
  int base_channels = 16;
};

/// Plain instance normalization modulated by spatial gamma/beta tensors:
/// gamma * (x - mean) / sqrt(var + eps) + beta, statistics per (sample, channel).
torch::Tensor modulated_instance_norm(const torch::Tensor& x, const torch::Tensor& gamma,
                                      const torch::Tensor& beta, double eps);

/// Bilinear resampling of an attention stack followed by per-pixel renormalization.
torch::Tensor resize_maps(const torch::Tensor& maps, int height, int width);

/// Throws ContractError unless every pixel's attention values are >= 0 and sum to 1.
void check_simplex(const torch::Tensor& maps, double tol = 1e-5);

/// Conv weights ~ N(0, 0.02), biases zero.
void init_gan_weights(torch::nn::Module& module);

class SasanNormImpl : public torch::nn::Module {
 public:
  SasanNormImpl(int feature_channels, int num_attention, int embed_channels = 128, double eps = 1e-5);

  /// `maps` must already match the spatial size of `x`.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& maps);
  /// Returns the (gamma, beta) tensors produced from the maps.
  std::pair<torch::Tensor, torch::Tensor> modulation(const torch::Tensor& maps);

  /// Forces gamma == value_gamma and beta == value_beta everywhere (weights zeroed).
  void force_constant(double value_gamma, double value_beta);

  torch::nn::Conv2d shared{nullptr}, gamma{nullptr}, beta{nullptr};
  double eps;
};
TORCH_MODULE(SasanNorm);

/// (norm -> leaky ReLU -> 3x3 conv) x2 plus a normalized 1x1 skip when widths differ.
class SpadeResBlockImpl : public torch::nn::Module {
 public:
  SpadeResBlockImpl(int in_channels, int out_channels, int num_attention, int embed_channels, double eps);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& maps);

  SasanNorm norm0{nullptr}, norm1{nullptr}, norm_skip{nullptr};
  torch::nn::Conv2d conv0{nullptr}, conv1{nullptr}, conv_skip{nullptr};
  bool learned_skip;
};
TORCH_MODULE(SpadeResBlock);

/// Reflection pad -> conv -> optional ReLU.
class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(int in_channels, int out_channels, int kernel, int stride, int padding, bool relu = true);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::ReflectionPad2d pad{nullptr};
  torch::nn::Conv2d conv{nullptr};
  bool relu;
};
TORCH_MODULE(ConvBlock);

/// Lightweight U-Net producing an N-channel per-pixel softmax at input resolution.
class AttentionModuleImpl : public torch::nn::Module {
 public:
  explicit AttentionModuleImpl(const AttentionConfig& cfg);
  torch::Tensor forward(const torch::Tensor& image);
  torch::Tensor logits(const torch::Tensor& image);

  AttentionConfig cfg;
  std::vector<torch::nn::Sequential> down;  // down[0] is the input block
  std::vector<torch::nn::Sequential> up;
  torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(AttentionModule);

/// Single 1x1 convolution from attention maps to class probabilities.
class AuxClassifierImpl : public torch::nn::Module {
 public:
  AuxClassifierImpl(int num_attention, int num_classes);
  torch::Tensor forward(const torch::Tensor& maps);

  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(AuxClassifier);

/// Encoder of conv blocks, three SPADE residual blocks fed by attention maps at
/// S/4, S/2 and S, then two tail convolutions and tanh.
class SynthesisModuleImpl : public torch::nn::Module {
 public:
  explicit SynthesisModuleImpl(const GeneratorConfig& cfg);
  torch::Tensor forward(const torch::Tensor& image, const torch::Tensor& maps);
  torch::Tensor encode(const torch::Tensor& image);

  GeneratorConfig cfg;
  torch::nn::Sequential encoder{nullptr};
  std::vector<SpadeResBlock> decoder;
  ConvBlock tail{nullptr}, out{nullptr};
};
TORCH_MODULE(SynthesisModule);

/// One translation direction: the attention module and auxiliary classifier of
/// the source domain together with the synthesis module of the target domain.
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(const GeneratorConfig& cfg, int num_classes);

  torch::Tensor attend(const torch::Tensor& image) { return attention->forward(image); }
  torch::Tensor classify(const torch::Tensor& maps) { return aux->forward(maps); }
  torch::Tensor synthesize(const torch::Tensor& image, const torch::Tensor& maps) {
    return synthesis->forward(image, maps);
  }
  torch::Tensor forward(const torch::Tensor& image) { return synthesize(image, attend(image)); }

  GeneratorConfig cfg;
  AttentionModule attention{nullptr};
  AuxClassifier aux{nullptr};
  SynthesisModule synthesis{nullptr};
};
TORCH_MODULE(Generator);

/// PatchGAN: three stride-2 4x4 convs (instance norm on the last two) and a
/// stride-1 4x4 conv to a single-channel raw score grid.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const DiscriminatorConfig& cfg);
  torch::Tensor forward(const torch::Tensor& input);

  DiscriminatorConfig cfg;
  torch::nn::Sequential layers{nullptr};
};
TORCH_MODULE(Discriminator);

/// Four max-pool levels of double conv (conv, batch norm, ReLU) and four
/// bilinear up levels with skip concatenation.
class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(const UNetConfig& cfg);
  torch::Tensor logits(const torch::Tensor& image);
  torch::Tensor forward(const torch::Tensor& image) { return torch::softmax(logits(image), 1); }

  /// When >= 0, the skip connection from encoder stage `k` is replaced by zeros (sensitivity probes).
  int zeroed_stage = -1;

  UNetConfig cfg;
  std::vector<torch::nn::Sequential> down;
  std::vector<torch::nn::Sequential> up;
  torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(UNet);

}  // namespace sasan::archnet
