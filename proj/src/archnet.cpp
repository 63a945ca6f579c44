#include "sasan/archnet.hpp"

#include <sstream>
#include <string>

#include "sasan/error.hpp"

namespace F = torch::nn::functional;

namespace sasan::archnet {

namespace {

std::string shape_str(const torch::Tensor& t) {
  std::ostringstream os;
  os << t.sizes();
  return os.str();
}

torch::Tensor upsample2x(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

torch::nn::Conv2d conv(int in, int out, int kernel, int stride = 1, int padding = 0) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding));
}

torch::nn::Sequential attention_double_conv(int in, int out) {
  return torch::nn::Sequential(conv(in, out, 3, 1, 1),
                               torch::nn::InstanceNorm2d(torch::nn::InstanceNorm2dOptions(out).affine(true)),
                               torch::nn::ReLU(), conv(out, out, 3, 1, 1),
                               torch::nn::InstanceNorm2d(torch::nn::InstanceNorm2dOptions(out).affine(true)),
                               torch::nn::ReLU());
}

torch::nn::Sequential unet_double_conv(int in, int out) {
  return torch::nn::Sequential(conv(in, out, 3, 1, 1), torch::nn::BatchNorm2d(out), torch::nn::ReLU(),
                               conv(out, out, 3, 1, 1), torch::nn::BatchNorm2d(out), torch::nn::ReLU());
}

void require_divisible(const torch::Tensor& image, int factor, const char* what) {
  if (image.dim() != 4) {
    throw ContractError(std::string(what) + ": expected a 4-d batch, got " + shape_str(image));
  }
  if (image.size(2) % factor != 0 || image.size(3) % factor != 0) {
    throw ContractError(std::string(what) + ": spatial size " + shape_str(image) +
                        " is not divisible by " + std::to_string(factor));
  }
}

}  // namespace

void GeneratorConfig::validate() const {
  if (image_size < 16 || image_size % 8 != 0) {
    throw ContractError("generator: image side must be >= 16 and divisible by 8, got " +
                        std::to_string(image_size));
  }
  if (num_attention < 2) throw ContractError("generator: need at least two attention maps");
}

int DiscriminatorConfig::output_side(int input_side) const {
  int side = input_side;
  for (int stride : strides) side = (side + 2 - kernel) / stride + 1;
  return side;
}

torch::Tensor modulated_instance_norm(const torch::Tensor& x, const torch::Tensor& gamma,
                                      const torch::Tensor& beta, double eps) {
  if (x.dim() != 4 || gamma.sizes() != x.sizes() || beta.sizes() != x.sizes()) {
    throw ContractError("sasan_normalize: gamma/beta " + shape_str(gamma) + "/" + shape_str(beta) +
                        " must match features " + shape_str(x));
  }
  if (!(eps > 0.0)) throw ContractError("sasan_normalize: epsilon must be positive");
  const auto mean = x.mean({2, 3}, /*keepdim=*/true);
  const auto centered = x - mean;
  const auto var = centered.pow(2).mean({2, 3}, /*keepdim=*/true);
  return gamma * centered / torch::sqrt(var + eps) + beta;
}

torch::Tensor resize_maps(const torch::Tensor& maps, int height, int width) {
  if (maps.size(2) == height && maps.size(3) == width) return maps;
  auto resized = F::interpolate(maps, F::InterpolateFuncOptions()
                                          .size(std::vector<int64_t>{height, width})
                                          .mode(torch::kBilinear)
                                          .align_corners(false));
  return resized / (resized.sum(1, /*keepdim=*/true) + 1e-8);
}

void check_simplex(const torch::Tensor& maps, double tol) {
  torch::NoGradGuard no_grad;
  const double min_value = maps.min().item<double>();
  const double dev = (maps.sum(1) - 1.0).abs().max().item<double>();
  if (min_value < -tol || dev > tol) {
    throw ContractError("attention stack off the simplex: min " + std::to_string(min_value) +
                        ", max |sum-1| " + std::to_string(dev));
  }
}

void init_gan_weights(torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  for (auto& m : module.modules(/*include_self=*/false)) {
    if (auto* c = m->as<torch::nn::Conv2dImpl>()) {
      torch::nn::init::normal_(c->weight, 0.0, 0.02);
      if (c->bias.defined()) torch::nn::init::zeros_(c->bias);
    }
  }
}

// ---------------------------------------------------------------- SasanNorm

SasanNormImpl::SasanNormImpl(int feature_channels, int num_attention, int embed_channels, double eps_)
    : eps(eps_) {
  shared = register_module("shared", conv(num_attention, embed_channels, 3, 1, 1));
  gamma = register_module("gamma", conv(embed_channels, feature_channels, 3, 1, 1));
  beta = register_module("beta", conv(embed_channels, feature_channels, 3, 1, 1));
}

std::pair<torch::Tensor, torch::Tensor> SasanNormImpl::modulation(const torch::Tensor& maps) {
  const auto embedded = torch::relu(shared->forward(maps));
  return {gamma->forward(embedded), beta->forward(embedded)};
}

torch::Tensor SasanNormImpl::forward(const torch::Tensor& x, const torch::Tensor& maps) {
  if (maps.dim() != 4 || maps.size(0) != x.size(0) || maps.size(2) != x.size(2) || maps.size(3) != x.size(3)) {
    throw ContractError("sasan_normalize: maps " + shape_str(maps) + " do not match features " + shape_str(x));
  }
  auto [g, b] = modulation(maps);
  return modulated_instance_norm(x, g, b, eps);
}

void SasanNormImpl::force_constant(double value_gamma, double value_beta) {
  torch::NoGradGuard no_grad;
  gamma->weight.zero_();
  gamma->bias.fill_(value_gamma);
  beta->weight.zero_();
  beta->bias.fill_(value_beta);
}

// ------------------------------------------------------------ SpadeResBlock

SpadeResBlockImpl::SpadeResBlockImpl(int in_channels, int out_channels, int num_attention, int embed_channels,
                                     double eps)
    : learned_skip(in_channels != out_channels) {
  const int middle = std::min(in_channels, out_channels);
  norm0 = register_module("norm0", SasanNorm(in_channels, num_attention, embed_channels, eps));
  conv0 = register_module("conv0", conv(in_channels, middle, 3, 1, 1));
  norm1 = register_module("norm1", SasanNorm(middle, num_attention, embed_channels, eps));
  conv1 = register_module("conv1", conv(middle, out_channels, 3, 1, 1));
  if (learned_skip) {
    norm_skip = register_module("norm_skip", SasanNorm(in_channels, num_attention, embed_channels, eps));
    conv_skip = register_module(
        "conv_skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 1).bias(false)));
  }
}

torch::Tensor SpadeResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& maps) {
  const auto skip = learned_skip ? conv_skip->forward(norm_skip->forward(x, maps)) : x;
  auto h = conv0->forward(torch::leaky_relu(norm0->forward(x, maps), 0.2));
  h = conv1->forward(torch::leaky_relu(norm1->forward(h, maps), 0.2));
  return skip + h;
}

// ---------------------------------------------------------------- ConvBlock

ConvBlockImpl::ConvBlockImpl(int in_channels, int out_channels, int kernel, int stride, int padding, bool relu_)
    : relu(relu_) {
  pad = register_module("pad", torch::nn::ReflectionPad2d(padding));
  conv = register_module("conv", sasan::archnet::conv(in_channels, out_channels, kernel, stride, 0));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) {
  auto y = conv->forward(pad->forward(x));
  return relu ? torch::relu(y) : y;
}

// ---------------------------------------------------------- AttentionModule

AttentionModuleImpl::AttentionModuleImpl(const AttentionConfig& cfg_) : cfg(cfg_) {
  const std::array<int, 4> enc{cfg.channels[0], cfg.channels[1], cfg.channels[2], cfg.channels[2]};
  down.push_back(register_module("down0", attention_double_conv(cfg.in_channels, enc[0])));
  for (int level = 1; level <= cfg.depth; ++level) {
    down.push_back(register_module("down" + std::to_string(level), attention_double_conv(enc[level - 1], enc[level])));
  }
  int previous = enc[3];
  for (int i = 0; i < cfg.depth; ++i) {
    const int skip = enc[2 - i];
    const int out = i + 1 < cfg.depth ? enc[1 - i] : enc[0];
    up.push_back(register_module("up" + std::to_string(i), attention_double_conv(previous + skip, out)));
    previous = out;
  }
  head = register_module("head", conv(previous, cfg.num_attention, 1));
}

torch::Tensor AttentionModuleImpl::logits(const torch::Tensor& image) {
  require_divisible(image, 1 << cfg.depth, "attention module");
  std::vector<torch::Tensor> skips;
  auto h = down[0]->forward(image);
  skips.push_back(h);
  for (int level = 1; level <= cfg.depth; ++level) {
    h = down[static_cast<std::size_t>(level)]->forward(torch::max_pool2d(h, 2));
    if (level < cfg.depth) skips.push_back(h);
  }
  for (int i = 0; i < cfg.depth; ++i) {
    const auto& skip = skips[skips.size() - 1 - static_cast<std::size_t>(i)];
    h = up[static_cast<std::size_t>(i)]->forward(torch::cat({upsample2x(h), skip}, 1));
  }
  return head->forward(h);
}

torch::Tensor AttentionModuleImpl::forward(const torch::Tensor& image) { return torch::softmax(logits(image), 1); }

// ------------------------------------------------------------ AuxClassifier

AuxClassifierImpl::AuxClassifierImpl(int num_attention, int num_classes) {
  conv = register_module("conv", sasan::archnet::conv(num_attention, num_classes, 1));
}

torch::Tensor AuxClassifierImpl::forward(const torch::Tensor& maps) { return torch::softmax(conv->forward(maps), 1); }

// ---------------------------------------------------------- SynthesisModule

SynthesisModuleImpl::SynthesisModuleImpl(const GeneratorConfig& cfg_) : cfg(cfg_) {
  encoder = torch::nn::Sequential();
  int channels = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.encoder_channels.size(); ++i) {
    encoder->push_back(ConvBlock(channels, cfg.encoder_channels[i], cfg.encoder_kernels[i], cfg.encoder_strides[i],
                                 cfg.encoder_paddings[i]));
    channels = cfg.encoder_channels[i];
  }
  register_module("encoder", encoder);
  for (std::size_t i = 0; i < cfg.decoder_in.size(); ++i) {
    decoder.push_back(register_module("decoder" + std::to_string(i),
                                      SpadeResBlock(cfg.decoder_in[i], cfg.decoder_out[i], cfg.num_attention,
                                                    cfg.embed_channels, cfg.instance_eps)));
  }
  tail = register_module("tail", ConvBlock(cfg.decoder_out.back(), cfg.tail_channels, 3, 1, 1));
  out = register_module("out", ConvBlock(cfg.tail_channels, cfg.out_channels, 3, 1, 1, /*relu=*/false));
}

torch::Tensor SynthesisModuleImpl::encode(const torch::Tensor& image) {
  require_divisible(image, 4, "synthesis module");
  return encoder->forward(image);
}

torch::Tensor SynthesisModuleImpl::forward(const torch::Tensor& image, const torch::Tensor& maps) {
  auto h = encode(image);
  const auto height = image.size(2), width = image.size(3);
  if (maps.size(2) != height || maps.size(3) != width || maps.size(0) != image.size(0)) {
    throw ContractError("synthesis module: maps " + shape_str(maps) + " do not match image " + shape_str(image));
  }
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    const int scale = 1 << (decoder.size() - 1 - i);  // 4, 2, 1
    const auto resized = resize_maps(maps, static_cast<int>(height / scale), static_cast<int>(width / scale));
    h = decoder[i]->forward(h, resized);
    if (i + 1 < decoder.size()) h = upsample2x(h);
  }
  return torch::tanh(out->forward(tail->forward(h)));
}

// ---------------------------------------------------------------- Generator

GeneratorImpl::GeneratorImpl(const GeneratorConfig& cfg_, int num_classes) : cfg(cfg_) {
  cfg.validate();
  attention = register_module("attention", AttentionModule(cfg.attention()));
  aux = register_module("aux", AuxClassifier(cfg.num_attention, num_classes));
  synthesis = register_module("synthesis", SynthesisModule(cfg));

  init_gan_weights(*this);
  torch::NoGradGuard no_grad;
  // gamma starts at 1 so every normalization begins as plain instance norm;
  // the zero attention head starts every stack at the uniform 1/N.
  for (auto& m : modules(/*include_self=*/false)) {
    if (auto* norm = m->as<SasanNormImpl>()) norm->gamma->bias.fill_(1.0);
  }
  attention->head->weight.zero_();
  attention->head->bias.zero_();
}

// ------------------------------------------------------------ Discriminator

DiscriminatorImpl::DiscriminatorImpl(const DiscriminatorConfig& cfg_) : cfg(cfg_) {
  layers = torch::nn::Sequential();
  int channels = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    layers->push_back(conv(channels, cfg.channels[i], cfg.kernel, cfg.strides[i], 1));
    if (i > 0) layers->push_back(torch::nn::InstanceNorm2d(cfg.channels[i]));
    layers->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(cfg.leaky_slope)));
    channels = cfg.channels[i];
  }
  layers->push_back(conv(channels, 1, cfg.kernel, cfg.strides.back(), 1));
  register_module("layers", layers);
  init_gan_weights(*this);
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& input) {
  if (input.dim() != 4 || input.size(1) != cfg.in_channels) {
    throw ContractError("discriminator: expected " + std::to_string(cfg.in_channels) + " input channels, got " +
                        shape_str(input));
  }
  if (cfg.output_side(static_cast<int>(std::min(input.size(2), input.size(3)))) < 1) {
    throw ContractError("discriminator: input " + shape_str(input) + " too small for the patch grid");
  }
  return layers->forward(input);
}

// --------------------------------------------------------------------- UNet

UNetImpl::UNetImpl(const UNetConfig& cfg_) : cfg(cfg_) {
  const int b = cfg.base_channels;
  const std::array<int, 5> enc{b, 2 * b, 4 * b, 8 * b, 8 * b};
  down.push_back(register_module("inc", unet_double_conv(cfg.in_channels, enc[0])));
  for (int level = 1; level <= 4; ++level) {
    down.push_back(register_module("down" + std::to_string(level), unet_double_conv(enc[level - 1], enc[level])));
  }
  int previous = enc[4];
  for (int i = 0; i < 4; ++i) {
    const int skip = enc[3 - i];
    const int out = i < 3 ? enc[2 - i] : enc[0];
    up.push_back(register_module("up" + std::to_string(i), unet_double_conv(previous + skip, out)));
    previous = out;
  }
  head = register_module("head", conv(previous, cfg.num_classes, 1));
}

torch::Tensor UNetImpl::logits(const torch::Tensor& image) {
  require_divisible(image, 16, "unet");
  if (image.size(1) != cfg.in_channels) {
    throw ContractError("unet: expected " + std::to_string(cfg.in_channels) + " channels, got " + shape_str(image));
  }
  std::vector<torch::Tensor> skips;
  auto h = down[0]->forward(image);
  skips.push_back(h);
  for (int level = 1; level <= 4; ++level) {
    h = down[static_cast<std::size_t>(level)]->forward(torch::max_pool2d(h, 2));
    if (level < 4) skips.push_back(h);
  }
  for (int i = 0; i < 4; ++i) {
    const int stage = 3 - i;
    auto skip = skips[static_cast<std::size_t>(stage)];
    if (stage == zeroed_stage) skip = torch::zeros_like(skip);
    h = up[static_cast<std::size_t>(i)]->forward(torch::cat({upsample2x(h), skip}, 1));
  }
  return head->forward(h);
}

}  // namespace sasan::archnet
