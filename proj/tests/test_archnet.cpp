#include "doctest.h"

#include <cmath>

#include "gradient_suite.hpp"
#include "sasan/archnet.hpp"
#include "sasan/error.hpp"

using namespace sasan;
using namespace sasan::archnet;
using sasan::testing::rand_double;
using sasan::testing::randn_double;

namespace {

// Bilinear weights with half-pixel centres and edge clamping, computed per output cell.
torch::Tensor bilinear_oracle(const torch::Tensor& maps, int out_h, int out_w) {
  const auto n = maps.size(1), in_h = maps.size(2), in_w = maps.size(3);
  auto out = torch::zeros({maps.size(0), n, out_h, out_w}, torch::kFloat64);
  const auto src = maps.to(torch::kFloat64).contiguous();
  auto s = src.accessor<double, 4>();
  auto o = out.accessor<double, 4>();
  auto coord = [](int dst, double scale, std::int64_t size) {
    double x = (dst + 0.5) * scale - 0.5;
    if (x < 0) x = 0;
    auto i0 = static_cast<std::int64_t>(std::floor(x));
    auto i1 = std::min(i0 + 1, size - 1);
    return std::tuple{i0, i1, x - static_cast<double>(i0)};
  };
  for (std::int64_t b = 0; b < maps.size(0); ++b) {
    for (int y = 0; y < out_h; ++y) {
      const auto [y0, y1, ty] = coord(y, static_cast<double>(in_h) / out_h, in_h);
      for (int x = 0; x < out_w; ++x) {
        const auto [x0, x1, tx] = coord(x, static_cast<double>(in_w) / out_w, in_w);
        double total = 0;
        for (std::int64_t k = 0; k < n; ++k) {
          const double v = (1 - ty) * ((1 - tx) * s[b][k][y0][x0] + tx * s[b][k][y0][x1]) +
                           ty * ((1 - tx) * s[b][k][y1][x0] + tx * s[b][k][y1][x1]);
          o[b][k][y][x] = v;
          total += v;
        }
        for (std::int64_t k = 0; k < n; ++k) o[b][k][y][x] /= total + 1e-8;
      }
    }
  }
  return out;
}

int conv_out(int n, int kernel, int stride, int pad) { return (n + 2 * pad - kernel) / stride + 1; }

double max_abs(const torch::Tensor& t) { return t.abs().max().item<double>(); }

}  // namespace

TEST_CASE("analytic gradients of the network forward passes match finite differences") {
  for (const auto& c : sasan::testing::gradient_cases()) {
    if (c.name != "sasan_normalize" && c.name.find("forward") == std::string::npos) continue;
    CAPTURE(c.name);
    const auto r = c.run();
    CAPTURE(r.worst);
    CHECK(r.entries > 0);
    CHECK(r.max_rel_error < sasan::testing::kGradientTolerance);
  }
}

TEST_CASE("sasan_normalize with identity modulation is instance normalization") {
  SasanNorm norm(3, 4, 16, 1e-5);
  norm->to(torch::kFloat64);
  norm->force_constant(1.0, 0.0);
  const auto x = randn_double({2, 3, 8, 8}, 1, 3.0) + 2.0;
  const auto maps = torch::softmax(randn_double({2, 4, 8, 8}, 2), 1);
  const auto y = norm->forward(x, maps);
  CHECK(max_abs(y.mean({2, 3})) < 1e-6);
  CHECK(max_abs(y.var({2, 3}, /*unbiased=*/false) - 1.0) < 1e-4);
  const auto plain = torch::instance_norm(x, {}, {}, {}, {}, true, 0.0, 1e-5, false);
  CHECK(max_abs(y - plain) < 1e-10);

  auto [g, b] = norm->modulation(maps);
  CHECK(g.sizes() == x.sizes());
  CHECK(b.sizes() == x.sizes());
}

TEST_CASE("sasan_normalize on constant features returns beta") {
  SasanNorm norm(2, 4, 8, 1e-5);
  norm->to(torch::kFloat64);
  const auto x = torch::full({1, 2, 4, 4}, 3.0, torch::kFloat64);
  const auto maps = torch::softmax(randn_double({1, 4, 4, 4}, 3), 1);
  auto [g, b] = norm->modulation(maps);
  CHECK(max_abs(norm->forward(x, maps) - b) == 0.0);
}

TEST_CASE("sasan_normalize per-pixel arithmetic") {
  const auto x = torch::tensor({1.0, 2.0, 3.0, 4.0}, torch::kFloat64).view({1, 1, 2, 2});
  const auto y = modulated_instance_norm(x, torch::full_like(x, 2.0), torch::full_like(x, 1.0), 1e-5);
  const double vals[] = {1, 2, 3, 4};
  for (int i = 0; i < 4; ++i) {
    const double expected = 2.0 * (vals[i] - 2.5) / std::sqrt(1.25 + 1e-5) + 1.0;
    CHECK(y.view(-1)[i].item<double>() == doctest::Approx(expected).epsilon(1e-12));
  }
  CHECK_THROWS_AS(modulated_instance_norm(x, torch::ones({1, 1, 3, 3}), torch::zeros_like(x), 1e-5), ContractError);
  CHECK_THROWS_AS(modulated_instance_norm(x, torch::ones_like(x), torch::zeros_like(x), 0.0), ContractError);
  SasanNorm norm(1, 4, 8, 1e-5);
  CHECK_THROWS_AS(norm->forward(torch::zeros({1, 1, 8, 8}), torch::ones({1, 4, 4, 4}) / 4), ContractError);
}

TEST_CASE("attention module outputs a uniform simplex stack at initialization") {
  GeneratorConfig cfg;
  Generator gen(cfg, 4);
  const auto image = torch::rand({2, 1, 64, 64}) * 2 - 1;
  const auto maps = gen->attend(image);
  CHECK(maps.sizes() == torch::IntArrayRef({2, 8, 64, 64}));
  CHECK(max_abs(maps - 1.0 / 8) < 1e-6);
  CHECK_NOTHROW(check_simplex(maps));
  CHECK_THROWS_AS(gen->attend(torch::zeros({1, 1, 36, 36})), ContractError);
}

TEST_CASE("attention module stays on the simplex with random weights") {
  AttentionModule att(AttentionConfig{1, 16, {16, 32, 64}, 3});
  torch::NoGradGuard no_grad;
  torch::nn::init::normal_(att->head->weight, 0.0, 1.0);
  const auto maps = att->forward(torch::rand({2, 1, 32, 32}) * 2 - 1);
  CHECK(maps.size(1) == 16);
  CHECK_NOTHROW(check_simplex(maps));
  CHECK_THROWS_AS(check_simplex(maps * 1.1), ContractError);
}

TEST_CASE("resize_maps") {
  const auto uniform = torch::full({1, 8, 16, 16}, 1.0 / 8);
  CHECK(resize_maps(uniform, 16, 16).equal(uniform));
  CHECK(max_abs(resize_maps(uniform, 32, 32) - 1.0 / 8) < 1e-6);

  // One-hot vertical stripes of width 3 cycling over the 8 maps.
  auto stripes = torch::zeros({1, 8, 64, 64}, torch::kFloat64);
  for (int c = 0; c < 64; ++c) stripes.index_put_({0, (c / 3) % 8, torch::indexing::Slice(), c}, 1.0);
  const auto small = resize_maps(stripes, 32, 32);
  CHECK_NOTHROW(check_simplex(small));
  CHECK(max_abs(small - bilinear_oracle(stripes, 32, 32)) < 1e-9);

  const auto random = torch::softmax(randn_double({2, 8, 16, 16}, 4), 1);
  const auto big = resize_maps(random, 64, 64);
  CHECK_NOTHROW(check_simplex(big));
  CHECK(max_abs(big - bilinear_oracle(random, 64, 64)) < 1e-9);
}

TEST_CASE("generator shapes") {
  GeneratorConfig cfg;
  Generator gen(cfg, 4);
  torch::NoGradGuard no_grad;
  const auto x = torch::rand({2, 1, 64, 64}) * 2 - 1;
  CHECK(gen->synthesis->encode(x).sizes() == torch::IntArrayRef({2, 128, 16, 16}));
  const auto y = gen->forward(x);
  CHECK(y.sizes() == x.sizes());
  CHECK(y.abs().max().item<double>() < 1.0);
  CHECK_FALSE(y.equal(x));

  for (int side : {128, 256}) {
    cfg.image_size = side;
    Generator g(cfg, 4);
    const auto in = torch::rand({1, 1, side, side}) * 2 - 1;
    CHECK(g->forward(in).sizes() == in.sizes());
  }
  CHECK_THROWS_AS(Generator(GeneratorConfig{.image_size = 20}, 4), ContractError);
}

TEST_CASE("full-scale encoder emits 128 features at 64x64") {
  Generator gen(GeneratorConfig::full_scale(), 4);
  torch::NoGradGuard no_grad;
  CHECK(gen->synthesis->encode(torch::zeros({2, 1, 256, 256})).sizes() == torch::IntArrayRef({2, 128, 64, 64}));
}

TEST_CASE("auxiliary classifier") {
  AuxClassifier aux(8, 4);
  torch::NoGradGuard no_grad;
  const auto maps = torch::softmax(torch::randn({2, 8, 64, 64}), 1);
  const auto p = aux->forward(maps);
  CHECK(p.sizes() == torch::IntArrayRef({2, 4, 64, 64}));
  CHECK(max_abs(p.sum(1) - 1.0) < 1e-5);

  AuxClassifier ident(4, 4);
  ident->conv->weight.copy_(torch::eye(4).view({4, 4, 1, 1}) * 10.0);
  ident->conv->bias.zero_();
  const auto idx = torch::randint(0, 4, {1, 8, 8});
  const auto one_hot = torch::one_hot(idx, 4).permute({0, 3, 1, 2}).to(torch::kFloat32);
  CHECK(ident->forward(one_hot).argmax(1).equal(idx));
}

TEST_CASE("discriminator score grids follow the stride arithmetic") {
  Discriminator d(DiscriminatorConfig::image(1));
  torch::NoGradGuard no_grad;
  for (int side : {16, 32, 64, 256}) {
    int expected = side;
    for (int stride : {2, 2, 2, 1}) expected = conv_out(expected, 4, stride, 1);
    CHECK(d->cfg.output_side(side) == expected);
    const auto s = d->forward(torch::zeros({1, 1, side, side}));
    CHECK(s.sizes() == torch::IntArrayRef({1, 1, expected, expected}));
  }
  CHECK(d->cfg.output_side(64) == 7);
  CHECK(d->cfg.output_side(256) == 31);
  CHECK_THROWS_AS(d->forward(torch::zeros({1, 2, 64, 64})), ContractError);
  CHECK_THROWS_AS(d->forward(torch::zeros({1, 1, 8, 8})), ContractError);

  Discriminator seg(DiscriminatorConfig::segmentation(4));
  CHECK(seg->forward(torch::zeros({1, 4, 64, 64})).size(1) == 1);
}

TEST_CASE("discriminator is differentiable in its input") {
  Discriminator d(DiscriminatorConfig::image(1));
  auto x = torch::randn({1, 1, 32, 32}, torch::requires_grad());
  d->forward(x).mean().backward();
  CHECK(x.grad().abs().sum().item<double>() > 0.0);
}

TEST_CASE("unet shapes and skip sensitivity") {
  UNet net(UNetConfig{1, 4, 8});
  net->eval();
  torch::NoGradGuard no_grad;
  const auto x = torch::rand({1, 1, 64, 64}) * 2 - 1;
  const auto p = net->forward(x);
  CHECK(p.sizes() == torch::IntArrayRef({1, 4, 64, 64}));
  CHECK(max_abs(p.sum(1) - 1.0) < 1e-5);
  CHECK_THROWS_AS(net->forward(torch::zeros({1, 1, 40, 40})), ContractError);

  const auto base = net->logits(x);
  for (int k = 0; k < 4; ++k) {
    net->zeroed_stage = k;
    CAPTURE(k);
    CHECK(max_abs(net->logits(x) - base) > 1e-6);
  }
  net->zeroed_stage = -1;
}
