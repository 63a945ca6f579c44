#include "doctest.h"

#include <cmath>

#include "gradient_suite.hpp"
#include "sasan/error.hpp"
#include "sasan/losscore.hpp"

using namespace sasan;
using namespace sasan::losscore;
using sasan::testing::rand_double;
using sasan::testing::randn_double;

namespace {

double val(const torch::Tensor& t) { return t.item<double>(); }

// Frobenius distance of the normalized Gram to I, with explicit loops.
double brute_reg(const torch::Tensor& maps) {
  const auto m = maps.to(torch::kFloat64).contiguous();
  const auto b = m.size(0), n = m.size(1), len = m.size(2) * m.size(3);
  const auto flat = m.view({b, n, len});
  auto a = flat.accessor<double, 3>();
  double total = 0;
  for (std::int64_t s = 0; s < b; ++s) {
    std::vector<double> norms(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      double q = 0;
      for (std::int64_t k = 0; k < len; ++k) q += a[s][i][k] * a[s][i][k];
      norms[static_cast<std::size_t>(i)] = std::max(std::sqrt(q), 1e-8);
    }
    double fro = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < n; ++j) {
        double dot = 0;
        for (std::int64_t k = 0; k < len; ++k) dot += a[s][i][k] * a[s][j][k];
        const double g = dot / (norms[static_cast<std::size_t>(i)] * norms[static_cast<std::size_t>(j)]) - (i == j);
        fro += g * g;
      }
    }
    total += std::sqrt(fro);
  }
  return total / static_cast<double>(b);
}

ModelBundle small_bundle(int classes = 3) {
  archnet::GeneratorConfig cfg;
  cfg.image_size = 16;
  cfg.num_attention = 4;
  auto m = ModelBundle::create(cfg, classes);
  m.to(torch::kFloat64);
  return m;
}

ObjectiveInputs small_inputs(bool paired = false) {
  ObjectiveInputs in;
  in.batch_a = rand_double({2, 1, 16, 16}, 21, -1, 1);
  in.batch_b = rand_double({2, 1, 16, 16}, 22, -1, 1);
  in.labels_a = rand_double({2, 16, 16}, 23, 0, 3).floor().to(torch::kInt64);
  in.paired = paired;
  return in;
}

double weighted_sum(const LossBreakdown& br) {
  double s = 0;
  for (const auto& t : br.terms) s += t.weight * val(t.value);
  return s;
}

}  // namespace

TEST_CASE("analytic gradients of the loss terms match finite differences") {
  for (const auto& c : sasan::testing::gradient_cases()) {
    if (c.name == "sasan_normalize" || c.name.find("forward") != std::string::npos) continue;
    CAPTURE(c.name);
    const auto r = c.run();
    CAPTURE(r.worst);
    CHECK(r.entries > 0);
    CHECK(r.max_rel_error < sasan::testing::kGradientTolerance);
  }
}

TEST_CASE("default loss weights") {
  LossWeights w;
  CHECK(w.cycle == 10.0);
  CHECK(w.identity == 2.5);
  CHECK(w.reg == 1.0);
  CHECK(w.aux == 0.1);
  CHECK(w.voxel == 10.0);
  w.aux = -1;
  CHECK_THROWS_AS(w.validate(), ConfigError);
}

TEST_CASE("lsgan arithmetic") {
  const auto ones = torch::ones({1, 1, 3, 3}, torch::kFloat64);
  const auto zeros = torch::zeros({1, 1, 3, 3}, torch::kFloat64);
  CHECK(val(lsgan_loss(ones, zeros, Side::discriminator)) == 0.0);
  CHECK(val(lsgan_loss({}, ones, Side::generator)) == 0.0);
  CHECK(val(lsgan_loss(ones * 0.5, ones * 0.5, Side::discriminator)) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(val(lsgan_loss(zeros, zeros, Side::discriminator, 2.0)) == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("ssim properties") {
  const auto x = rand_double({2, 1, 12, 12}, 1, -1, 1);
  const auto y = rand_double({2, 1, 12, 12}, 2, -1, 1);
  CHECK(val(ssim(x, x)) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(std::abs(val(ssim(x, y)) - val(ssim(y, x))) < 1e-9);

  const double c1 = SsimConfig::loss().c1();
  CHECK(c1 == doctest::Approx(4e-4).epsilon(1e-12));
  const auto a = torch::full({1, 1, 8, 8}, -1.0, torch::kFloat64);
  CHECK(val(ssim(a, -a)) == doctest::Approx((c1 - 2.0) / (2.0 + c1)).epsilon(1e-12));

  for (std::uint64_t s = 0; s < 20; ++s) {
    const double v = val(ssim(rand_double({1, 1, 9, 9}, 100 + s, -1, 1), rand_double({1, 1, 9, 9}, 200 + s, -1, 1)));
    CHECK((v >= -1.0 && v <= 1.0));
  }
  CHECK_THROWS_AS(ssim(torch::zeros({1, 1, 6, 6}), torch::zeros({1, 1, 6, 6})), ContractError);
  CHECK_THROWS_AS(ssim(torch::zeros({1, 1, 8, 8}), torch::zeros({1, 1, 8, 9})), ContractError);
}

TEST_CASE("cycle loss") {
  const auto x = rand_double({1, 1, 8, 8}, 3, -1, 1);
  CHECK(val(cycle_loss(x, x)) == doctest::Approx(0.0).epsilon(1e-12));
  const auto zero = torch::zeros({1, 1, 8, 8}, torch::kFloat64);
  const double c1 = SsimConfig::loss().c1();
  const double expected = 0.5 + 1.0 - c1 / (0.25 + c1);
  CHECK(val(cycle_loss(zero, zero + 0.5)) == doctest::Approx(expected).epsilon(1e-12));
  for (std::uint64_t s = 0; s < 10; ++s) {
    CHECK(val(cycle_loss(rand_double({1, 1, 8, 8}, s, -1, 1), rand_double({1, 1, 8, 8}, s + 50, -1, 1))) >= 0.0);
  }
}

TEST_CASE("identity and voxel losses") {
  const auto y = torch::full({1, 1, 4, 4}, 0.2, torch::kFloat64);
  CHECK(val(identity_loss(y, y)) == 0.0);
  CHECK(val(identity_loss(y, y * 0 - 0.3)) == doctest::Approx(0.5).epsilon(1e-12));

  const auto a = rand_double({2, 1, 8, 8}, 4, -1, 1), b = rand_double({2, 1, 8, 8}, 5, -1, 1);
  const auto perm = torch::randperm(128);
  const double direct = val(identity_loss(a, b));
  CHECK(std::abs(val(identity_loss(a.flatten().index({perm}), b.flatten().index({perm}))) - direct) < 1e-12);

  CHECK(val(voxel_loss(a, a)) == 0.0);
  CHECK(val(voxel_loss(a + 0.1, a)) == doctest::Approx(0.1).epsilon(1e-9));
  double brute = 0;
  auto fa = a.flatten(), fb = b.flatten();
  for (int i = 0; i < 128; ++i) brute += std::abs(fa[i].item<double>() - fb[i].item<double>());
  CHECK(std::abs(val(voxel_loss(a, b)) - brute / 128) < 1e-12);
  CHECK_THROWS_AS(voxel_loss(a, b.view({2, 1, 4, 16})), ContractError);
}

TEST_CASE("attention regularization") {
  // Disjoint partition: map k owns column stripe k.
  auto part = torch::zeros({1, 4, 8, 8}, torch::kFloat64);
  for (int k = 0; k < 4; ++k) part.index_put_({0, k, torch::indexing::Slice(), torch::indexing::Slice(2 * k, 2 * k + 2)}, 1.0);
  CHECK(val(attention_reg_loss(part)) == doctest::Approx(0.0).epsilon(1e-12));

  const auto same = torch::full({1, 2, 4, 4}, 0.5, torch::kFloat64);
  CHECK(val(attention_reg_loss(same)) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
  const auto same8 = torch::full({1, 8, 4, 4}, 0.125, torch::kFloat64);
  CHECK(val(attention_reg_loss(same8)) == doctest::Approx(std::sqrt(56.0)).epsilon(1e-12));

  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto maps = rand_double({2, 5, 6, 6}, 30 + s, 0.0, 1.0);
    const double v = val(attention_reg_loss(maps));
    CHECK(v >= 0.0);
    CHECK(std::abs(v - brute_reg(maps)) < 1e-9);
    auto scaled = maps.clone();
    scaled.index({torch::indexing::Slice(), 2}).mul_(7.5);
    CHECK(std::abs(val(attention_reg_loss(scaled)) - v) < 1e-9);
  }
  CHECK_THROWS_AS(attention_reg_loss(torch::ones({1, 1, 4, 4})), ContractError);
}

TEST_CASE("auxiliary segmentation loss") {
  const auto labels = rand_double({2, 8, 8}, 6, 0, 3).floor().to(torch::kInt64);
  const auto target = one_hot(labels, 3, torch::kFloat64);
  CHECK(val(aux_seg_loss(target, target)) == doctest::Approx(0.0).epsilon(1e-6));

  const auto t1 = torch::tensor({1.0, 0.0}, torch::kFloat64).view({1, 2, 1, 1});
  const auto p1 = torch::tensor({0.5, 0.5}, torch::kFloat64).view({1, 2, 1, 1});
  const double expected = -std::log(0.5 + 1e-8) + 1.0 / 3.0 + 1.0;
  CHECK(val(aux_seg_loss(p1, t1)) == doctest::Approx(expected).epsilon(1e-9));
  CHECK(expected == doctest::Approx(2.026480).epsilon(1e-6));

  CHECK_THROWS_AS(aux_seg_loss(p1, p1), ContractError);
  CHECK_THROWS_AS(aux_seg_loss(p1, torch::zeros_like(p1)), ContractError);

  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto pred = torch::softmax(randn_double({1, 3, 8, 8}, 60 + s), 1);
    CHECK(val(aux_seg_loss(pred, target.narrow(0, 0, 1))) >= 0.0);
    const auto dsc = 1.0 - 2.0 * (target.narrow(0, 0, 1) * pred).sum({2, 3}) /
                               (target.narrow(0, 0, 1) + pred).sum({2, 3});
    CHECK(dsc.min().item<double>() >= 0.0);
    CHECK(dsc.max().item<double>() <= 1.0);
  }
}

TEST_CASE("generator objective breakdown") {
  torch::manual_seed(1);
  auto models = small_bundle();
  const auto in = small_inputs();
  const LossWeights w;
  const auto br = generator_objective(models, in, w, {});
  CHECK(std::abs(br.total_value() - weighted_sum(br)) < 1e-9);
  for (const char* name : {"adv_img_ab", "adv_img_ba", "adv_seg_ab", "adv_seg_ba", "cycle_a", "cycle_b",
                           "identity_b", "identity_a", "reg_a", "reg_b", "aux_a", "aux_b"}) {
    CAPTURE(name);
    REQUIRE(br.find(name) != nullptr);
  }
  CHECK(br.find("voxel_ab") == nullptr);
  CHECK(br.find("cycle_a")->weight == 10.0);
  CHECK(br.find("identity_a")->weight == 2.5);
  CHECK(br.find("reg_a")->weight == 1.0);
  CHECK(br.find("aux_b")->weight == 0.1);
  // Uniform initial maps: each reg term is two copies of sqrt(N^2 - N).
  CHECK(br.term_value("reg_a") == doctest::Approx(2.0 * std::sqrt(12.0)).epsilon(1e-9));

  const auto paired = generator_objective(models, small_inputs(true), w, {});
  CHECK(paired.find("voxel_ab") != nullptr);
  CHECK(paired.find("voxel_ab")->weight == 10.0);
  CHECK(std::abs(paired.total_value() - weighted_sum(paired)) < 1e-9);

  auto missing = in;
  missing.labels_a = torch::Tensor();
  CHECK_THROWS_AS(generator_objective(models, missing, w, {}), ContractError);
}

TEST_CASE("zeroing a weight removes exactly that term's contribution") {
  torch::manual_seed(2);
  auto models = small_bundle();
  const auto in = small_inputs();
  const LossWeights w;
  const auto full = generator_objective(models, in, w, {});
  struct Knob {
    double LossWeights::*field;
    std::vector<std::string> terms;
  };
  for (const auto& k : std::vector<Knob>{{&LossWeights::cycle, {"cycle_a", "cycle_b"}},
                                         {&LossWeights::identity, {"identity_a", "identity_b"}},
                                         {&LossWeights::reg, {"reg_a", "reg_b"}},
                                         {&LossWeights::aux, {"aux_a", "aux_b"}}}) {
    auto w0 = w;
    w0.*(k.field) = 0.0;
    const auto part = generator_objective(models, in, w0, {});
    double contribution = 0;
    for (const auto& t : k.terms) contribution += full.find(t)->weighted();
    CAPTURE(k.terms[0]);
    CHECK(std::abs(full.total_value() - part.total_value() - contribution) < 1e-9);
  }

  // Paired objective with zero voxel weight reduces to the unpaired one.
  auto wv = w;
  wv.voxel = 0.0;
  auto pin = small_inputs(true);
  const auto unpaired = generator_objective(models, small_inputs(false), w, {});
  CHECK(std::abs(generator_objective(models, pin, wv, {}).total_value() - unpaired.total_value()) < 1e-12);
}

TEST_CASE("fooled discriminators and zero weights give a zero generator objective") {
  auto models = small_bundle();
  torch::NoGradGuard no_grad;
  for (auto* d : {&models.disc_a, &models.disc_b, &models.disc_seg}) {
    auto last = (*d)->layers->ptr((*d)->layers->size() - 1)->as<torch::nn::Conv2dImpl>();
    REQUIRE(last != nullptr);
    last->weight.zero_();
    last->bias.fill_(1.0);
  }
  LossWeights w{0, 0, 0, 0, 0};
  const auto br = generator_objective(models, small_inputs(), w, {});
  CHECK(br.total_value() == 0.0);
}

TEST_CASE("ablation flags") {
  auto models = small_bundle();
  const auto in = small_inputs();
  AblationFlags f;
  f.no_seg_disc = true;
  f.no_aux = true;
  f.no_reg = true;
  ForwardCache cache;
  const auto br = generator_objective(models, in, LossWeights{}, f, &cache);
  for (const char* name : {"adv_seg_ab", "adv_seg_ba", "reg_a", "reg_b", "aux_a", "aux_b"}) {
    CAPTURE(name);
    CHECK(br.find(name)->weighted() == 0.0);
  }
  const auto d = discriminator_objective(models, in, cache, f);
  CHECK((d.find("disc_seg_ab") == nullptr || d.find("disc_seg_ab")->weighted() == 0.0));
  CHECK(std::abs(d.total_value() - weighted_sum(d)) < 1e-9);

  ForwardCache full_cache;
  generator_objective(models, in, LossWeights{}, {}, &full_cache);
  const auto dfull = discriminator_objective(models, in, full_cache, {});
  CHECK(dfull.term_value("disc_seg_ab") > 0.0);
  CHECK(std::abs(dfull.total_value() - weighted_sum(dfull)) < 1e-9);
}
