#include "sasan/losscore.hpp"

#include <sstream>

#include "sasan/error.hpp"


namespace sasan::losscore {

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    std::ostringstream os;
    os << what << ": shape mismatch " << a.sizes() << " vs " << b.sizes();
    throw ContractError(os.str());
  }
}

torch::Tensor zero_like_scalar(const torch::Tensor& ref) { return torch::zeros({}, ref.options()); }

torch::Tensor lsgan_real_term(const torch::Tensor& scores) { return (scores - 1.0).pow(2).mean(); }
torch::Tensor lsgan_fake_term(const torch::Tensor& scores) { return scores.pow(2).mean(); }

}  // namespace

void LossWeights::validate() const {
  for (double w : {cycle, identity, reg, aux, voxel}) {
    if (!(w >= 0.0)) throw ConfigError("loss weights must be non-negative");
  }
}

torch::Tensor lsgan_loss(const torch::Tensor& scores_real, const torch::Tensor& scores_fake, Side side,
                         double real_weight) {
  if (side == Side::generator) return lsgan_real_term(scores_fake);
  return real_weight * lsgan_real_term(scores_real) + lsgan_fake_term(scores_fake);
}

torch::Tensor ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimConfig& cfg) {
  require_same_shape(a, b, "ssim");
  if (a.dim() != 4) throw ContractError("ssim: expected [B,C,H,W] inputs");
  if (a.size(2) < cfg.window || a.size(3) < cfg.window) {
    throw ContractError("ssim: window " + std::to_string(cfg.window) + " larger than image");
  }
  auto local_mean = [&](const torch::Tensor& t) { return torch::avg_pool2d(t, cfg.window, /*stride=*/1); };
  const auto mu_a = local_mean(a);
  const auto mu_b = local_mean(b);
  const auto var_a = local_mean(a * a) - mu_a * mu_a;
  const auto var_b = local_mean(b * b) - mu_b * mu_b;
  const auto cov = local_mean(a * b) - mu_a * mu_b;
  const double c1 = cfg.c1(), c2 = cfg.c2();
  const auto index = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
                     ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
  return index.mean();
}

torch::Tensor cycle_loss(const torch::Tensor& x, const torch::Tensor& x_rec) {
  require_same_shape(x, x_rec, "cycle_loss");
  return (x - x_rec).abs().mean() + (1.0 - ssim(x_rec, x));
}

torch::Tensor identity_loss(const torch::Tensor& y, const torch::Tensor& y_id) {
  require_same_shape(y, y_id, "identity_loss");
  return (y_id - y).abs().mean();
}

torch::Tensor voxel_loss(const torch::Tensor& fake, const torch::Tensor& real) {
  require_same_shape(fake, real, "voxel_loss");
  return (fake - real).abs().mean();
}

torch::Tensor attention_reg_loss(const torch::Tensor& maps) {
  if (maps.dim() != 4 || maps.size(1) < 2) throw ContractError("attention_reg_loss: need [B,N,H,W] with N >= 2");
  const auto flat = maps.flatten(2);
  const auto unit = flat / flat.norm(2, {2}, /*keepdim=*/true).clamp_min(1e-8);
  const auto gram = torch::bmm(unit, unit.transpose(1, 2));
  const auto eye = torch::eye(maps.size(1), maps.options());
  return (gram - eye).flatten(1).norm(2, {1}).mean();
}

torch::Tensor aux_seg_loss(const torch::Tensor& pred, const torch::Tensor& target) {
  require_same_shape(pred, target, "aux_seg_loss");
  if (pred.dim() != 4) throw ContractError("aux_seg_loss: expected [B,C,H,W] inputs");
  {
    torch::NoGradGuard no_grad;
    const bool binary = ((target == 0) | (target == 1)).all().item<bool>();
    const bool single = (target.sum(1) == 1).all().item<bool>();
    if (!binary || !single) throw ContractError("aux_seg_loss: target is not one-hot");
  }
  const double pixels = static_cast<double>(pred.size(2) * pred.size(3));
  const auto ce = -(target * torch::log(pred + 1e-8)).sum({1, 2, 3}) / pixels;
  const auto overlap = (target * pred).sum({2, 3});
  const auto mass = (target + pred).sum({2, 3}).clamp_min(1e-12);
  const auto dsc = 1.0 - 2.0 * overlap / mass;
  return (ce + dsc.sum(1)).mean();
}

torch::Tensor one_hot(const torch::Tensor& labels, int num_classes, torch::Dtype dtype) {
  if (labels.dim() != 3) throw ContractError("one_hot: expected [B,H,W] labels");
  return torch::one_hot(labels.to(torch::kInt64), num_classes).permute({0, 3, 1, 2}).to(dtype).contiguous();
}

// ------------------------------------------------------------- ModelBundle

ModelBundle ModelBundle::create(const archnet::GeneratorConfig& cfg, int num_classes) {
  ModelBundle m;
  m.num_classes = num_classes;
  m.gen_ab = archnet::Generator(cfg, num_classes);
  m.gen_ba = archnet::Generator(cfg, num_classes);
  m.disc_a = archnet::Discriminator(archnet::DiscriminatorConfig::image(cfg.in_channels));
  m.disc_b = archnet::Discriminator(archnet::DiscriminatorConfig::image(cfg.out_channels));
  m.disc_seg = archnet::Discriminator(archnet::DiscriminatorConfig::segmentation(num_classes));
  return m;
}

std::vector<torch::Tensor> ModelBundle::generator_parameters() const {
  auto params = gen_ab->parameters();
  for (auto& p : gen_ba->parameters()) params.push_back(p);
  return params;
}

std::vector<torch::Tensor> ModelBundle::discriminator_parameters() const {
  std::vector<torch::Tensor> params;
  for (const auto* d : {&disc_a, &disc_b, &disc_seg}) {
    for (auto& p : (*d)->parameters()) params.push_back(p);
  }
  return params;
}

std::vector<std::pair<std::string, std::shared_ptr<torch::nn::Module>>> ModelBundle::named_modules() const {
  return {{"gen_ab", gen_ab.ptr()},
          {"gen_ba", gen_ba.ptr()},
          {"disc_a", disc_a.ptr()},
          {"disc_b", disc_b.ptr()},
          {"disc_seg", disc_seg.ptr()}};
}

void ModelBundle::to(torch::Dtype dtype) {
  for (auto& [name, module] : named_modules()) module->to(dtype);
}

// ------------------------------------------------------------ LossBreakdown

const LossTerm* LossBreakdown::find(const std::string& name) const {
  for (const auto& t : terms) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

double LossBreakdown::term_value(const std::string& name) const {
  const auto* t = find(name);
  if (t == nullptr) throw ContractError("loss breakdown has no term '" + name + "'");
  return t->value.item<double>();
}

namespace {

struct TermCollector {
  LossBreakdown out;
  torch::Tensor ref;

  void add(std::string name, double weight, const torch::Tensor& value) {
    out.terms.push_back({std::move(name), weight, value});
  }
  void add_disabled(std::string name, double weight) { add(std::move(name), weight, zero_like_scalar(ref)); }

  LossBreakdown finish() {
    auto total = zero_like_scalar(ref);
    for (const auto& t : out.terms) {
      if (t.weight != 0.0) total = total + t.weight * t.value;
    }
    out.total = total;
    return std::move(out);
  }
};

void check_inputs(const ObjectiveInputs& in) {
  if (!in.batch_a.defined() || !in.batch_b.defined()) throw ContractError("objective: missing image batch");
  if (!in.labels_a.defined()) throw ContractError("objective: missing labels for domain A");
  if (in.labels_a.size(0) != in.batch_a.size(0)) throw ContractError("objective: labels_A/batch_A size mismatch");
  if (in.paired && in.batch_a.sizes() != in.batch_b.sizes()) throw ContractError("objective: paired batches differ");
}

}  // namespace

LossBreakdown generator_objective(ModelBundle& models, const ObjectiveInputs& in, const LossWeights& weights,
                                  const AblationFlags& flags, ForwardCache* cache) {
  check_inputs(in);
  weights.validate();
  const auto& a = in.batch_a;
  const auto& b = in.batch_b;
  const auto dtype = a.scalar_type();
  const int classes = models.num_classes;

  const bool use_reg = !flags.no_reg && weights.reg > 0.0;
  const bool use_aux = !flags.no_aux && weights.aux > 0.0;
  const bool use_seg_disc = !flags.no_seg_disc;
  const bool use_identity = weights.identity > 0.0;
  const bool use_cycle = weights.cycle > 0.0;
  const bool use_voxel = in.paired && weights.voxel > 0.0;
  const bool need_seg = use_aux || use_seg_disc;

  auto& g_ab = models.gen_ab;
  auto& g_ba = models.gen_ba;

  // A -> B -> A
  const auto maps_a = g_ab->attend(a);
  const auto fake_b = g_ab->synthesize(a, maps_a);
  const auto maps_fake_b = g_ba->attend(fake_b);
  // B -> A -> B
  const auto maps_b = g_ba->attend(b);
  const auto fake_a = g_ba->synthesize(b, maps_b);
  const auto maps_fake_a = g_ab->attend(fake_a);

  torch::Tensor seg_real_a, seg_fake_a, seg_real_b, seg_fake_b;
  if (need_seg) {
    seg_real_a = g_ab->classify(maps_a);
    seg_fake_a = g_ab->classify(maps_fake_a);
    seg_real_b = g_ba->classify(maps_b);
    seg_fake_b = g_ba->classify(maps_fake_b);
  }

  TermCollector terms{{}, a};

  // Adversarial image terms.
  terms.add("adv_img_ab", 1.0, lsgan_loss({}, models.disc_b->forward(fake_b), Side::generator));
  terms.add("adv_img_ba", 1.0, lsgan_loss({}, models.disc_a->forward(fake_a), Side::generator));
  if (use_seg_disc) {
    auto& d = models.disc_seg;
    terms.add("adv_seg_ab", 1.0,
              lsgan_loss({}, d->forward(seg_real_b), Side::generator) +
                  lsgan_loss({}, d->forward(seg_fake_b), Side::generator));
    terms.add("adv_seg_ba", 1.0,
              lsgan_loss({}, d->forward(seg_real_a), Side::generator) +
                  lsgan_loss({}, d->forward(seg_fake_a), Side::generator));
  } else {
    terms.add_disabled("adv_seg_ab", 1.0);
    terms.add_disabled("adv_seg_ba", 1.0);
  }

  if (use_cycle) {
    terms.add("cycle_a", weights.cycle, cycle_loss(a, g_ba->synthesize(fake_b, maps_fake_b)));
    terms.add("cycle_b", weights.cycle, cycle_loss(b, g_ab->synthesize(fake_a, maps_fake_a)));
  } else {
    terms.add_disabled("cycle_a", weights.cycle);
    terms.add_disabled("cycle_b", weights.cycle);
  }

  if (use_identity) {
    terms.add("identity_b", weights.identity, identity_loss(b, g_ab->forward(b)));
    terms.add("identity_a", weights.identity, identity_loss(a, g_ba->forward(a)));
  } else {
    terms.add_disabled("identity_b", weights.identity);
    terms.add_disabled("identity_a", weights.identity);
  }

  if (use_reg) {
    terms.add("reg_a", weights.reg, attention_reg_loss(maps_a) + attention_reg_loss(maps_fake_a));
    terms.add("reg_b", weights.reg, attention_reg_loss(maps_b) + attention_reg_loss(maps_fake_b));
  } else {
    terms.add_disabled("reg_a", flags.no_reg ? 0.0 : weights.reg);
    terms.add_disabled("reg_b", flags.no_reg ? 0.0 : weights.reg);
  }

  if (use_aux) {
    const auto target_a = one_hot(in.labels_a, classes, dtype);
    torch::Tensor target_b;
    if (in.labels_b) {
      target_b = one_hot(*in.labels_b, classes, dtype);
    } else {
      // Pseudo labels for real B from its own attention classifier.
      torch::NoGradGuard no_grad;
      target_b = one_hot(seg_real_b.argmax(1), classes, dtype);
    }
    // Domain A: real A against ground truth, fake A (from B) against B's labels.
    terms.add("aux_a", weights.aux, aux_seg_loss(seg_real_a, target_a) + aux_seg_loss(seg_fake_a, target_b));
    // Domain B: fake B inherits the labels of the A image it came from.
    auto aux_b = aux_seg_loss(seg_fake_b, target_a);
    if (in.labels_b) aux_b = aux_b + aux_seg_loss(seg_real_b, target_b);
    terms.add("aux_b", weights.aux, aux_b);
  } else {
    terms.add_disabled("aux_a", flags.no_aux ? 0.0 : weights.aux);
    terms.add_disabled("aux_b", flags.no_aux ? 0.0 : weights.aux);
  }

  if (in.paired) {
    if (use_voxel) {
      terms.add("voxel_ab", weights.voxel, voxel_loss(fake_b, b));
      terms.add("voxel_ba", weights.voxel, voxel_loss(fake_a, a));
    } else {
      terms.add_disabled("voxel_ab", weights.voxel);
      terms.add_disabled("voxel_ba", weights.voxel);
    }
  }

  if (cache != nullptr) {
    cache->fake_b = fake_b.detach();
    cache->fake_a = fake_a.detach();
    if (need_seg) {
      cache->seg_real_a = seg_real_a.detach();
      cache->seg_fake_a = seg_fake_a.detach();
      cache->seg_real_b = seg_real_b.detach();
      cache->seg_fake_b = seg_fake_b.detach();
    } else {
      cache->seg_real_a = cache->seg_fake_a = cache->seg_real_b = cache->seg_fake_b = torch::Tensor();
    }
  }
  return terms.finish();
}

LossBreakdown discriminator_objective(ModelBundle& models, const ObjectiveInputs& in, const ForwardCache& cache,
                                      const AblationFlags& flags) {
  check_inputs(in);
  const auto dtype = in.batch_a.scalar_type();
  TermCollector terms{{}, in.batch_a};
  terms.add("disc_img_b", 1.0,
            lsgan_loss(models.disc_b->forward(in.batch_b), models.disc_b->forward(cache.fake_b),
                       Side::discriminator));
  terms.add("disc_img_a", 1.0,
            lsgan_loss(models.disc_a->forward(in.batch_a), models.disc_a->forward(cache.fake_a),
                       Side::discriminator));
  if (!flags.no_seg_disc) {
    if (!cache.seg_real_b.defined()) throw ContractError("discriminator objective: cache lacks segmentations");
    auto& d = models.disc_seg;
    const auto real_a = one_hot(in.labels_a, models.num_classes, dtype);
    // Without B labels, A labels stand in for the B label distribution.
    const auto real_b = in.labels_b ? one_hot(*in.labels_b, models.num_classes, dtype) : real_a;
    terms.add("disc_seg_ab", 1.0,
              lsgan_loss(d->forward(real_b), d->forward(cache.seg_real_b), Side::discriminator, 2.0) +
                  lsgan_fake_term(d->forward(cache.seg_fake_b)));
    terms.add("disc_seg_ba", 1.0,
              lsgan_loss(d->forward(real_a), d->forward(cache.seg_real_a), Side::discriminator, 2.0) +
                  lsgan_fake_term(d->forward(cache.seg_fake_a)));
  } else {
    terms.add_disabled("disc_seg_ab", 1.0);
    terms.add_disabled("disc_seg_ba", 1.0);
  }
  return terms.finish();
}

LossBreakdown unpaired_objective(ModelBundle& models, const ObjectiveInputs& in, const LossWeights& weights,
                                 Side side, const AblationFlags& flags) {
  ForwardCache cache;
  auto gen = generator_objective(models, in, weights, flags, &cache);
  if (side == Side::generator) return gen;
  return discriminator_objective(models, in, cache, flags);
}

}  // namespace sasan::losscore
