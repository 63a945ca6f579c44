#include <numeric>

#include "sasan/error.hpp"
#include "sasan/rng.hpp"
#include "sasan/trainloop.hpp"

namespace sasan::trainloop {

namespace {

torch::Tensor soft_dice_loss(const torch::Tensor& probs, const torch::Tensor& target) {
  const auto inter = (probs * target).sum({0, 2, 3});
  const auto mass = (probs + target).sum({0, 2, 3});
  return (1.0 - 2.0 * inter / mass.clamp_min(1e-8)).mean();
}

torch::Tensor augment_batch(const torch::Tensor& images, const torch::Tensor& labels, std::uint64_t seed, int epoch,
                            const std::vector<std::int64_t>& ids, torch::Tensor* labels_out) {
  auto grids = tensor_to_images(images);
  auto label_grids = tensor_to_labels(labels);
  for (std::size_t k = 0; k < grids.size(); ++k) {
    auto rng = make_rng(seed, {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(ids[k]), 0x5E6});
    std::tie(grids[k], label_grids[k]) = synthgen::augment(grids[k], label_grids[k], rng);
  }
  std::vector<int> seq(grids.size());
  std::iota(seq.begin(), seq.end(), 0);
  *labels_out = labels_to_tensor(label_grids, seq);
  return images_to_tensor(grids, seq);
}

}  // namespace

SegmenterResult train_segmenter(const torch::Tensor& real_images, const torch::Tensor& real_labels, int num_classes,
                                const SegmenterConfig& cfg, const torch::Tensor& fake_images,
                                const torch::Tensor& fake_labels) {
  if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.lr > 0.0)) throw ConfigError("invalid segmenter config");
  if (num_classes < 2) throw ConfigError("segmenter needs at least two classes");
  if (real_images.size(0) != real_labels.size(0)) throw ConfigError("segmenter: image/label counts differ");
  auto images = real_images.to(torch::kFloat32);
  auto labels = real_labels.to(torch::kInt64);
  if (fake_images.defined() != fake_labels.defined()) throw ConfigError("segmenter: fake images need fake labels");
  if (fake_images.defined()) {
    if (fake_images.size(0) != fake_labels.size(0)) throw ConfigError("segmenter: fake image/label counts differ");
    images = torch::cat({images, fake_images.detach().to(torch::kFloat32)}, 0);
    labels = torch::cat({labels, fake_labels.to(torch::kInt64)}, 0);
  }
  if (labels.numel() > 0 && (labels.max().item<std::int64_t>() >= num_classes || labels.min().item<std::int64_t>() < 0)) {
    throw ConfigError("segmenter: label ids outside [0, " + std::to_string(num_classes) + ")");
  }

  torch::manual_seed(cfg.seed);
  SegmenterResult result;
  result.model = archnet::UNet(archnet::UNetConfig{static_cast<int>(images.size(1)), num_classes, cfg.base_channels});
  auto& model = result.model;
  model->train();
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(cfg.lr));

  const auto n = images.size(0);
  result.samples_per_epoch = static_cast<std::size_t>(n);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto rng = make_rng(cfg.seed, {static_cast<std::uint64_t>(epoch), 0x5E});
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);

    double total = 0.0;
    std::size_t seen = 0;
    for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
      const auto stop = std::min<std::int64_t>(start + cfg.batch_size, n);
      const std::vector<std::int64_t> ids(order.begin() + start, order.begin() + stop);
      const auto index = torch::tensor(ids, torch::kInt64);
      auto x = images.index_select(0, index);
      auto y = labels.index_select(0, index);
      if (cfg.augment) x = augment_batch(x, y, cfg.seed, epoch, ids, &y);

      opt.zero_grad();
      const auto logits = model->logits(x);
      const auto loss = torch::nn::functional::cross_entropy(logits, y) +
                        soft_dice_loss(torch::softmax(logits, 1), losscore::one_hot(y, num_classes));
      loss.backward();
      opt.step();
      total += loss.item<double>() * static_cast<double>(ids.size());
      seen += ids.size();
    }
    result.epoch_loss.push_back(total / static_cast<double>(seen));
  }
  model->eval();
  return result;
}

torch::Tensor segment(archnet::UNet& model, const torch::Tensor& images, int chunk) {
  torch::NoGradGuard no_grad;
  model->eval();
  std::vector<torch::Tensor> parts;
  for (std::int64_t i = 0; i < images.size(0); i += chunk) {
    parts.push_back(model->logits(images.slice(0, i, std::min<std::int64_t>(i + chunk, images.size(0)))).argmax(1));
  }
  if (parts.empty()) return torch::empty({0, images.size(2), images.size(3)}, torch::kInt64);
  return torch::cat(parts, 0);
}

torch::Tensor fake_labels(FakeLabelSource source, const torch::Tensor& source_labels, archnet::Generator& gen,
                          const torch::Tensor& fake_images) {
  if (source == FakeLabelSource::carried) {
    if (!source_labels.defined() || source_labels.size(0) != fake_images.size(0)) {
      throw ConfigError("carried fake labels need one source label map per fake image");
    }
    return source_labels.to(torch::kInt64).clone();
  }
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (std::int64_t i = 0; i < fake_images.size(0); i += 8) {
    const auto chunk = fake_images.slice(0, i, std::min<std::int64_t>(i + 8, fake_images.size(0)));
    parts.push_back(gen->classify(gen->attend(chunk)).argmax(1));
  }
  return torch::cat(parts, 0);
}

metricore::MetricsReport evaluate_translations(archnet::UNet& evaluator, const torch::Tensor& images,
                                               const torch::Tensor& labels, int num_classes) {
  const auto preds = segment(evaluator, images);
  return metricore::evaluate_segmentation(tensor_to_labels(preds), tensor_to_labels(labels), num_classes);
}

}  // namespace sasan::trainloop
