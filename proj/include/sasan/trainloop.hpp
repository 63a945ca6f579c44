#pragma once

// Training procedures: cyclic unsupervised adaptation, paired supervised
// translation and the detached U-Net segmenter, with the learning-rate
// schedule and checkpointing.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sasan/archnet.hpp"
#include "sasan/config.hpp"
#include "sasan/container.hpp"
#include "sasan/losscore.hpp"
#include "sasan/metricore.hpp"
#include "sasan/synthgen.hpp"

namespace sasan::trainloop {

struct TrainConfig {
  int epochs_total = 100;
  int epochs_constant_lr = 50;
  double base_lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  int batch_size = 2;
  losscore::LossWeights weights;
  losscore::AblationFlags flags;
  int num_attention = 8;
  int image_size = 64;
  std::uint64_t seed = 0;
  int checkpoint_every = 10;  // epochs; 0 writes only the final checkpoint
  bool augment = true;
  int max_steps_per_epoch = 0;  // 0 = every full batch of the training split

  /// Throws ConfigError.
  void validate() const;
  archnet::GeneratorConfig generator_config() const;

  io::KeyValues to_key_values() const;
  /// Unknown keys raise ConfigError; absent keys keep their defaults.
  static TrainConfig from_key_values(const io::KeyValues& kv);
};

/// base_lr for epoch < epochs_constant_lr, then linear decay reaching 0 at epochs_total.
double lr_schedule(int epoch, const TrainConfig& cfg);

/// Generator and discriminator parameters with their optimizers.
struct TrainState {
  losscore::ModelBundle models;
  std::unique_ptr<torch::optim::Adam> opt_g;
  std::unique_ptr<torch::optim::Adam> opt_d;
  int epoch = 0;          // next epoch to run
  std::int64_t step = 0;  // steps completed

  static TrainState create(const TrainConfig& cfg, int num_classes);
  void set_lr(double lr);
};

struct HistoryRow {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  std::vector<std::pair<std::string, double>> generator_terms;      // weighted values
  std::vector<std::pair<std::string, double>> discriminator_terms;  // weighted values
  double generator_total = 0.0;
  double discriminator_total = 0.0;
  double seconds = 0.0;  // wall clock since training start

  double term(const std::string& name) const;
  /// Weighted generator terms of the A->B and B->A directions.
  std::pair<double, double> direction_totals() const;
};

struct ValidationRow {
  int epoch = 0;
  double mean_dice = 0.0;
  double mean_assd = 0.0;
  double orthogonality = 0.0;  // mean score of gen_ba attention on the validation images
};

struct History {
  std::vector<HistoryRow> steps;
  std::vector<ValidationRow> validation;

  std::string steps_csv() const;
  std::string validation_csv() const;
  static History from_csv(const std::string& steps_csv, const std::string& validation_csv = "");
};

/// Which direction of the term list a name belongs to: "ab" or "ba".
std::string term_direction(const std::string& name);

struct StepInputs {
  torch::Tensor batch_a, labels_a, batch_b;
  std::optional<torch::Tensor> labels_b;
  bool paired = false;
};

/// One generator update followed by one discriminator update. Throws
/// TrainingError with the breakdown when a loss is not finite.
HistoryRow train_step_unpaired(TrainState& state, const StepInputs& in, const TrainConfig& cfg);

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::optional<std::filesystem::path> resume_from;
  int stop_after_epochs = -1;  // stop early once this many epochs are done (testing resumption)
  /// Detached evaluator used for per-epoch validation on translated test images.
  archnet::UNet evaluator{nullptr};
  int validate_every = 1;
  std::function<void(const HistoryRow&)> on_step;
  bool use_labels_b = false;  // full-supervision mode
};

struct TrainResult {
  TrainState state;
  History history;
};

/// Cyclic adaptation over independent A/B streams. Labels of A are used; labels
/// of B only when `options.use_labels_b`.
TrainResult train_unsupervised(const synthgen::DatasetBundle& data, const TrainConfig& cfg,
                               const TrainOptions& options = {});

/// Same loop on aligned pairs with voxel terms in both directions.
TrainResult train_supervised(const synthgen::DatasetBundle& data, const TrainConfig& cfg,
                             const TrainOptions& options = {});

// ------------------------------------------------------------------- tensors

torch::Tensor images_to_tensor(const std::vector<ImageGrid>& images, const std::vector<int>& indices);
torch::Tensor labels_to_tensor(const std::vector<LabelGrid>& labels, const std::vector<int>& indices);
std::vector<ImageGrid> tensor_to_images(const torch::Tensor& batch);
std::vector<LabelGrid> tensor_to_labels(const torch::Tensor& labels);

/// Average-pools images and nearest-samples labels down to `image_size`.
synthgen::DatasetBundle downsample_dataset(const synthgen::DatasetBundle& data, int image_size);

/// Translates B images to domain A (or A to B) in chunks, without gradients.
torch::Tensor translate(archnet::Generator& gen, const torch::Tensor& images, int chunk = 8);

// ---------------------------------------------------------------- checkpoints

io::RawTensor to_raw(const torch::Tensor& t);
torch::Tensor from_raw(const io::RawTensor& raw);

/// Every parameter and buffer of the bundle, the Adam moments and the run metadata.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const TrainConfig& cfg);
/// Restores into a freshly created state. The stored config must match `cfg` structurally.
TrainState load_checkpoint(const std::filesystem::path& path, TrainConfig* cfg_out = nullptr);
/// Loads only the generator of one direction ("gen_ab" or "gen_ba").
archnet::Generator load_generator(const std::filesystem::path& path, const std::string& which);

void save_module(io::Container& c, const std::string& prefix, const torch::nn::Module& module);
void load_module(const io::Container& c, const std::string& prefix, torch::nn::Module& module);

// ------------------------------------------------------------------ segmenter

enum class FakeLabelSource { carried, attention };

struct SegmenterConfig {
  int epochs = 40;
  double lr = 1e-4;
  int batch_size = 4;
  int base_channels = 16;
  std::uint64_t seed = 0;
  bool augment = false;
};

struct SegmenterResult {
  archnet::UNet model{nullptr};
  std::vector<double> epoch_loss;
  std::size_t samples_per_epoch = 0;
};

/// CE + Dice training of the detached U-Net. Fake images/labels are appended
/// to the real set when given.
SegmenterResult train_segmenter(const torch::Tensor& real_images, const torch::Tensor& real_labels, int num_classes,
                                const SegmenterConfig& cfg, const torch::Tensor& fake_images = {},
                                const torch::Tensor& fake_labels = {});

/// Argmax predictions of the evaluator, chunked and without gradients.
torch::Tensor segment(archnet::UNet& model, const torch::Tensor& images, int chunk = 16);

/// Fake labels for translated images: carried-through source labels or the
/// argmax of the attention classifier of `gen` applied to `fake_images`.
torch::Tensor fake_labels(FakeLabelSource source, const torch::Tensor& source_labels, archnet::Generator& gen,
                          const torch::Tensor& fake_images);

metricore::MetricsReport evaluate_translations(archnet::UNet& evaluator, const torch::Tensor& images,
                                               const torch::Tensor& labels, int num_classes);

void save_segmenter(const std::filesystem::path& path, const archnet::UNet& model, int num_classes,
                    const SegmenterConfig& cfg);
archnet::UNet load_segmenter(const std::filesystem::path& path);

}  // namespace sasan::trainloop
