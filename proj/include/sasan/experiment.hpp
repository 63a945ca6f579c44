#pragma once

// Experiment orchestration: dataset storage, the ablation variant registry,
// evaluator training, single-variant runs and run provenance.

#include <filesystem>
#include <string>
#include <vector>

#include "sasan/config.hpp"
#include "sasan/metricore.hpp"
#include "sasan/synthgen.hpp"
#include "sasan/trainloop.hpp"

namespace sasan::runner {

extern const char* const kCodeVersion;

enum class Mode { adapt_a_to_b, adapt_b_to_a, supervised };

std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

// ------------------------------------------------------------------ dataset

void save_dataset(const std::filesystem::path& dir, const synthgen::DatasetBundle& data);
synthgen::DatasetBundle load_dataset(const std::filesystem::path& dir);
nlohmann::ordered_json dataset_manifest(const synthgen::DatasetBundle& data);
/// True when `dir` already holds a manifest identical to the one `data` would write.
bool dataset_up_to_date(const std::filesystem::path& dir, const synthgen::DatasetBundle& data);

/// Swaps the modalities for B -> A adaptation so that "A" is always the labelled source.
synthgen::DatasetBundle orient(const synthgen::DatasetBundle& data, Mode mode);

// ----------------------------------------------------------------- variants

const std::vector<std::string>& registered_variants();

enum class EvalProtocol {
  translations,  // frozen evaluator on target images translated to the source domain
  source_images  // segmenter scored on real source-domain test images
};

struct VariantPlan {
  std::string id;
  trainloop::TrainConfig train;
  bool adapt = true;               // run adaptation training
  bool fake_augmented = false;     // segmenter trained on real + fake source images
  EvalProtocol protocol = EvalProtocol::translations;
};

/// Throws ConfigError for ids outside the registry.
VariantPlan plan_variant(const std::string& id, const trainloop::TrainConfig& base);

struct ExperimentSpec {
  std::string name = "experiment";
  Mode mode = Mode::adapt_a_to_b;
  trainloop::TrainConfig train;
  trainloop::SegmenterConfig segmenter;
  std::filesystem::path dataset;
  std::string variant = "final";

  void validate() const;
  io::KeyValues to_key_values() const;
  /// Experiment keys (name, mode, variant, dataset, segmenter_*) plus TrainConfig keys.
  static ExperimentSpec from_key_values(const io::KeyValues& kv);
};

struct VariantOutcome {
  std::string variant;
  metricore::MetricsReport report;
  trainloop::History history;
  double orthogonality = 0.0;  // attention diagnostic on test images; NaN without adaptation
  std::filesystem::path dir;
};

/// U-Net trained on the labelled source images of the training split.
archnet::UNet train_evaluator(const synthgen::DatasetBundle& oriented, const trainloop::SegmenterConfig& cfg);

/// Evaluator applied directly to target-domain test images.
metricore::MetricsReport no_adaptation_report(const synthgen::DatasetBundle& oriented, archnet::UNet& evaluator);

/// Mean orthogonality score of both attention modules on the test images.
double attention_orthogonality(trainloop::TrainState& state, const synthgen::DatasetBundle& oriented);

/// Runs one variant end to end in `dir`: training, translation and scoring.
VariantOutcome run_variant(const synthgen::DatasetBundle& oriented, const ExperimentSpec& spec,
                           archnet::UNet& evaluator, const std::filesystem::path& dir);

/// Runs the variants sequentially, each in its own subdirectory of `out`, and
/// writes the shared evaluator and the no-adaptation baseline at the top level.
std::vector<VariantOutcome> ablate(const synthgen::DatasetBundle& data, const ExperimentSpec& base,
                                   const std::vector<std::string>& variants, const std::filesystem::path& out);

// --------------------------------------------------------------- provenance

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Digest of every regular file below `path` (sorted by relative path).
std::string sha256_tree(const std::filesystem::path& path);

void write_run_json(const std::filesystem::path& dir, const std::string& command, const io::KeyValues& config,
                    std::uint64_t seed, const std::vector<std::filesystem::path>& inputs);

/// Exclusive ownership of an output directory for one invocation.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path lock_path_;
};

}  // namespace sasan::runner
