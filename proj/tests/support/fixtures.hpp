#pragma once

// Small datasets and configurations shared by the suites.

#include <filesystem>
#include <string>

#include "sasan/synthgen.hpp"
#include "sasan/trainloop.hpp"

namespace sasan::testing {

inline synthgen::DatasetBundle tiny_dataset(int image_size = 32, int num_train = 8, int num_test = 4,
                                            std::uint64_t seed = 3) {
  synthgen::LayoutSpec spec;
  spec.image_size = image_size;
  spec.num_train = num_train;
  spec.num_test = num_test;
  spec.rng_seed = seed;
  return synthgen::gen_dataset(spec, synthgen::default_profile_a(spec.num_classes),
                               synthgen::default_profile_b(spec.num_classes));
}

/// Few short epochs on 32x32 images.
inline trainloop::TrainConfig tiny_config(std::uint64_t seed = 5) {
  trainloop::TrainConfig cfg;
  cfg.image_size = 32;
  cfg.epochs_total = 2;
  cfg.epochs_constant_lr = 1;
  cfg.max_steps_per_epoch = 2;
  cfg.checkpoint_every = 1;
  cfg.seed = seed;
  return cfg;
}

/// Fresh empty directory below the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sasan_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace sasan::testing
