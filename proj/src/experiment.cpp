#include "sasan/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <sstream>

#include "sasan/container.hpp"
#include "sasan/error.hpp"

#ifndef SASAN_VERSION
#define SASAN_VERSION "unversioned"
#endif

namespace sasan::runner {

const char* const kCodeVersion = SASAN_VERSION;

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::ordered_json profile_json(const synthgen::ModalityProfile& p) {
  return {{"base_intensity", p.base_intensity},
          {"contrast", synthgen::to_string(p.contrast)},
          {"noise_sigma", p.noise_sigma},
          {"bias_field_strength", p.bias_field_strength}};
}

synthgen::ModalityProfile profile_from_json(const nlohmann::json& j) {
  synthgen::ModalityProfile p;
  p.base_intensity = j.at("base_intensity").get<std::vector<double>>();
  p.contrast = synthgen::contrast_from_string(j.at("contrast").get<std::string>());
  p.noise_sigma = j.at("noise_sigma").get<double>();
  p.bias_field_strength = j.at("bias_field_strength").get<double>();
  return p;
}

std::string sample_id(int i) { return std::to_string(i); }

void write_split(const fs::path& dir, const synthgen::DatasetBundle& data, const std::vector<int>& ids) {
  fs::create_directories(dir);
  io::Container c;
  for (int i : ids) {
    const auto k = static_cast<std::size_t>(i);
    const std::vector<std::int64_t> shape{data.images_a[k].height, data.images_a[k].width};
    c.add("img_a_" + sample_id(i), io::RawTensor::from_f32(shape, data.images_a[k].values));
    c.add("img_b_" + sample_id(i), io::RawTensor::from_f32(shape, data.images_b[k].values));
    c.add("lbl_" + sample_id(i), io::RawTensor::from_u8(shape, data.labels[k].values));
  }
  io::write_container(dir / "samples.sasn", c);
}

ImageGrid grid_from_raw(const io::RawTensor& t) {
  if (t.shape.size() != 2) throw FormatError("dataset image must be 2D");
  ImageGrid g(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]));
  g.values = t.as_f32();
  return g;
}

LabelGrid labels_from_raw(const io::RawTensor& t) {
  if (t.shape.size() != 2 || t.dtype != io::DType::u8) throw FormatError("dataset label map must be 2D u8");
  LabelGrid g(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]));
  g.values = t.bytes;
  return g;
}

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

void write_report(const fs::path& dir, const std::string& stem, const metricore::MetricsReport& r) {
  write_text(dir / (stem + ".json"), r.to_json().dump(2) + "\n");
  write_text(dir / (stem + ".csv"), r.to_csv());
}

torch::Tensor gather_maps(archnet::Generator& gen, const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (std::int64_t i = 0; i < images.size(0); i += 8) {
    parts.push_back(gen->attend(images.slice(0, i, std::min<std::int64_t>(i + 8, images.size(0)))));
  }
  return torch::cat(parts, 0);
}

}  // namespace

std::string to_string(Mode m) {
  switch (m) {
    case Mode::adapt_a_to_b: return "adapt_A_to_B";
    case Mode::adapt_b_to_a: return "adapt_B_to_A";
    case Mode::supervised: return "supervised";
  }
  return "?";
}

Mode mode_from_string(const std::string& s) {
  if (s == "adapt_A_to_B") return Mode::adapt_a_to_b;
  if (s == "adapt_B_to_A") return Mode::adapt_b_to_a;
  if (s == "supervised") return Mode::supervised;
  throw ConfigError("unknown mode '" + s + "' (expected adapt_A_to_B, adapt_B_to_A or supervised)");
}

// ------------------------------------------------------------------ dataset

nlohmann::ordered_json dataset_manifest(const synthgen::DatasetBundle& data) {
  nlohmann::ordered_json m;
  m["format"] = "sasan-dataset";
  m["seed"] = data.spec.rng_seed;
  m["spec"] = {{"image_size", data.spec.image_size},
               {"num_classes", data.spec.num_classes},
               {"min_shapes_per_class", data.spec.min_shapes_per_class},
               {"max_shapes_per_class", data.spec.max_shapes_per_class},
               {"rng_seed", data.spec.rng_seed},
               {"num_train", data.spec.num_train},
               {"num_test", data.spec.num_test}};
  m["profile_a"] = profile_json(data.profile_a);
  m["profile_b"] = profile_json(data.profile_b);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < data.labels.size(); ++i) ids.push_back(sample_id(static_cast<int>(i)));
  m["sample_ids"] = ids;
  m["splits"] = {{"train", data.train}, {"test", data.test}};
  return m;
}

void save_dataset(const fs::path& dir, const synthgen::DatasetBundle& data) {
  fs::create_directories(dir);
  write_split(dir / "train", data, data.train);
  write_split(dir / "test", data, data.test);
  write_text(dir / "manifest.json", dataset_manifest(data).dump(2) + "\n");
}

bool dataset_up_to_date(const fs::path& dir, const synthgen::DatasetBundle& data) {
  if (!fs::exists(dir / "manifest.json") || !fs::exists(dir / "train" / "samples.sasn") ||
      !fs::exists(dir / "test" / "samples.sasn")) {
    return false;
  }
  try {
    return nlohmann::ordered_json::parse(read_text(dir / "manifest.json")) == dataset_manifest(data);
  } catch (const nlohmann::json::exception&) {
    return false;
  }
}

synthgen::DatasetBundle load_dataset(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw std::runtime_error("missing dataset manifest " + manifest_path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_text(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  synthgen::DatasetBundle d;
  const auto& s = m.at("spec");
  d.spec.image_size = s.at("image_size").get<int>();
  d.spec.num_classes = s.at("num_classes").get<int>();
  d.spec.min_shapes_per_class = s.at("min_shapes_per_class").get<int>();
  d.spec.max_shapes_per_class = s.at("max_shapes_per_class").get<int>();
  d.spec.rng_seed = s.at("rng_seed").get<std::uint64_t>();
  d.spec.num_train = s.at("num_train").get<int>();
  d.spec.num_test = s.at("num_test").get<int>();
  d.profile_a = profile_from_json(m.at("profile_a"));
  d.profile_b = profile_from_json(m.at("profile_b"));
  d.train = m.at("splits").at("train").get<std::vector<int>>();
  d.test = m.at("splits").at("test").get<std::vector<int>>();
  const auto n = m.at("sample_ids").size();
  d.images_a.resize(n);
  d.images_b.resize(n);
  d.labels.resize(n);
  for (const auto& [split, ids] : {std::pair{"train", &d.train}, std::pair{"test", &d.test}}) {
    const auto c = io::read_container(dir / split / "samples.sasn");
    for (int i : *ids) {
      const auto k = static_cast<std::size_t>(i);
      if (k >= n) throw FormatError("split '" + std::string(split) + "' references unknown sample " + sample_id(i));
      d.images_a[k] = grid_from_raw(c.get("img_a_" + sample_id(i)));
      d.images_b[k] = grid_from_raw(c.get("img_b_" + sample_id(i)));
      d.labels[k] = labels_from_raw(c.get("lbl_" + sample_id(i)));
    }
  }
  return d;
}

synthgen::DatasetBundle orient(const synthgen::DatasetBundle& data, Mode mode) {
  if (mode != Mode::adapt_b_to_a) return data;
  auto out = data;
  std::swap(out.images_a, out.images_b);
  std::swap(out.profile_a, out.profile_b);
  return out;
}

// ----------------------------------------------------------------- variants

const std::vector<std::string>& registered_variants() {
  static const std::vector<std::string> ids{"final", "no_seg_disc", "no_aux", "no_reg",   "attn16",
                                            "lowres", "reg5",        "aux6",   "with_aug", "no_aug"};
  return ids;
}

VariantPlan plan_variant(const std::string& id, const trainloop::TrainConfig& base) {
  VariantPlan p;
  p.id = id;
  p.train = base;
  if (id == "final") {
  } else if (id == "no_seg_disc") {
    p.train.flags.no_seg_disc = true;
  } else if (id == "no_aux") {
    p.train.flags.no_aux = true;
  } else if (id == "no_reg") {
    p.train.flags.no_reg = true;
  } else if (id == "attn16") {
    p.train.num_attention = 16;
  } else if (id == "lowres") {
    p.train.image_size = base.image_size / 2;
  } else if (id == "reg5") {
    p.train.weights.reg = 5.0;
  } else if (id == "aux6") {
    p.train.weights.aux = 6.0;
  } else if (id == "with_aug") {
    p.fake_augmented = true;
    p.protocol = EvalProtocol::source_images;
  } else if (id == "no_aug") {
    p.adapt = false;
    p.protocol = EvalProtocol::source_images;
  } else {
    throw ConfigError("unknown variant '" + id + "'");
  }
  p.train.validate();
  return p;
}

void ExperimentSpec::validate() const {
  train.validate();
  plan_variant(variant, train);
  if (segmenter.epochs < 1 || segmenter.batch_size < 1 || !(segmenter.lr > 0.0) || segmenter.base_channels < 1) {
    throw ConfigError("invalid segmenter settings");
  }
}

io::KeyValues ExperimentSpec::to_key_values() const {
  auto kv = train.to_key_values();
  kv["name"] = name;
  kv["mode"] = to_string(mode);
  kv["variant"] = variant;
  if (!dataset.empty()) kv["dataset"] = dataset.string();
  kv["segmenter_epochs"] = std::to_string(segmenter.epochs);
  std::ostringstream lr;
  lr << std::setprecision(17) << segmenter.lr;
  kv["segmenter_lr"] = lr.str();
  kv["segmenter_batch_size"] = std::to_string(segmenter.batch_size);
  kv["segmenter_base_channels"] = std::to_string(segmenter.base_channels);
  kv["segmenter_augment"] = segmenter.augment ? "true" : "false";
  return kv;
}

ExperimentSpec ExperimentSpec::from_key_values(const io::KeyValues& kv) {
  ExperimentSpec s;
  io::KeyValues train_kv;
  auto to_int = [](const std::string& k, const std::string& v) {
    try {
      std::size_t pos = 0;
      const int out = std::stoi(v, &pos);
      if (pos == v.size()) return out;
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + k + "': expected an integer, got '" + v + "'");
  };
  for (const auto& [k, v] : kv) {
    if (k == "name") s.name = v;
    else if (k == "mode") s.mode = mode_from_string(v);
    else if (k == "variant") s.variant = v;
    else if (k == "dataset") s.dataset = v;
    else if (k == "segmenter_epochs") s.segmenter.epochs = to_int(k, v);
    else if (k == "segmenter_batch_size") s.segmenter.batch_size = to_int(k, v);
    else if (k == "segmenter_base_channels") s.segmenter.base_channels = to_int(k, v);
    else if (k == "segmenter_augment") {
      if (v != "true" && v != "false") throw ConfigError("config key 'segmenter_augment': expected true/false");
      s.segmenter.augment = v == "true";
    } else if (k == "segmenter_lr") {
      try {
        s.segmenter.lr = std::stod(v);
      } catch (const std::exception&) {
        throw ConfigError("config key 'segmenter_lr': expected a number");
      }
    } else {
      train_kv[k] = v;
    }
  }
  s.train = trainloop::TrainConfig::from_key_values(train_kv);
  s.segmenter.seed = s.train.seed;
  return s;
}

// ------------------------------------------------------------------- running

archnet::UNet train_evaluator(const synthgen::DatasetBundle& oriented, const trainloop::SegmenterConfig& cfg) {
  const auto images = trainloop::images_to_tensor(oriented.images_a, oriented.train);
  const auto labels = trainloop::labels_to_tensor(oriented.labels, oriented.train);
  return trainloop::train_segmenter(images, labels, oriented.spec.num_classes, cfg).model;
}

metricore::MetricsReport no_adaptation_report(const synthgen::DatasetBundle& oriented, archnet::UNet& evaluator) {
  return trainloop::evaluate_translations(evaluator, trainloop::images_to_tensor(oriented.images_b, oriented.test),
                                          trainloop::labels_to_tensor(oriented.labels, oriented.test),
                                          oriented.spec.num_classes);
}

double attention_orthogonality(trainloop::TrainState& state, const synthgen::DatasetBundle& oriented) {
  const auto maps_a = gather_maps(state.models.gen_ab, trainloop::images_to_tensor(oriented.images_a, oriented.test));
  const auto maps_b = gather_maps(state.models.gen_ba, trainloop::images_to_tensor(oriented.images_b, oriented.test));
  return 0.5 * (metricore::orthogonality_score(maps_a) + metricore::orthogonality_score(maps_b));
}

VariantOutcome run_variant(const synthgen::DatasetBundle& oriented, const ExperimentSpec& spec,
                           archnet::UNet& evaluator, const fs::path& dir) {
  spec.validate();
  const auto plan = plan_variant(spec.variant, spec.train);
  fs::create_directories(dir);
  auto resolved = spec;
  resolved.train = plan.train;
  write_text(dir / "config.txt", io::format_key_values(resolved.to_key_values()));

  VariantOutcome out;
  out.variant = spec.variant;
  out.dir = dir;
  out.orthogonality = nan();

  const int full = oriented.spec.image_size;
  const auto train_data = trainloop::downsample_dataset(oriented, plan.train.image_size);
  const int factor = full / plan.train.image_size;
  archnet::Generator gen_ba{nullptr}, gen_ab{nullptr};

  if (plan.adapt) {
    trainloop::TrainOptions options;
    options.out_dir = dir;
    if (plan.protocol == EvalProtocol::translations && factor == 1) {
      options.evaluator = evaluator;
      options.validate_every = std::max(1, plan.train.epochs_total / 10);
    }
    auto result = spec.mode == Mode::supervised ? trainloop::train_supervised(train_data, plan.train, options)
                                                : trainloop::train_unsupervised(train_data, plan.train, options);
    out.history = std::move(result.history);
    out.orthogonality = attention_orthogonality(result.state, train_data);
    gen_ba = result.state.models.gen_ba;
    gen_ab = result.state.models.gen_ab;
  }

  const auto labels = trainloop::labels_to_tensor(oriented.labels, oriented.test);
  if (plan.protocol == EvalProtocol::translations) {
    auto input = trainloop::images_to_tensor(oriented.images_b, oriented.test);
    if (factor > 1) input = torch::avg_pool2d(input, factor);
    auto fake_a = trainloop::translate(gen_ba, input);
    if (factor > 1) {
      namespace F = torch::nn::functional;
      fake_a = F::interpolate(fake_a, F::InterpolateFuncOptions()
                                          .size(std::vector<std::int64_t>{full, full})
                                          .mode(torch::kBilinear)
                                          .align_corners(false))
                   .clamp(-1.0, 1.0);
    }
    out.report = trainloop::evaluate_translations(evaluator, fake_a, labels, oriented.spec.num_classes);
  } else {
    archnet::UNet segmenter = evaluator;
    if (plan.fake_augmented) {
      const auto real = trainloop::images_to_tensor(oriented.images_a, oriented.train);
      const auto real_labels = trainloop::labels_to_tensor(oriented.labels, oriented.train);
      const auto fake = trainloop::translate(gen_ba, trainloop::images_to_tensor(oriented.images_b, oriented.train));
      const auto fake_lbl = trainloop::fake_labels(trainloop::FakeLabelSource::attention, {}, gen_ab, fake);
      auto seg_cfg = spec.segmenter;
      segmenter = trainloop::train_segmenter(real, real_labels, oriented.spec.num_classes, seg_cfg, fake, fake_lbl).model;
      trainloop::save_segmenter(dir / "segmenter.sasn", segmenter, oriented.spec.num_classes, seg_cfg);
    }
    out.report = trainloop::evaluate_translations(
        segmenter, trainloop::images_to_tensor(oriented.images_a, oriented.test), labels, oriented.spec.num_classes);
  }
  out.report.sample_ids.clear();
  for (int i : oriented.test) out.report.sample_ids.push_back(std::to_string(i));

  write_report(dir, "metrics", out.report);
  nlohmann::ordered_json summary;
  summary["variant"] = out.variant;
  summary["protocol"] = plan.protocol == EvalProtocol::translations ? "translated_target" : "source_images";
  summary["mean_dice"] = out.report.mean_dice().mean;
  summary["mean_assd"] = out.report.mean_assd().mean;
  summary["orthogonality"] = std::isnan(out.orthogonality) ? nlohmann::ordered_json(nullptr)
                                                           : nlohmann::ordered_json(out.orthogonality);
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  return out;
}

std::vector<VariantOutcome> ablate(const synthgen::DatasetBundle& data, const ExperimentSpec& base,
                                   const std::vector<std::string>& variants, const fs::path& out) {
  if (variants.empty()) throw ConfigError("no variants requested");
  for (const auto& v : variants) plan_variant(v, base.train);
  const auto oriented = orient(data, base.mode);
  fs::create_directories(out);

  archnet::UNet evaluator{nullptr};
  const auto evaluator_path = out / "evaluator.sasn";
  if (fs::exists(evaluator_path)) {
    evaluator = trainloop::load_segmenter(evaluator_path);
  } else {
    evaluator = train_evaluator(oriented, base.segmenter);
    trainloop::save_segmenter(evaluator_path, evaluator, oriented.spec.num_classes, base.segmenter);
  }
  write_report(out, "no_adaptation", no_adaptation_report(oriented, evaluator));

  std::vector<VariantOutcome> outcomes;
  nlohmann::ordered_json index = nlohmann::ordered_json::array();
  for (const auto& v : variants) {
    auto spec = base;
    spec.variant = v;
    outcomes.push_back(run_variant(oriented, spec, evaluator, out / v));
    index.push_back(v);
    write_text(out / "ablation.json", nlohmann::ordered_json{{"variants", index}}.dump(2) + "\n");
  }
  return outcomes;
}

// --------------------------------------------------------------- provenance

std::string sha256_hex(const std::string& bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

std::string sha256_tree(const fs::path& path) {
  if (fs::is_regular_file(path)) return sha256_file(path);
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(path)) {
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), path));
  }
  std::sort(files.begin(), files.end());
  std::string listing;
  for (const auto& f : files) listing += f.generic_string() + " " + sha256_file(path / f) + "\n";
  return sha256_hex(listing);
}

void write_run_json(const fs::path& dir, const std::string& command, const io::KeyValues& config, std::uint64_t seed,
                    const std::vector<fs::path>& inputs) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["code_version"] = kCodeVersion;
  j["seed"] = seed;
  j["config"] = config;
  nlohmann::ordered_json in = nlohmann::ordered_json::array();
  for (const auto& p : inputs) {
    if (p.empty()) continue;
    in.push_back({{"path", p.string()}, {"sha256", fs::exists(p) ? sha256_tree(p) : ""}});
  }
  j["inputs"] = in;
  fs::create_directories(dir);
  write_text(dir / "run.json", j.dump(2) + "\n");
}

DirectoryLock::DirectoryLock(const fs::path& dir) : lock_path_(dir / ".lock") {
  fs::create_directories(dir);
  std::FILE* f = std::fopen(lock_path_.c_str(), "wx");
  if (f == nullptr) throw std::runtime_error("output directory is locked by another run: " + lock_path_.string());
  std::fclose(f);
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(lock_path_, ec);
}

}  // namespace sasan::runner
