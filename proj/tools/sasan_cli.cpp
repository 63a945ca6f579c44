// Command-line entry point: dataset generation, training, translation,
// evaluation, ablation matrices, reports and attention figures.

#include <torch/torch.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "sasan/container.hpp"
#include "sasan/error.hpp"
#include "sasan/experiment.hpp"
#include "sasan/image_export.hpp"
#include "sasan/report.hpp"
#include "sasan/trainloop.hpp"

namespace fs = std::filesystem;
using namespace sasan;

namespace {

struct MissingFile : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_exists(const fs::path& p, const char* what) {
  if (p.empty()) throw ConfigError(std::string("missing required ") + what + " path");
  if (!fs::exists(p)) throw MissingFile("no such file: " + p.string());
}

std::string default_data_dir() {
  const char* env = std::getenv("SASAN_DATA_DIR");
  return env != nullptr ? env : "";
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void check_device(const std::string& device) {
  if (device != "cpu" && device != "cpu:0" && device != "0") {
    throw ConfigError("device '" + device + "' is not available (this build runs on cpu)");
  }
}

std::string join_argv(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

/// Loads an experiment spec from an optional config file and applies CLI overrides.
runner::ExperimentSpec load_spec(const std::string& config, std::optional<std::uint64_t> seed) {
  io::KeyValues kv;
  if (!config.empty()) {
    require_exists(config, "config");
    kv = io::load_key_values(config);
  }
  auto spec = runner::ExperimentSpec::from_key_values(kv);
  if (seed) {
    spec.train.seed = *seed;
    spec.segmenter.seed = *seed;
  }
  spec.validate();
  return spec;
}

synthgen::LayoutSpec layout_from(const io::KeyValues& kv, std::uint64_t seed) {
  synthgen::LayoutSpec s;
  s.rng_seed = seed;
  for (const auto& [k, v] : kv) {
    int value = 0;
    try {
      value = std::stoi(v);
    } catch (const std::exception&) {
      throw ConfigError("config key '" + k + "': expected an integer");
    }
    if (k == "image_size") s.image_size = value;
    else if (k == "num_classes") s.num_classes = value;
    else if (k == "num_train") s.num_train = value;
    else if (k == "num_test") s.num_test = value;
    else if (k == "min_shapes_per_class") s.min_shapes_per_class = value;
    else if (k == "max_shapes_per_class") s.max_shapes_per_class = value;
    else throw ConfigError("unknown dataset key '" + k + "'");
  }
  return s;
}

/// Flattens every container tensor to a [N,1,H,W] batch, remembering the original shapes.
struct ImageSet {
  std::vector<std::string> names;
  std::vector<io::RawTensor> originals;
  std::vector<torch::Tensor> batches;
};

ImageSet read_images(const fs::path& path) {
  require_exists(path, "input");
  const auto c = io::read_container(path);
  ImageSet s;
  for (const auto& [name, raw] : c.tensors) {
    if (raw.dtype == io::DType::u8) throw ContractError("tensor '" + name + "' is not a floating-point image");
    if (raw.shape.size() < 2 || raw.shape.size() > 4) throw ContractError("tensor '" + name + "' is not an image");
    const auto t = trainloop::from_raw(raw).to(torch::kFloat32);
    const auto h = raw.shape[raw.shape.size() - 2], w = raw.shape.back();
    s.names.push_back(name);
    s.originals.push_back(raw);
    s.batches.push_back(t.reshape({-1, 1, h, w}));
  }
  return s;
}

io::RawTensor like(const io::RawTensor& original, const torch::Tensor& values) {
  auto t = values.reshape(original.shape).contiguous();
  t = original.dtype == io::DType::f64 ? t.to(torch::kFloat64) : t.to(torch::kFloat32);
  return trainloop::to_raw(t);
}

// ------------------------------------------------------------------ commands

int cmd_gen_data(const std::string& out, const std::string& config, std::uint64_t seed, const std::string& argv) {
  if (out.empty()) throw ConfigError("gen-data needs --out or SASAN_DATA_DIR");
  io::KeyValues kv;
  if (!config.empty()) {
    require_exists(config, "config");
    kv = io::load_key_values(config);
  }
  const auto spec = layout_from(kv, seed);
  const auto data = synthgen::gen_dataset(spec, synthgen::default_profile_a(spec.num_classes),
                                          synthgen::default_profile_b(spec.num_classes));
  if (runner::dataset_up_to_date(out, data)) {
    std::cout << "dataset up to date: " << out << "\n";
    return 0;
  }
  runner::DirectoryLock lock(out);
  runner::save_dataset(out, data);
  runner::write_run_json(out, argv, kv, seed, {config});
  std::cout << "wrote " << data.labels.size() << " samples to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& out, const std::string& config,
              std::optional<std::uint64_t> seed, const std::string& variant, const std::string& mode,
              const std::string& resume, const std::string& evaluator_path, bool segmenter_only,
              const std::string& argv) {
  if (out.empty()) throw ConfigError("train needs --out");
  auto spec = load_spec(config, seed);
  if (!variant.empty()) spec.variant = variant;
  if (!mode.empty()) spec.mode = runner::mode_from_string(mode);
  if (!data_dir.empty()) spec.dataset = data_dir;
  if (spec.dataset.empty()) throw ConfigError("train needs --data, a dataset key or SASAN_DATA_DIR");
  require_exists(spec.dataset / "manifest.json", "dataset");
  spec.validate();

  runner::DirectoryLock lock(out);
  const auto oriented = runner::orient(runner::load_dataset(spec.dataset), spec.mode);
  runner::write_run_json(out, argv, spec.to_key_values(), spec.train.seed, {config, spec.dataset, resume, evaluator_path});

  if (segmenter_only) {
    auto model = runner::train_evaluator(oriented, spec.segmenter);
    trainloop::save_segmenter(fs::path(out) / "evaluator.sasn", model, oriented.spec.num_classes, spec.segmenter);
    std::cout << "wrote " << (fs::path(out) / "evaluator.sasn").string() << "\n";
    return 0;
  }

  const auto plan = runner::plan_variant(spec.variant, spec.train);
  const auto data = trainloop::downsample_dataset(oriented, plan.train.image_size);
  trainloop::TrainOptions options;
  options.out_dir = out;
  if (!resume.empty()) {
    require_exists(resume, "checkpoint");
    options.resume_from = fs::path(resume);
  }
  if (!evaluator_path.empty()) {
    require_exists(evaluator_path, "evaluator");
    options.evaluator = trainloop::load_segmenter(evaluator_path);
  }
  options.on_step = [](const trainloop::HistoryRow& r) {
    if (r.step % 50 == 0) {
      std::cout << "step " << r.step << " epoch " << r.epoch << " G " << r.generator_total << " D "
                << r.discriminator_total << " (" << r.seconds << " s)\n"
                << std::flush;
    }
  };
  const auto result = spec.mode == runner::Mode::supervised ? trainloop::train_supervised(data, plan.train, options)
                                                            : trainloop::train_unsupervised(data, plan.train, options);
  std::cout << "trained " << result.history.steps.size() << " steps; checkpoint " << (fs::path(out) / "final.sasn").string()
            << "\n";
  return 0;
}

int cmd_translate(const std::string& checkpoint, const std::string& direction, const std::string& input,
                  const std::string& out) {
  require_exists(checkpoint, "checkpoint");
  if (out.empty()) throw ConfigError("translate needs --out");
  const auto images = read_images(input);
  auto gen = trainloop::load_generator(checkpoint, direction == "ab" ? "gen_ab" : "gen_ba");
  io::Container result;
  for (std::size_t i = 0; i < images.names.size(); ++i) {
    result.add(images.names[i], like(images.originals[i], trainloop::translate(gen, images.batches[i])));
  }
  io::write_container(out, result);
  std::cout << "translated " << images.names.size() << " tensors to " << out << "\n";
  return 0;
}

int cmd_eval_seg(const std::string& checkpoint, const std::string& images_path, const std::string& labels_path,
                 const std::string& out) {
  require_exists(checkpoint, "segmenter checkpoint");
  require_exists(labels_path, "labels");
  if (out.empty()) throw ConfigError("eval-seg needs --out");
  auto model = trainloop::load_segmenter(checkpoint);
  const auto images = read_images(images_path);
  const auto labels = io::read_container(labels_path);
  std::vector<torch::Tensor> xs, ys;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < images.names.size(); ++i) xs.push_back(images.batches[i]);
  for (const auto& [name, raw] : labels.tensors) {
    const auto t = trainloop::from_raw(raw).to(torch::kInt64);
    ys.push_back(t.reshape({-1, raw.shape[raw.shape.size() - 2], raw.shape.back()}));
    ids.push_back(name);
  }
  const auto x = torch::cat(xs, 0), y = torch::cat(ys, 0);
  if (x.size(0) != y.size(0)) throw ContractError("eval-seg: image and label counts differ");
  auto report = trainloop::evaluate_translations(model, x, y, model->cfg.num_classes);
  if (static_cast<std::int64_t>(ids.size()) == y.size(0)) report.sample_ids = ids;
  fs::create_directories(out);
  std::ofstream(fs::path(out) / "metrics.json") << report.to_json().dump(2) << "\n";
  std::ofstream(fs::path(out) / "metrics.csv") << report.to_csv();
  std::cout << report.to_csv();
  return 0;
}

int cmd_eval_fidelity(const std::string& input, const std::string& reference, const std::string& out) {
  if (out.empty()) throw ConfigError("eval-fidelity needs --out");
  const auto a = read_images(input);
  const auto b = read_images(reference);
  const auto x = torch::cat(a.batches, 0), y = torch::cat(b.batches, 0);
  if (x.sizes() != y.sizes()) throw ContractError("eval-fidelity: input and reference shapes differ");
  metricore::MetricsReport report;
  std::vector<double> ssim, psnr, mae, rmse, pcc;
  for (std::int64_t i = 0; i < x.size(0); ++i) {
    const auto r = metricore::image_fidelity(x[i], y[i]);
    report.fidelity.push_back(r);
    ssim.push_back(r.ssim);
    if (std::isfinite(r.psnr)) psnr.push_back(r.psnr);
    mae.push_back(r.mae);
    rmse.push_back(r.rmse);
    if (!std::isnan(r.pcc)) pcc.push_back(r.pcc);
  }
  auto summary = [](const std::vector<double>& v) {
    const auto s = metricore::summarize(v);
    return nlohmann::ordered_json{{"mean", s.mean}, {"std", s.std ? nlohmann::ordered_json(*s.std) : nullptr}, {"n", s.n}};
  };
  auto j = report.to_json();
  j["fidelity_summary"] = {{"ssim", summary(ssim)}, {"psnr", summary(psnr)}, {"mae", summary(mae)},
                           {"rmse", summary(rmse)}, {"pcc", summary(pcc)}};
  fs::create_directories(out);
  std::ofstream(fs::path(out) / "fidelity.json") << j.dump(2) << "\n";
  std::cout << j["fidelity_summary"].dump(2) << "\n";
  return 0;
}

int cmd_ablate(const std::string& data_dir, const std::string& out, const std::string& config,
               std::optional<std::uint64_t> seed, const std::string& variants, const std::string& argv) {
  if (out.empty()) throw ConfigError("ablate needs --out");
  auto spec = load_spec(config, seed);
  if (!data_dir.empty()) spec.dataset = data_dir;
  if (spec.dataset.empty()) throw ConfigError("ablate needs --data, a dataset key or SASAN_DATA_DIR");
  require_exists(spec.dataset / "manifest.json", "dataset");
  const auto ids = variants.empty() ? runner::registered_variants() : split_csv(variants);
  for (const auto& v : ids) runner::plan_variant(v, spec.train);

  runner::DirectoryLock lock(out);
  runner::write_run_json(out, argv, spec.to_key_values(), spec.train.seed, {config, spec.dataset});
  const auto outcomes = runner::ablate(runner::load_dataset(spec.dataset), spec, ids, out);
  for (const auto& o : outcomes) {
    std::cout << o.variant << ": mean Dice " << o.report.mean_dice().mean << ", mean ASSD " << o.report.mean_assd().mean
              << "\n";
  }
  return 0;
}

int cmd_report(const std::string& root, const std::string& variants, const std::string& compare,
               const std::string& report_dir) {
  require_exists(root, "experiment root");
  const auto records = runner::load_experiments(root, split_csv(variants));
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& item : split_csv(compare)) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("--compare expects first:second pairs");
    pairs.emplace_back(item.substr(0, colon), item.substr(colon + 1));
  }
  const fs::path dest = report_dir.empty() ? fs::path(root) / "report" : fs::path(report_dir);
  runner::render_report(records, dest, pairs);
  std::cout << runner::aggregate_table(records);
  return 0;
}

int cmd_attn_grid(const std::string& checkpoint, const std::string& direction, const std::string& input, int index,
                  const std::string& out) {
  require_exists(checkpoint, "checkpoint");
  if (out.empty()) throw ConfigError("attn-grid needs --out");
  const auto images = read_images(input);
  const auto all = torch::cat(images.batches, 0);
  if (index < 0 || index >= all.size(0)) throw ContractError("attn-grid: image index out of range");
  auto gen = trainloop::load_generator(checkpoint, direction == "ab" ? "gen_ab" : "gen_ba");
  torch::NoGradGuard no_grad;
  const auto image = all.slice(0, index, index + 1);
  const auto maps = gen->attend(image)[0];
  const auto grid = runner::attention_grid(image[0][0], maps, maps.size(0) == 8 ? 3 : 4);
  runner::write_pgm(out, grid, 0.0, 1.0);
  std::cout << "wrote " << out << " (" << maps.size(0) << " maps)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"Attention-guided cross-modality translation and adaptation toolkit"};
  app.require_subcommand(1);

  std::string config, out, variants, checkpoint, device = "cpu", data_dir = default_data_dir();
  std::uint64_t seed_value = 0;
  std::string variant, mode, evaluator, direction = "ba", input, reference, labels, compare, report_dir;
  int index = 0;
  bool segmenter_only = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "flat key = value config file");
    sub->add_option("--out", out, "output path");
    sub->add_option("--device", device, "compute device (cpu)");
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic two-modality dataset");
  common(gen);
  gen->add_option("--seed", seed_value, "layout seed");

  auto* train = app.add_subcommand("train", "train one experiment");
  common(train);
  auto* train_seed = train->add_option("--seed", seed_value, "run seed (overrides config)");
  train->add_option("--data", data_dir, "dataset directory (default $SASAN_DATA_DIR)");
  train->add_option("--variant", variant, "registered variant id");
  train->add_option("--mode", mode, "adapt_A_to_B, adapt_B_to_A or supervised");
  train->add_option("--checkpoint", checkpoint, "resume from this checkpoint");
  train->add_option("--evaluator", evaluator, "frozen segmenter for per-epoch validation");
  train->add_flag("--segmenter-only", segmenter_only, "train only the detached evaluator U-Net");

  auto* translate = app.add_subcommand("translate", "translate a container of images");
  common(translate);
  translate->add_option("--checkpoint", checkpoint, "training checkpoint");
  translate->add_option("--direction", direction, "ab or ba")->check(CLI::IsMember({"ab", "ba"}));
  translate->add_option("--input", input, "image container");

  auto* eval_seg = app.add_subcommand("eval-seg", "score images with a frozen segmenter");
  common(eval_seg);
  eval_seg->add_option("--checkpoint", checkpoint, "segmenter checkpoint");
  eval_seg->add_option("--input", input, "image container");
  eval_seg->add_option("--labels", labels, "label container (same order)");

  auto* eval_fid = app.add_subcommand("eval-fidelity", "SSIM, PSNR, MAE, RMSE and PCC against references");
  common(eval_fid);
  eval_fid->add_option("--input", input, "image container");
  eval_fid->add_option("--reference", reference, "reference image container");

  auto* ablate = app.add_subcommand("ablate", "run the variant matrix");
  common(ablate);
  auto* ablate_seed = ablate->add_option("--seed", seed_value, "run seed (overrides config)");
  ablate->add_option("--data", data_dir, "dataset directory (default $SASAN_DATA_DIR)");
  ablate->add_option("--variants", variants, "comma-separated variant ids (default: all)");

  auto* report = app.add_subcommand("report", "aggregate tables, plots and Welch comparisons");
  common(report);
  report->add_option("--variants", variants, "experiments to include (default: ablation.json order)");
  report->add_option("--compare", compare, "comma-separated first:second pairs");
  report->add_option("--report-dir", report_dir, "destination (default <out>/report)");

  auto* attn = app.add_subcommand("attn-grid", "export an input image beside its attention maps");
  common(attn);
  attn->add_option("--checkpoint", checkpoint, "training checkpoint");
  attn->add_option("--direction", direction, "ab or ba")->check(CLI::IsMember({"ab", "ba"}));
  attn->add_option("--input", input, "image container");
  attn->add_option("--index", index, "image index within the container");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const auto cmdline = join_argv(argc, argv);
  try {
    check_device(device);
    auto opt_seed = [&](CLI::Option* o) {
      return o->count() > 0 ? std::optional<std::uint64_t>(seed_value) : std::nullopt;
    };
    if (gen->parsed()) return cmd_gen_data(out.empty() ? data_dir : out, config, seed_value, cmdline);
    if (train->parsed()) {
      return cmd_train(data_dir, out, config, opt_seed(train_seed), variant, mode, checkpoint, evaluator,
                       segmenter_only, cmdline);
    }
    if (translate->parsed()) return cmd_translate(checkpoint, direction, input, out);
    if (eval_seg->parsed()) return cmd_eval_seg(checkpoint, input, labels, out);
    if (eval_fid->parsed()) return cmd_eval_fidelity(input, reference, out);
    if (ablate->parsed()) return cmd_ablate(data_dir, out, config, opt_seed(ablate_seed), variants, cmdline);
    if (report->parsed()) return cmd_report(out, variants, compare, report_dir);
    if (attn->parsed()) return cmd_attn_grid(checkpoint, direction, input, index, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
