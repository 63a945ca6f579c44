#include "sasan/trainloop.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "sasan/error.hpp"
#include "sasan/rng.hpp"

namespace sasan::trainloop {

namespace {

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const int out = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const auto out = std::stoull(v, &pos);
    if (pos != v.size() || v.starts_with('-')) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an unsigned integer, got '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<int> permutation(std::vector<int> items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(items[i - 1], items[j]);
  }
  return items;
}

void set_requires_grad(const std::vector<torch::Tensor>& params, bool value) {
  for (auto p : params) p.set_requires_grad(value);
}

std::vector<std::pair<std::string, double>> weighted_terms(const losscore::LossBreakdown& b) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& t : b.terms) out.emplace_back(t.name, t.weighted());
  return out;
}

void check_finite(const losscore::LossBreakdown& b, const char* side, std::int64_t step) {
  bool ok = std::isfinite(b.total_value());
  for (const auto& t : b.terms) ok = ok && std::isfinite(t.value.item<double>());
  if (ok) return;
  std::ostringstream os;
  os << "non-finite " << side << " loss at step " << step << ":";
  for (const auto& t : b.terms) os << ' ' << t.name << '=' << t.value.item<double>() << "(x" << t.weight << ')';
  os << " total=" << b.total_value();
  throw TrainingError(os.str());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) return "";
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

// -------------------------------------------------------------- TrainConfig

void TrainConfig::validate() const {
  if (epochs_total < 1) throw ConfigError("epochs_total must be >= 1");
  if (epochs_constant_lr < 0 || epochs_constant_lr > epochs_total) {
    throw ConfigError("epochs_constant_lr must lie in [0, epochs_total]");
  }
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0,1)");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (num_attention < 2) throw ConfigError("num_attention must be >= 2");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (max_steps_per_epoch < 0) throw ConfigError("max_steps_per_epoch must be >= 0");
  try {
    weights.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  generator_config().validate();
}

archnet::GeneratorConfig TrainConfig::generator_config() const {
  archnet::GeneratorConfig g;
  g.image_size = image_size;
  g.num_attention = num_attention;
  return g;
}

io::KeyValues TrainConfig::to_key_values() const {
  return {{"epochs_total", std::to_string(epochs_total)},
          {"epochs_constant_lr", std::to_string(epochs_constant_lr)},
          {"base_lr", format_double(base_lr)},
          {"beta1", format_double(beta1)},
          {"beta2", format_double(beta2)},
          {"batch_size", std::to_string(batch_size)},
          {"lambda_cycle", format_double(weights.cycle)},
          {"lambda_identity", format_double(weights.identity)},
          {"lambda_reg", format_double(weights.reg)},
          {"lambda_aux", format_double(weights.aux)},
          {"lambda_voxel", format_double(weights.voxel)},
          {"no_seg_disc", flags.no_seg_disc ? "true" : "false"},
          {"no_aux", flags.no_aux ? "true" : "false"},
          {"no_reg", flags.no_reg ? "true" : "false"},
          {"num_attention", std::to_string(num_attention)},
          {"image_size", std::to_string(image_size)},
          {"seed", std::to_string(seed)},
          {"checkpoint_every", std::to_string(checkpoint_every)},
          {"augment", augment ? "true" : "false"},
          {"max_steps_per_epoch", std::to_string(max_steps_per_epoch)}};
}

TrainConfig TrainConfig::from_key_values(const io::KeyValues& kv) {
  TrainConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "epochs_total") c.epochs_total = parse_int(k, v);
    else if (k == "epochs_constant_lr") c.epochs_constant_lr = parse_int(k, v);
    else if (k == "base_lr") c.base_lr = parse_double(k, v);
    else if (k == "beta1") c.beta1 = parse_double(k, v);
    else if (k == "beta2") c.beta2 = parse_double(k, v);
    else if (k == "batch_size") c.batch_size = parse_int(k, v);
    else if (k == "lambda_cycle") c.weights.cycle = parse_double(k, v);
    else if (k == "lambda_identity") c.weights.identity = parse_double(k, v);
    else if (k == "lambda_reg") c.weights.reg = parse_double(k, v);
    else if (k == "lambda_aux") c.weights.aux = parse_double(k, v);
    else if (k == "lambda_voxel") c.weights.voxel = parse_double(k, v);
    else if (k == "no_seg_disc") c.flags.no_seg_disc = parse_bool(k, v);
    else if (k == "no_aux") c.flags.no_aux = parse_bool(k, v);
    else if (k == "no_reg") c.flags.no_reg = parse_bool(k, v);
    else if (k == "num_attention") c.num_attention = parse_int(k, v);
    else if (k == "image_size") c.image_size = parse_int(k, v);
    else if (k == "seed") c.seed = parse_u64(k, v);
    else if (k == "checkpoint_every") c.checkpoint_every = parse_int(k, v);
    else if (k == "augment") c.augment = parse_bool(k, v);
    else if (k == "max_steps_per_epoch") c.max_steps_per_epoch = parse_int(k, v);
    else throw ConfigError("unknown config key '" + k + "'");
  }
  return c;
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch > cfg.epochs_total) {
    throw ContractError("lr_schedule: epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(cfg.epochs_total) + "]");
  }
  if (epoch < cfg.epochs_constant_lr) return cfg.base_lr;
  if (cfg.epochs_total == cfg.epochs_constant_lr) return 0.0;
  return cfg.base_lr * static_cast<double>(cfg.epochs_total - epoch) /
         static_cast<double>(cfg.epochs_total - cfg.epochs_constant_lr);
}

// --------------------------------------------------------------- TrainState

TrainState TrainState::create(const TrainConfig& cfg, int num_classes) {
  cfg.validate();
  torch::manual_seed(cfg.seed);
  TrainState s;
  s.models = losscore::ModelBundle::create(cfg.generator_config(), num_classes);
  const auto options = torch::optim::AdamOptions(cfg.base_lr).betas({cfg.beta1, cfg.beta2});
  s.opt_g = std::make_unique<torch::optim::Adam>(s.models.generator_parameters(), options);
  s.opt_d = std::make_unique<torch::optim::Adam>(s.models.discriminator_parameters(), options);
  return s;
}

void TrainState::set_lr(double lr) {
  for (auto* opt : {opt_g.get(), opt_d.get()}) {
    for (auto& group : opt->param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
  }
}

// ------------------------------------------------------------------ History

double HistoryRow::term(const std::string& name) const {
  for (const auto* list : {&generator_terms, &discriminator_terms}) {
    for (const auto& [n, v] : *list) {
      if (n == name) return v;
    }
  }
  throw ContractError("history row has no term '" + name + "'");
}

std::string term_direction(const std::string& name) {
  static const std::vector<std::string> ab{"adv_img_ab", "adv_seg_ab", "cycle_a",    "identity_b",
                                           "reg_a",      "aux_a",      "voxel_ab",   "disc_img_b",
                                           "disc_seg_ab"};
  return std::find(ab.begin(), ab.end(), name) != ab.end() ? "ab" : "ba";
}

std::pair<double, double> HistoryRow::direction_totals() const {
  double ab = 0.0, ba = 0.0;
  for (const auto& [n, v] : generator_terms) (term_direction(n) == "ab" ? ab : ba) += v;
  return {ab, ba};
}

std::string History::steps_csv() const {
  std::ostringstream os;
  os << std::setprecision(17);
  if (steps.empty()) return "";
  const auto& first = steps.front();
  os << "step,epoch,lr";
  for (const auto& [n, v] : first.generator_terms) os << ',' << n;
  os << ",generator_total";
  for (const auto& [n, v] : first.discriminator_terms) os << ',' << n;
  os << ",discriminator_total,direction_ab,direction_ba,seconds\n";
  for (const auto& r : steps) {
    os << r.step << ',' << r.epoch << ',' << r.lr;
    for (const auto& [n, v] : r.generator_terms) os << ',' << v;
    os << ',' << r.generator_total;
    for (const auto& [n, v] : r.discriminator_terms) os << ',' << v;
    const auto [ab, ba] = r.direction_totals();
    os << ',' << r.discriminator_total << ',' << ab << ',' << ba << ',' << r.seconds << '\n';
  }
  return os.str();
}

std::string History::validation_csv() const {
  std::ostringstream os;
  os << std::setprecision(17) << "epoch,mean_dice,mean_assd,orthogonality\n";
  for (const auto& v : validation) os << v.epoch << ',' << v.mean_dice << ',' << v.mean_assd << ',' << v.orthogonality << '\n';
  return os.str();
}

History History::from_csv(const std::string& steps_csv, const std::string& validation_csv) {
  History h;
  std::istringstream in(steps_csv);
  std::string line;
  std::vector<std::string> header;
  if (std::getline(in, line)) header = split(line, ',');
  const auto col = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw FormatError("history CSV lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  if (!header.empty()) {
    const auto g_end = col("generator_total");
    const auto d_end = col("discriminator_total");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto cells = split(line, ',');
      if (cells.size() != header.size()) throw FormatError("history CSV row has " + std::to_string(cells.size()) + " cells");
      HistoryRow r;
      r.step = std::stoll(cells[0]);
      r.epoch = std::stoi(cells[1]);
      r.lr = std::stod(cells[2]);
      for (std::size_t i = 3; i < g_end; ++i) r.generator_terms.emplace_back(header[i], std::stod(cells[i]));
      r.generator_total = std::stod(cells[g_end]);
      for (std::size_t i = g_end + 1; i < d_end; ++i) r.discriminator_terms.emplace_back(header[i], std::stod(cells[i]));
      r.discriminator_total = std::stod(cells[d_end]);
      r.seconds = std::stod(cells[col("seconds")]);
      h.steps.push_back(std::move(r));
    }
  }
  std::istringstream vin(validation_csv);
  if (std::getline(vin, line)) {
    while (std::getline(vin, line)) {
      if (line.empty()) continue;
      const auto c = split(line, ',');
      if (c.size() != 4) throw FormatError("validation CSV row malformed");
      h.validation.push_back({std::stoi(c[0]), std::stod(c[1]), std::stod(c[2]), std::stod(c[3])});
    }
  }
  return h;
}

// -------------------------------------------------------------------- steps

HistoryRow train_step_unpaired(TrainState& state, const StepInputs& in, const TrainConfig& cfg) {
  auto& models = state.models;
  losscore::ObjectiveInputs obj{in.batch_a, in.batch_b, in.labels_a, in.labels_b, in.paired};

  const auto d_params = models.discriminator_parameters();
  set_requires_grad(d_params, false);
  state.opt_g->zero_grad();
  losscore::ForwardCache cache;
  losscore::LossBreakdown g;
  try {
    g = losscore::generator_objective(models, obj, cfg.weights, cfg.flags, &cache);
    check_finite(g, "generator", state.step);
    g.total.backward();
  } catch (...) {
    set_requires_grad(d_params, true);
    throw;
  }
  state.opt_g->step();
  set_requires_grad(d_params, true);

  state.opt_d->zero_grad();
  auto d = losscore::discriminator_objective(models, obj, cache, cfg.flags);
  check_finite(d, "discriminator", state.step);
  d.total.backward();
  state.opt_d->step();

  HistoryRow row;
  row.step = state.step++;
  row.epoch = state.epoch;
  row.generator_terms = weighted_terms(g);
  row.discriminator_terms = weighted_terms(d);
  row.generator_total = g.total_value();
  row.discriminator_total = d.total_value();
  return row;
}

// ------------------------------------------------------------------ tensors

torch::Tensor images_to_tensor(const std::vector<ImageGrid>& images, const std::vector<int>& indices) {
  if (indices.empty()) return torch::empty({0, 1, 0, 0});
  const auto& first = images.at(static_cast<std::size_t>(indices.front()));
  auto out = torch::empty({static_cast<std::int64_t>(indices.size()), 1, first.height, first.width});
  auto* p = out.data_ptr<float>();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& g = images.at(static_cast<std::size_t>(indices[k]));
    if (g.height != first.height || g.width != first.width) throw ContractError("images_to_tensor: mixed sizes");
    std::copy(g.values.begin(), g.values.end(), p + k * g.size());
  }
  return out;
}

torch::Tensor labels_to_tensor(const std::vector<LabelGrid>& labels, const std::vector<int>& indices) {
  if (indices.empty()) return torch::empty({0, 0, 0}, torch::kInt64);
  const auto& first = labels.at(static_cast<std::size_t>(indices.front()));
  auto out = torch::empty({static_cast<std::int64_t>(indices.size()), first.height, first.width}, torch::kInt64);
  auto* p = out.data_ptr<std::int64_t>();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& g = labels.at(static_cast<std::size_t>(indices[k]));
    if (g.height != first.height || g.width != first.width) throw ContractError("labels_to_tensor: mixed sizes");
    std::copy(g.values.begin(), g.values.end(), p + k * g.size());
  }
  return out;
}

std::vector<ImageGrid> tensor_to_images(const torch::Tensor& batch) {
  const auto t = batch.detach().to(torch::kFloat32).contiguous();
  if (t.dim() != 4 || t.size(1) != 1) throw ContractError("tensor_to_images: expected [N,1,H,W]");
  std::vector<ImageGrid> out;
  const int h = static_cast<int>(t.size(2)), w = static_cast<int>(t.size(3));
  const auto* p = t.data_ptr<float>();
  for (std::int64_t i = 0; i < t.size(0); ++i) {
    ImageGrid g(h, w);
    std::copy(p + i * h * w, p + (i + 1) * h * w, g.values.begin());
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<LabelGrid> tensor_to_labels(const torch::Tensor& labels) {
  const auto t = labels.detach().to(torch::kInt64).contiguous();
  if (t.dim() != 3) throw ContractError("tensor_to_labels: expected [N,H,W]");
  std::vector<LabelGrid> out;
  const int h = static_cast<int>(t.size(1)), w = static_cast<int>(t.size(2));
  const auto* p = t.data_ptr<std::int64_t>();
  for (std::int64_t i = 0; i < t.size(0); ++i) {
    LabelGrid g(h, w);
    for (std::size_t k = 0; k < g.size(); ++k) g.values[k] = static_cast<std::uint8_t>(p[i * h * w + static_cast<std::int64_t>(k)]);
    out.push_back(std::move(g));
  }
  return out;
}

synthgen::DatasetBundle downsample_dataset(const synthgen::DatasetBundle& data, int image_size) {
  const int src = data.spec.image_size;
  if (image_size == src) return data;
  if (image_size <= 0 || src % image_size != 0) {
    throw ConfigError("cannot downsample " + std::to_string(src) + " to " + std::to_string(image_size));
  }
  const int f = src / image_size;
  synthgen::DatasetBundle out = data;
  out.spec.image_size = image_size;
  std::vector<int> all(data.labels.size());
  std::iota(all.begin(), all.end(), 0);
  auto pool = [&](const std::vector<ImageGrid>& imgs) {
    return tensor_to_images(torch::avg_pool2d(images_to_tensor(imgs, all), f));
  };
  out.images_a = pool(data.images_a);
  out.images_b = pool(data.images_b);
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    LabelGrid g(image_size, image_size);
    for (int r = 0; r < image_size; ++r) {
      for (int c = 0; c < image_size; ++c) g.at(r, c) = data.labels[i].at(r * f + f / 2, c * f + f / 2);
    }
    out.labels[i] = std::move(g);
  }
  return out;
}

torch::Tensor translate(archnet::Generator& gen, const torch::Tensor& images, int chunk) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (std::int64_t i = 0; i < images.size(0); i += chunk) {
    parts.push_back(gen->forward(images.slice(0, i, std::min<std::int64_t>(i + chunk, images.size(0)))));
  }
  if (parts.empty()) return images.clone();
  return torch::cat(parts, 0);
}

// ---------------------------------------------------------------- training

namespace {

struct Batch {
  torch::Tensor images_a, labels_a, images_b, labels_b;
};

Batch make_batch(const synthgen::DatasetBundle& data, const std::vector<int>& idx_a, const std::vector<int>& idx_b,
                 const TrainConfig& cfg, int epoch, bool paired) {
  std::vector<ImageGrid> ia, ib;
  std::vector<LabelGrid> la, lb;
  for (std::size_t k = 0; k < idx_a.size(); ++k) {
    const auto i = static_cast<std::size_t>(idx_a[k]);
    const auto j = static_cast<std::size_t>(idx_b[k]);
    if (!cfg.augment) {
      ia.push_back(data.images_a[i]);
      la.push_back(data.labels[i]);
      ib.push_back(data.images_b[j]);
      lb.push_back(data.labels[j]);
      continue;
    }
    auto rng_a = make_rng(cfg.seed, {static_cast<std::uint64_t>(epoch), i, 0xA});
    const auto pa = synthgen::draw_augment(rng_a);
    auto rng_b = make_rng(cfg.seed, {static_cast<std::uint64_t>(epoch), j, 0xB});
    // Aligned pairs share one geometric transform.
    const auto pb = paired ? pa : synthgen::draw_augment(rng_b);
    auto [img_a, lbl_a] = synthgen::augment_with(data.images_a[i], data.labels[i], pa);
    auto [img_b, lbl_b] = synthgen::augment_with(data.images_b[j], data.labels[j], pb);
    ia.push_back(std::move(img_a));
    la.push_back(std::move(lbl_a));
    ib.push_back(std::move(img_b));
    lb.push_back(std::move(lbl_b));
  }
  std::vector<int> seq(idx_a.size());
  std::iota(seq.begin(), seq.end(), 0);
  return {images_to_tensor(ia, seq), labels_to_tensor(la, seq), images_to_tensor(ib, seq), labels_to_tensor(lb, seq)};
}

ValidationRow validate_epoch(TrainState& state, const synthgen::DatasetBundle& data, archnet::UNet& evaluator,
                             int epoch) {
  const auto images_b = images_to_tensor(data.images_b, data.test);
  const auto labels = labels_to_tensor(data.labels, data.test);
  const auto fake_a = translate(state.models.gen_ba, images_b);
  const auto report = evaluate_translations(evaluator, fake_a, labels, data.spec.num_classes);
  torch::NoGradGuard no_grad;
  const double ortho = metricore::orthogonality_score(state.models.gen_ba->attend(images_b));
  return {epoch, report.mean_dice().mean, report.mean_assd().mean, ortho};
}

void write_history(const std::filesystem::path& dir, const History& h) {
  if (dir.empty()) return;
  write_text(dir / "history.csv", h.steps_csv());
  write_text(dir / "validation.csv", h.validation_csv());
}

TrainResult run_training(const synthgen::DatasetBundle& data, const TrainConfig& cfg, const TrainOptions& options,
                         bool paired) {
  cfg.validate();
  if (data.spec.image_size != cfg.image_size) {
    throw ConfigError("dataset image size " + std::to_string(data.spec.image_size) + " does not match config " +
                      std::to_string(cfg.image_size));
  }
  if (data.train.size() < static_cast<std::size_t>(cfg.batch_size)) {
    throw ConfigError("training split smaller than one batch");
  }
  if (paired && (data.images_a.size() != data.images_b.size() || data.images_a.size() != data.labels.size())) {
    throw ConfigError("supervised training needs aligned A/B pairs");
  }

  TrainResult result;
  if (options.resume_from) {
    TrainConfig stored;
    result.state = load_checkpoint(*options.resume_from, &stored);
    if (stored.to_key_values() != cfg.to_key_values()) throw ConfigError("checkpoint config differs from run config");
    if (!options.out_dir.empty()) {
      auto previous = History::from_csv(read_text(options.out_dir / "history.csv"),
                                        read_text(options.out_dir / "validation.csv"));
      std::erase_if(previous.steps, [&](const HistoryRow& r) { return r.step >= result.state.step; });
      std::erase_if(previous.validation, [&](const ValidationRow& r) { return r.epoch >= result.state.epoch; });
      result.history = std::move(previous);
    }
  } else {
    result.state = TrainState::create(cfg, data.spec.num_classes);
  }
  if (!options.out_dir.empty()) std::filesystem::create_directories(options.out_dir);

  auto& state = result.state;
  const auto start = std::chrono::steady_clock::now();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  std::size_t steps = data.train.size() / bs;
  if (cfg.max_steps_per_epoch > 0) steps = std::min(steps, static_cast<std::size_t>(cfg.max_steps_per_epoch));

  int epochs_run = 0;
  for (int epoch = state.epoch; epoch < cfg.epochs_total; ++epoch) {
    if (options.stop_after_epochs >= 0 && epochs_run >= options.stop_after_epochs) break;
    state.epoch = epoch;
    state.set_lr(lr_schedule(epoch, cfg));
    auto rng_a = make_rng(cfg.seed, {static_cast<std::uint64_t>(epoch), 0x5A});
    auto rng_b = make_rng(cfg.seed, {static_cast<std::uint64_t>(epoch), 0x5B});
    const auto perm_a = permutation(data.train, rng_a);
    const auto perm_b = paired ? perm_a : permutation(data.train, rng_b);

    for (std::size_t s = 0; s < steps; ++s) {
      const std::vector<int> idx_a(perm_a.begin() + static_cast<std::ptrdiff_t>(s * bs),
                                   perm_a.begin() + static_cast<std::ptrdiff_t>((s + 1) * bs));
      const std::vector<int> idx_b(perm_b.begin() + static_cast<std::ptrdiff_t>(s * bs),
                                   perm_b.begin() + static_cast<std::ptrdiff_t>((s + 1) * bs));
      const auto batch = make_batch(data, idx_a, idx_b, cfg, epoch, paired);
      StepInputs in{batch.images_a, batch.labels_a, batch.images_b, std::nullopt, paired};
      if (options.use_labels_b) in.labels_b = batch.labels_b;
      auto row = train_step_unpaired(state, in, cfg);
      row.lr = lr_schedule(epoch, cfg);
      row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (options.on_step) options.on_step(row);
      result.history.steps.push_back(std::move(row));
    }
    state.epoch = epoch + 1;
    ++epochs_run;

    if (options.evaluator && options.validate_every > 0 && state.epoch % options.validate_every == 0) {
      auto evaluator = options.evaluator;
      result.history.validation.push_back(validate_epoch(state, data, evaluator, state.epoch));
    }
    if (!options.out_dir.empty() && cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0) {
      std::ostringstream name;
      name << "checkpoint_epoch_" << std::setw(3) << std::setfill('0') << state.epoch << ".sasn";
      save_checkpoint(options.out_dir / name.str(), state, cfg);
      write_history(options.out_dir, result.history);
    }
  }
  if (!options.out_dir.empty()) {
    save_checkpoint(options.out_dir / "final.sasn", state, cfg);
    write_history(options.out_dir, result.history);
  }
  return result;
}

}  // namespace

TrainResult train_unsupervised(const synthgen::DatasetBundle& data, const TrainConfig& cfg,
                               const TrainOptions& options) {
  return run_training(data, cfg, options, /*paired=*/false);
}

TrainResult train_supervised(const synthgen::DatasetBundle& data, const TrainConfig& cfg,
                             const TrainOptions& options) {
  return run_training(data, cfg, options, /*paired=*/true);
}

}  // namespace sasan::trainloop
