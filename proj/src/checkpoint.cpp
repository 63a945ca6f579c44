#include <cstring>

#include "sasan/error.hpp"
#include "sasan/trainloop.hpp"

namespace sasan::trainloop {

namespace {

std::vector<std::int64_t> shape_of(const torch::Tensor& t) { return t.sizes().vec(); }

constexpr const char* kTrainKind = "sasan-train-state";
constexpr const char* kSegmenterKind = "sasan-segmenter";

void save_optimizer(io::Container& c, const std::string& prefix, const torch::optim::Adam& opt,
                    nlohmann::ordered_json& steps) {
  steps = nlohmann::ordered_json::array();
  const auto& params = opt.param_groups().at(0).params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto it = opt.state().find(params[k].unsafeGetTensorImpl());
    if (it == opt.state().end()) {
      steps.push_back(-1);
      continue;
    }
    const auto& st = static_cast<const torch::optim::AdamParamState&>(*it->second);
    steps.push_back(st.step());
    c.add(prefix + "/" + std::to_string(k) + "/exp_avg", to_raw(st.exp_avg()));
    c.add(prefix + "/" + std::to_string(k) + "/exp_avg_sq", to_raw(st.exp_avg_sq()));
  }
}

void load_optimizer(const io::Container& c, const std::string& prefix, torch::optim::Adam& opt,
                    const nlohmann::json& steps) {
  auto& params = opt.param_groups().at(0).params();
  if (!steps.is_array() || steps.size() != params.size()) {
    throw FormatError("invalid field '" + prefix + "' steps: parameter count mismatch");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto step = steps[k].get<std::int64_t>();
    if (step < 0) continue;
    auto st = std::make_unique<torch::optim::AdamParamState>();
    st->step(step);
    const auto base = prefix + "/" + std::to_string(k);
    auto m = from_raw(c.get(base + "/exp_avg")).to(params[k].scalar_type());
    auto v = from_raw(c.get(base + "/exp_avg_sq")).to(params[k].scalar_type());
    if (m.sizes() != params[k].sizes() || v.sizes() != params[k].sizes()) {
      throw FormatError("invalid field '" + base + "': shape mismatch");
    }
    st->exp_avg(m);
    st->exp_avg_sq(v);
    opt.state()[params[k].unsafeGetTensorImpl()] = std::move(st);
  }
}

io::Container read_kind(const std::filesystem::path& path, const char* kind) {
  auto c = io::read_container(path);
  if (!c.metadata.contains("kind") || c.metadata["kind"] != kind) {
    throw FormatError(path.string() + ": invalid field 'kind' (expected " + kind + ")");
  }
  return c;
}

}  // namespace

io::RawTensor to_raw(const torch::Tensor& t) {
  const auto c = t.detach().cpu().contiguous();
  const auto shape = shape_of(c);
  switch (c.scalar_type()) {
    case torch::kFloat32: {
      std::vector<float> v(c.data_ptr<float>(), c.data_ptr<float>() + c.numel());
      return io::RawTensor::from_f32(shape, v);
    }
    case torch::kFloat64: {
      std::vector<double> v(c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
      return io::RawTensor::from_f64(shape, v);
    }
    case torch::kUInt8: {
      std::vector<std::uint8_t> v(c.data_ptr<std::uint8_t>(), c.data_ptr<std::uint8_t>() + c.numel());
      return io::RawTensor::from_u8(shape, std::move(v));
    }
    case torch::kInt64: {
      // Counters (e.g. batch-norm step counts); exact below 2^53.
      const auto d = c.to(torch::kFloat64);
      std::vector<double> v(d.data_ptr<double>(), d.data_ptr<double>() + d.numel());
      return io::RawTensor::from_f64(shape, v);
    }
    default:
      throw ContractError("to_raw: unsupported dtype " + std::string(c.dtype().name()));
  }
}

torch::Tensor from_raw(const io::RawTensor& raw) {
  switch (raw.dtype) {
    case io::DType::f32: {
      const auto v = raw.as_f32();
      return torch::from_blob(const_cast<float*>(v.data()), raw.shape, torch::kFloat32).clone();
    }
    case io::DType::f64: {
      const auto v = raw.as_f64();
      return torch::from_blob(const_cast<double*>(v.data()), raw.shape, torch::kFloat64).clone();
    }
    case io::DType::u8:
      return torch::from_blob(const_cast<std::uint8_t*>(raw.bytes.data()), raw.shape, torch::kUInt8).clone();
  }
  throw ContractError("from_raw: unsupported dtype");
}

void save_module(io::Container& c, const std::string& prefix, const torch::nn::Module& module) {
  for (const auto& item : module.named_parameters(true)) c.add(prefix + "/" + item.key(), to_raw(item.value()));
  for (const auto& item : module.named_buffers(true)) c.add(prefix + "/" + item.key(), to_raw(item.value()));
}

void load_module(const io::Container& c, const std::string& prefix, torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& name, torch::Tensor target) {
    const auto key = prefix + "/" + name;
    if (!c.contains(key)) throw FormatError("invalid field '" + key + "': missing");
    const auto value = from_raw(c.get(key));
    if (value.sizes() != target.sizes()) throw FormatError("invalid field '" + key + "': shape mismatch");
    target.copy_(value);
  };
  for (auto& item : module.named_parameters(true)) assign(item.key(), item.value());
  for (auto& item : module.named_buffers(true)) assign(item.key(), item.value());
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const TrainConfig& cfg) {
  io::Container c;
  for (const auto& [name, module] : state.models.named_modules()) save_module(c, name, *module);
  nlohmann::ordered_json meta;
  meta["kind"] = kTrainKind;
  meta["config"] = cfg.to_key_values();
  meta["num_classes"] = state.models.num_classes;
  meta["epoch"] = state.epoch;
  meta["step"] = state.step;
  save_optimizer(c, "opt_g", *state.opt_g, meta["opt_g_steps"]);
  save_optimizer(c, "opt_d", *state.opt_d, meta["opt_d_steps"]);
  c.metadata = meta;
  io::write_container(path, c);
}

TrainState load_checkpoint(const std::filesystem::path& path, TrainConfig* cfg_out) {
  const auto c = read_kind(path, kTrainKind);
  const auto& meta = c.metadata;
  const auto cfg = TrainConfig::from_key_values(meta.at("config").get<io::KeyValues>());
  auto state = TrainState::create(cfg, meta.at("num_classes").get<int>());
  for (auto& [name, module] : state.models.named_modules()) load_module(c, name, *module);
  load_optimizer(c, "opt_g", *state.opt_g, meta.at("opt_g_steps"));
  load_optimizer(c, "opt_d", *state.opt_d, meta.at("opt_d_steps"));
  state.epoch = meta.at("epoch").get<int>();
  state.step = meta.at("step").get<std::int64_t>();
  state.set_lr(lr_schedule(std::min(state.epoch, cfg.epochs_total), cfg));
  if (cfg_out != nullptr) *cfg_out = cfg;
  return state;
}

archnet::Generator load_generator(const std::filesystem::path& path, const std::string& which) {
  if (which != "gen_ab" && which != "gen_ba") throw ContractError("load_generator: unknown generator " + which);
  const auto c = read_kind(path, kTrainKind);
  const auto cfg = TrainConfig::from_key_values(c.metadata.at("config").get<io::KeyValues>());
  archnet::Generator gen(cfg.generator_config(), c.metadata.at("num_classes").get<int>());
  load_module(c, which, *gen);
  gen->eval();
  return gen;
}

void save_segmenter(const std::filesystem::path& path, const archnet::UNet& model, int num_classes,
                    const SegmenterConfig& cfg) {
  io::Container c;
  save_module(c, "unet", *model);
  nlohmann::ordered_json meta;
  meta["kind"] = kSegmenterKind;
  meta["num_classes"] = num_classes;
  meta["in_channels"] = model->cfg.in_channels;
  meta["base_channels"] = model->cfg.base_channels;
  meta["epochs"] = cfg.epochs;
  meta["lr"] = cfg.lr;
  meta["batch_size"] = cfg.batch_size;
  meta["seed"] = cfg.seed;
  c.metadata = meta;
  io::write_container(path, c);
}

archnet::UNet load_segmenter(const std::filesystem::path& path) {
  const auto c = read_kind(path, kSegmenterKind);
  archnet::UNetConfig cfg;
  cfg.in_channels = c.metadata.at("in_channels").get<int>();
  cfg.num_classes = c.metadata.at("num_classes").get<int>();
  cfg.base_channels = c.metadata.at("base_channels").get<int>();
  archnet::UNet model(cfg);
  load_module(c, "unet", *model);
  model->eval();
  return model;
}

}  // namespace sasan::trainloop
