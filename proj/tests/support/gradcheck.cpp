#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sasan/rng.hpp"

namespace sasan::testing {

torch::Tensor randn_double(const std::vector<std::int64_t>& shape, std::uint64_t seed, double scale) {
  auto t = torch::empty(shape, torch::kFloat64);
  auto rng = make_rng(seed, {0x6E});
  auto* p = t.data_ptr<double>();
  for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = scale * gaussian(rng);
  return t;
}

torch::Tensor rand_double(const std::vector<std::int64_t>& shape, std::uint64_t seed, double lo, double hi) {
  auto t = torch::empty(shape, torch::kFloat64);
  auto rng = make_rng(seed, {0x75});
  auto* p = t.data_ptr<double>();
  for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = uniform(rng, lo, hi);
  return t;
}

torch::Tensor project(const torch::Tensor& t, std::uint64_t seed) {
  const auto w = randn_double(t.sizes().vec(), seed).to(t.dtype());
  return (t * w).sum();
}

NamedTensors parameters_of(const torch::nn::Module& module, const std::string& prefix) {
  NamedTensors out;
  for (const auto& item : module.named_parameters(true)) out.emplace_back(prefix + item.key(), item.value());
  return out;
}

GradCheckResult gradcheck(const std::function<torch::Tensor()>& f, const NamedTensors& wrt, int max_entries,
                          double step, std::uint64_t seed) {
  for (const auto& [name, t] : wrt) {
    if (t.grad().defined()) t.mutable_grad() = torch::Tensor();
  }
  f().backward();
  std::vector<torch::Tensor> analytic;
  for (const auto& [name, t] : wrt) {
    analytic.push_back(t.grad().defined() ? t.grad().detach().clone() : torch::zeros_like(t));
  }

  GradCheckResult result;
  torch::NoGradGuard no_grad;
  auto rng = make_rng(seed, {0x6C});
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    const auto& [name, t] = wrt[k];
    const auto n = t.numel();
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    if (n > max_entries) {
      for (std::int64_t i = 0; i < max_entries; ++i) {
        const auto j = i + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(n - i));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
      }
      idx.resize(static_cast<std::size_t>(max_entries));
    }
    auto* p = t.data_ptr<double>();
    const auto* a = analytic[k].contiguous().data_ptr<double>();
    double worst_diff = 0.0, scale = 0.0;
    for (auto i : idx) {
      const double orig = p[i];
      p[i] = orig + step;
      const double fp = f().item<double>();
      p[i] = orig - step;
      const double fm = f().item<double>();
      p[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      worst_diff = std::max(worst_diff, std::abs(numeric - a[i]));
      scale = std::max({scale, std::abs(numeric), std::abs(a[i])});
      ++result.entries;
    }
    const double rel = worst_diff / std::max(scale, 1e-3);
    if (rel >= result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst = name;
    }
  }
  return result;
}

}  // namespace sasan::testing
