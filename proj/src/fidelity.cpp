#include <cmath>
#include <limits>

#include "sasan/error.hpp"
#include "sasan/losscore.hpp"
#include "sasan/metricore.hpp"

namespace sasan::metricore {

namespace {

torch::Tensor as_batch(const torch::Tensor& t) {
  switch (t.dim()) {
    case 2: return t.unsqueeze(0).unsqueeze(0);
    case 3: return t.unsqueeze(0);
    case 4: return t;
    default: throw ContractError("image_fidelity: expected 2-4 dimensional images");
  }
}

}  // namespace

FidelityRecord image_fidelity(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw ContractError("image_fidelity: shape mismatch");
  torch::NoGradGuard no_grad;
  const auto x = (as_batch(a).to(torch::kFloat64) + 1.0) / 2.0;
  const auto y = (as_batch(b).to(torch::kFloat64) + 1.0) / 2.0;
  const auto diff = x - y;

  FidelityRecord r;
  const double mse = diff.pow(2).mean().item<double>();
  r.mae = diff.abs().mean().item<double>();
  r.rmse = std::sqrt(mse);
  r.psnr = mse == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / mse);
  r.ssim = losscore::ssim(x, y, losscore::SsimConfig::metric()).item<double>();

  const auto xc = x.flatten() - x.mean();
  const auto yc = y.flatten() - y.mean();
  const double sxx = xc.pow(2).sum().item<double>();
  const double syy = yc.pow(2).sum().item<double>();
  r.pcc = (sxx == 0.0 || syy == 0.0) ? std::numeric_limits<double>::quiet_NaN()
                                      : (xc * yc).sum().item<double>() / std::sqrt(sxx * syy);
  return r;
}

double orthogonality_score(const torch::Tensor& maps) {
  torch::NoGradGuard no_grad;
  auto m = maps.dim() == 3 ? maps.unsqueeze(0) : maps;
  if (m.dim() != 4 || m.size(1) < 2) throw ContractError("orthogonality_score: need N >= 2 maps");
  m = m.to(torch::kFloat64).flatten(2);
  const auto unit = m / m.norm(2, {2}, /*keepdim=*/true).clamp_min(1e-8);
  const auto gram = torch::bmm(unit, unit.transpose(1, 2)).abs();
  const double n = static_cast<double>(m.size(1));
  const auto off = gram.sum({1, 2}) - gram.diagonal(0, 1, 2).sum(1);
  return (off / (n * (n - 1.0))).mean().item<double>();
}

}  // namespace sasan::metricore
