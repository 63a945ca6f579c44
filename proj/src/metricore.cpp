#include "sasan/metricore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>

#include "sasan/error.hpp"

namespace sasan::metricore {

BinaryMask::BinaryMask(std::vector<int> dims_) : dims(std::move(dims_)) {
  if (dims.size() != 2 && dims.size() != 3) throw ContractError("binary mask must be 2D or 3D");
  std::size_t n = 1;
  for (int d : dims) {
    if (d < 0) throw ContractError("binary mask extent must be non-negative");
    n *= static_cast<std::size_t>(d);
  }
  cells.assign(n, 0);
}

BinaryMask BinaryMask::from_labels(const LabelGrid& labels, int cls) {
  BinaryMask m({labels.height, labels.width});
  for (std::size_t i = 0; i < labels.size(); ++i) m.cells[i] = labels.values[i] == cls ? 1 : 0;
  return m;
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](std::uint8_t v) { return v != 0; }));
}

bool BinaryMask::at(int z, int y, int x) const {
  return cells[(static_cast<std::size_t>(z) * height() + y) * width() + x] != 0;
}

void BinaryMask::set(int z, int y, int x, bool v) {
  cells[(static_cast<std::size_t>(z) * height() + y) * width() + x] = v ? 1 : 0;
}

namespace {

void require_same_dims(const BinaryMask& a, const BinaryMask& b, const char* what) {
  if (a.dims != b.dims) throw ContractError(std::string(what) + ": mask shapes differ");
}

// Lower envelope of parabolas for one line (Felzenszwalb & Huttenlocher).
void distance_1d(std::vector<double>& f, std::vector<double>& out, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    auto intersect = [&](int p) {
      return ((f[q] + static_cast<double>(q) * q) - (f[p] + static_cast<double>(p) * p)) / (2.0 * q - 2.0 * p);
    };
    double s = intersect(v[k]);
    while (s <= z[k]) {
      --k;
      s = intersect(v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double d = q - v[k];
    out[q] = d * d + f[v[k]];
  }
}

}  // namespace

double dice_score(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_dims(pred, gt, "dice_score");
  std::size_t inter = 0, p = 0, g = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred.cells[i] != 0, b = gt.cells[i] != 0;
    p += a;
    g += b;
    inter += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

std::vector<Cell> boundary_extract(const BinaryMask& mask) {
  std::vector<Cell> out;
  const int depth = mask.depth(), height = mask.height(), width = mask.width();
  const bool volumetric = mask.rank() == 3;
  auto inside = [&](int z, int y, int x) {
    return z >= 0 && z < depth && y >= 0 && y < height && x >= 0 && x < width && mask.at(z, y, x);
  };
  for (int z = 0; z < depth; ++z) {
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        if (!mask.at(z, y, x)) continue;
        bool edge = !inside(z, y - 1, x) || !inside(z, y + 1, x) || !inside(z, y, x - 1) || !inside(z, y, x + 1);
        if (volumetric) edge = edge || !inside(z - 1, y, x) || !inside(z + 1, y, x);
        if (edge) out.push_back({z, y, x});
      }
    }
  }
  return out;
}

std::vector<double> squared_distance_transform(const BinaryMask& seeds) {
  const int depth = seeds.depth(), height = seeds.height(), width = seeds.width();
  // Finite stand-in for infinity that keeps every sum exact in double precision.
  const double far = 1.0 + static_cast<double>(depth) * depth + static_cast<double>(height) * height +
                     static_cast<double>(width) * width;
  std::vector<double> dist(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) dist[i] = seeds.cells[i] != 0 ? 0.0 : far;

  const std::array<int, 3> extent{depth, height, width};
  const std::array<std::size_t, 3> stride{static_cast<std::size_t>(height) * width, static_cast<std::size_t>(width),
                                          1};
  const int longest = std::max({depth, height, width});
  std::vector<double> f(static_cast<std::size_t>(longest)), out(static_cast<std::size_t>(longest));
  std::vector<int> v(static_cast<std::size_t>(longest));
  std::vector<double> z(static_cast<std::size_t>(longest) + 1);

  for (int axis = 0; axis < 3; ++axis) {
    const int n = extent[static_cast<std::size_t>(axis)];
    if (n <= 1) continue;
    f.resize(static_cast<std::size_t>(n));
    out.resize(static_cast<std::size_t>(n));
    for (std::size_t start = 0; start < dist.size(); ++start) {
      // Visit each line once: its start has coordinate 0 along `axis`.
      const std::size_t coord = (start / stride[static_cast<std::size_t>(axis)]) % static_cast<std::size_t>(n);
      if (coord != 0) continue;
      for (int q = 0; q < n; ++q) f[static_cast<std::size_t>(q)] = dist[start + q * stride[static_cast<std::size_t>(axis)]];
      distance_1d(f, out, v, z);
      for (int q = 0; q < n; ++q) dist[start + q * stride[static_cast<std::size_t>(axis)]] = out[static_cast<std::size_t>(q)];
    }
  }
  if (std::none_of(seeds.cells.begin(), seeds.cells.end(), [](std::uint8_t c) { return c != 0; })) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
  }
  return dist;
}

double assd(const BinaryMask& pred, const BinaryMask& gt, double cap) {
  require_same_dims(pred, gt, "assd");
  if (pred.empty_set() || gt.empty_set()) return cap;

  auto boundary_mask = [](const BinaryMask& m, const std::vector<Cell>& cells) {
    BinaryMask b(m.dims);
    for (const auto& c : cells) b.set(c[0], c[1], c[2], true);
    return b;
  };
  const auto pred_cells = boundary_extract(pred);
  const auto gt_cells = boundary_extract(gt);
  const auto to_gt = squared_distance_transform(boundary_mask(gt, gt_cells));
  const auto to_pred = squared_distance_transform(boundary_mask(pred, pred_cells));

  auto directed = [&](const std::vector<Cell>& from, const std::vector<double>& field) {
    double sum = 0.0;
    for (const auto& c : from) {
      sum += std::sqrt(field[(static_cast<std::size_t>(c[0]) * pred.height() + c[1]) * pred.width() + c[2]]);
    }
    return sum / static_cast<double>(from.size());
  };
  const double value = 0.5 * (directed(pred_cells, to_gt) + directed(gt_cells, to_pred));
  return std::min(value, cap);
}

WelchResult welch_t_test(const std::vector<double>& sample_a, const std::vector<double>& sample_b) {
  if (sample_a.size() < 2 || sample_b.size() < 2) throw ContractError("welch_t_test: each sample needs >= 2 values");
  auto moments = [](const std::vector<double>& s) {
    const double n = static_cast<double>(s.size());
    const double mean = std::accumulate(s.begin(), s.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : s) ss += (x - mean) * (x - mean);
    return std::pair{mean, ss / (n - 1.0)};
  };
  const auto [mean_a, var_a] = moments(sample_a);
  const auto [mean_b, var_b] = moments(sample_b);
  const double na = static_cast<double>(sample_a.size()), nb = static_cast<double>(sample_b.size());
  const double qa = var_a / na, qb = var_b / nb;

  WelchResult r;
  if (qa + qb == 0.0) {
    r.df = na + nb - 2.0;
    if (mean_a == mean_b) {
      r.t = 0.0;
      r.p_two_sided = 1.0;
    } else {
      r.t = mean_a > mean_b ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      r.p_two_sided = 0.0;
    }
    return r;
  }
  r.t = (mean_a - mean_b) / std::sqrt(qa + qb);
  r.df = (qa + qb) * (qa + qb) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
  const boost::math::students_t dist(r.df);
  r.p_two_sided = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))));
  return r;
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.n = values.size();
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
  if (s.n >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

Summary MetricsReport::dice_summary(std::size_t class_index) const { return summarize(dice.at(class_index)); }
Summary MetricsReport::assd_summary(std::size_t class_index) const { return summarize(assd.at(class_index)); }

namespace {

std::vector<double> per_sample_mean(const std::vector<std::vector<double>>& per_class) {
  if (per_class.empty()) return {};
  std::vector<double> out(per_class.front().size(), 0.0);
  for (const auto& column : per_class) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += column.at(i);
  }
  for (auto& v : out) v /= static_cast<double>(per_class.size());
  return out;
}

nlohmann::ordered_json summary_json(const Summary& s) {
  nlohmann::ordered_json j;
  j["mean"] = s.mean;
  j["std"] = s.std ? nlohmann::ordered_json(*s.std) : nlohmann::ordered_json(nullptr);
  j["n"] = s.n;
  return j;
}

nlohmann::ordered_json finite_or_null(double v) {
  return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

std::string format_optional(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(17);
  os << *v;
  return os.str();
}

}  // namespace

std::vector<double> MetricsReport::per_sample_mean_dice() const { return per_sample_mean(dice); }
Summary MetricsReport::mean_dice() const { return summarize(per_sample_mean(dice)); }
Summary MetricsReport::mean_assd() const { return summarize(per_sample_mean(assd)); }

nlohmann::ordered_json MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["fidelity_dynamic_range"] = "PSNR/SSIM/MAE/RMSE computed on images remapped to [0,1]";
  j["assd_cap"] = kAssdCap;
  j["classes"] = classes;
  j["sample_ids"] = sample_ids;
  nlohmann::ordered_json dj, aj, summary;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const auto key = std::to_string(classes[c]);
    dj[key] = dice[c];
    aj[key] = assd[c];
    summary["dice"][key] = summary_json(dice_summary(c));
    summary["assd"][key] = summary_json(assd_summary(c));
  }
  summary["mean_dice"] = summary_json(mean_dice());
  summary["mean_assd"] = summary_json(mean_assd());
  j["dice"] = dj;
  j["assd"] = aj;
  j["summary"] = summary;
  if (!fidelity.empty()) {
    nlohmann::ordered_json fj = nlohmann::ordered_json::array();
    for (const auto& f : fidelity) {
      fj.push_back({{"ssim", f.ssim},
                    {"psnr", finite_or_null(f.psnr)},
                    {"mae", f.mae},
                    {"rmse", f.rmse},
                    {"pcc", finite_or_null(f.pcc)}});
    }
    j["fidelity"] = fj;
  }
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.classes = j.at("classes").get<std::vector<int>>();
  r.sample_ids = j.at("sample_ids").get<std::vector<std::string>>();
  for (int c : r.classes) {
    r.dice.push_back(j.at("dice").at(std::to_string(c)).get<std::vector<double>>());
    r.assd.push_back(j.at("assd").at(std::to_string(c)).get<std::vector<double>>());
  }
  if (j.contains("fidelity")) {
    auto value = [](const nlohmann::json& v, double sentinel) { return v.is_null() ? sentinel : v.get<double>(); };
    for (const auto& f : j["fidelity"]) {
      r.fidelity.push_back({f.at("ssim").get<double>(), value(f.at("psnr"), std::numeric_limits<double>::infinity()),
                            f.at("mae").get<double>(), f.at("rmse").get<double>(),
                            value(f.at("pcc"), std::numeric_limits<double>::quiet_NaN())});
    }
  }
  return r;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "class,dice_mean,dice_std,assd_mean,assd_std,n\n";
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const auto d = dice_summary(c), a = assd_summary(c);
    os << classes[c] << ',' << d.mean << ',' << format_optional(d.std) << ',' << a.mean << ','
       << format_optional(a.std) << ',' << d.n << '\n';
  }
  const auto d = mean_dice(), a = mean_assd();
  os << "Mean," << d.mean << ',' << format_optional(d.std) << ',' << a.mean << ',' << format_optional(a.std) << ','
     << d.n << '\n';
  return os.str();
}

MetricsReport evaluate_segmentation(const std::vector<LabelGrid>& predictions, const std::vector<LabelGrid>& truth,
                                    int num_classes, std::vector<std::string> sample_ids) {
  if (predictions.size() != truth.size()) throw ContractError("evaluate_segmentation: sample counts differ");
  MetricsReport r;
  if (sample_ids.empty()) {
    for (std::size_t i = 0; i < predictions.size(); ++i) sample_ids.push_back(std::to_string(i));
  }
  r.sample_ids = std::move(sample_ids);
  for (int c = 1; c < num_classes; ++c) r.classes.push_back(c);
  r.dice.assign(r.classes.size(), {});
  r.assd.assign(r.classes.size(), {});
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    for (std::size_t k = 0; k < r.classes.size(); ++k) {
      const auto p = BinaryMask::from_labels(predictions[i], r.classes[k]);
      const auto g = BinaryMask::from_labels(truth[i], r.classes[k]);
      r.dice[k].push_back(dice_score(p, g));
      r.assd[k].push_back(assd(p, g));
    }
  }
  return r;
}

}  // namespace sasan::metricore
