#include "sasan/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "sasan/error.hpp"

namespace sasan::runner {

namespace fs = std::filesystem;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) return "";
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void require_same_classes(const std::vector<ExperimentRecord>& records) {
  for (const auto& r : records) {
    if (r.metrics.classes != records.front().metrics.classes) {
      throw ReportError("experiments '" + records.front().name + "' and '" + r.name + "' have different class sets");
    }
  }
}

std::vector<double> class_means(const metricore::MetricsReport& m, bool dice) {
  std::vector<double> out;
  for (std::size_t c = 0; c < m.classes.size(); ++c) out.push_back((dice ? m.dice_summary(c) : m.assd_summary(c)).mean);
  return out;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string cell(const metricore::Summary& s) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << s.mean;
  if (s.std) os << "±" << *s.std;
  return os.str();
}

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
                          "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31", "#843c39",
                          "#7b4173", "#3182bd", "#e6550d", "#31a354"};

struct Series {
  std::string name;
  std::vector<double> x, y;
};

std::string svg_plot(const std::vector<Series>& series, const std::string& title, const std::string& xlabel,
                     const std::string& ylabel) {
  const double width = 720, height = 420, left = 60, right = 170, top = 30, bottom = 45;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  const double pw = width - left - right, ph = height - top - bottom;
  auto px = [&](double x) { return left + (x - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) { return top + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };

  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << title << "</text>\n";
  os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double yv = ymin + (ymax - ymin) * t / 4.0, xv = xmin + (xmax - xmin) * t / 4.0;
    os << "<text x=\"" << left - 5 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << yv << "</text>\n";
    os << "<text x=\"" << px(xv) << "\" y=\"" << top + ph + 15 << "\" text-anchor=\"middle\">" << xv << "</text>\n";
  }
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 8 << "\" text-anchor=\"middle\">" << xlabel
     << "</text>\n";
  os << "<text x=\"14\" y=\"" << top + ph / 2 << "\" transform=\"rotate(-90 14 " << top + ph / 2
     << ")\" text-anchor=\"middle\">" << ylabel << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto* color = kPalette[k % (sizeof(kPalette) / sizeof(kPalette[0]))];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.2\" points=\"";
    for (std::size_t i = 0; i < series[k].x.size(); ++i) {
      if (std::isfinite(series[k].y[i])) os << px(series[k].x[i]) << ',' << py(series[k].y[i]) << ' ';
    }
    os << "\"/>\n";
    const double ly = top + 12 + 14 * static_cast<double>(k);
    os << "<line x1=\"" << width - right + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << width - right + 28 << "\" y2=\""
       << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << width - right + 32 << "\" y=\"" << ly << "\">" << series[k].name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Bucket averages so that long histories stay readable.
Series bucketed(const std::string& name, const std::vector<double>& x, const std::vector<double>& y,
                std::size_t max_points) {
  Series s{name, {}, {}};
  const std::size_t n = x.size();
  const std::size_t bucket = std::max<std::size_t>(1, (n + max_points - 1) / max_points);
  for (std::size_t i = 0; i < n; i += bucket) {
    double sx = 0.0, sy = 0.0;
    const std::size_t end = std::min(n, i + bucket);
    for (std::size_t j = i; j < end; ++j) sx += x[j], sy += y[j];
    s.x.push_back(sx / static_cast<double>(end - i));
    s.y.push_back(sy / static_cast<double>(end - i));
  }
  return s;
}

}  // namespace

std::vector<ExperimentRecord> load_experiments(const fs::path& root, std::vector<std::string> names) {
  if (names.empty()) {
    const auto index = read_text(root / "ablation.json");
    if (index.empty()) throw ReportError("no experiments named and no ablation.json in " + root.string());
    names = nlohmann::json::parse(index).at("variants").get<std::vector<std::string>>();
  }
  std::vector<ExperimentRecord> out;
  for (const auto& name : names) {
    const auto dir = root / name;
    const auto metrics = read_text(dir / "metrics.json");
    if (metrics.empty()) throw std::runtime_error("missing metrics file " + (dir / "metrics.json").string());
    ExperimentRecord r;
    r.name = name;
    r.metrics = metricore::MetricsReport::from_json(nlohmann::json::parse(metrics));
    r.history = trainloop::History::from_csv(read_text(dir / "history.csv"), read_text(dir / "validation.csv"));
    out.push_back(std::move(r));
  }
  return out;
}

std::string aggregate_csv(const std::vector<ExperimentRecord>& records) {
  if (records.empty()) throw ReportError("report needs at least one experiment");
  require_same_classes(records);
  std::ostringstream os;
  os << std::setprecision(17) << "experiment";
  for (int c : records.front().metrics.classes) os << ",dice_" << c;
  os << ",dice_mean";
  for (int c : records.front().metrics.classes) os << ",assd_" << c;
  os << ",assd_mean\n";
  for (const auto& r : records) {
    const auto dice = class_means(r.metrics, true);
    const auto assd = class_means(r.metrics, false);
    os << r.name;
    for (double d : dice) os << ',' << d;
    os << ',' << mean_of(dice);
    for (double a : assd) os << ',' << a;
    os << ',' << mean_of(assd) << '\n';
  }
  return os.str();
}

std::string aggregate_table(const std::vector<ExperimentRecord>& records) {
  if (records.empty()) throw ReportError("report needs at least one experiment");
  require_same_classes(records);
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"Experiment"};
  for (int c : records.front().metrics.classes) header.push_back("Dice " + std::to_string(c));
  header.push_back("Dice Mean");
  for (int c : records.front().metrics.classes) header.push_back("ASSD " + std::to_string(c));
  header.push_back("ASSD Mean");
  rows.push_back(header);
  for (const auto& r : records) {
    std::vector<std::string> row{r.name};
    for (std::size_t c = 0; c < r.metrics.classes.size(); ++c) row.push_back(cell(r.metrics.dice_summary(c)));
    row.push_back(cell(r.metrics.mean_dice()));
    for (std::size_t c = 0; c < r.metrics.classes.size(); ++c) row.push_back(cell(r.metrics.assd_summary(c)));
    row.push_back(cell(r.metrics.mean_assd()));
    rows.push_back(row);
  }
  // Display width counts the two-byte '±' once.
  auto display = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;
    return n;
  };
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], display(row[i]));
  }
  std::ostringstream os;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    for (std::size_t i = 0; i < rows[k].size(); ++i) {
      os << (i ? "  " : "") << rows[k][i] << std::string(widths[i] - display(rows[k][i]), ' ');
    }
    os << '\n';
    if (k == 0) {
      std::size_t total = 0;
      for (auto w : widths) total += w + 2;
      os << std::string(total - 2, '-') << '\n';
    }
  }
  return os.str();
}

Comparison compare(const ExperimentRecord& a, const ExperimentRecord& b) {
  require_same_classes({a, b});
  Comparison c;
  c.first = a.name;
  c.second = b.name;
  const auto sa = a.metrics.per_sample_mean_dice();
  const auto sb = b.metrics.per_sample_mean_dice();
  c.welch = metricore::welch_t_test(sa, sb);
  c.mean_first = mean_of(sa);
  c.mean_second = mean_of(sb);
  return c;
}

std::string comparisons_csv(const std::vector<Comparison>& rows) {
  std::ostringstream os;
  os << std::setprecision(17) << "first,second,mean_dice_first,mean_dice_second,t,df,p_two_sided\n";
  for (const auto& r : rows) {
    os << r.first << ',' << r.second << ',' << r.mean_first << ',' << r.mean_second << ',' << r.welch.t << ','
       << r.welch.df << ',' << r.welch.p_two_sided << '\n';
  }
  return os.str();
}

std::string loss_plot_svg(const trainloop::History& history, const std::string& title) {
  std::vector<Series> series;
  if (!history.steps.empty()) {
    std::vector<double> x;
    for (const auto& r : history.steps) x.push_back(static_cast<double>(r.step));
    auto add = [&](const std::string& name, auto get) {
      std::vector<double> y;
      for (const auto& r : history.steps) y.push_back(get(r));
      series.push_back(bucketed(name, x, y, 400));
    };
    for (std::size_t k = 0; k < history.steps.front().generator_terms.size(); ++k) {
      add(history.steps.front().generator_terms[k].first, [k](const auto& r) { return r.generator_terms[k].second; });
    }
    for (std::size_t k = 0; k < history.steps.front().discriminator_terms.size(); ++k) {
      add(history.steps.front().discriminator_terms[k].first,
          [k](const auto& r) { return r.discriminator_terms[k].second; });
    }
    add("generator_total", [](const auto& r) { return r.generator_total; });
    add("discriminator_total", [](const auto& r) { return r.discriminator_total; });
  }
  return svg_plot(series, title, "step", "weighted loss");
}

std::string validation_plot_svg(const trainloop::History& history, const std::string& title) {
  Series s{"mean Dice", {}, {}};
  for (const auto& v : history.validation) {
    s.x.push_back(v.epoch);
    s.y.push_back(v.mean_dice);
  }
  return svg_plot({s}, title, "epoch", "validation Dice");
}

void render_report(const std::vector<ExperimentRecord>& records, const fs::path& out,
                   const std::vector<std::pair<std::string, std::string>>& pairs) {
  if (records.empty()) throw ReportError("report needs at least one experiment");
  fs::create_directories(out);
  write_text(out / "report.csv", aggregate_csv(records));
  write_text(out / "report.txt", aggregate_table(records));
  for (const auto& r : records) {
    write_text(out / (r.name + "_metrics.csv"), r.metrics.to_csv());
    if (!r.history.steps.empty()) write_text(out / (r.name + "_loss.svg"), loss_plot_svg(r.history, r.name + " losses"));
    if (!r.history.validation.empty()) {
      write_text(out / (r.name + "_validation.svg"), validation_plot_svg(r.history, r.name + " validation"));
    }
  }
  if (!pairs.empty()) {
    std::vector<Comparison> rows;
    auto find = [&](const std::string& name) -> const ExperimentRecord& {
      for (const auto& r : records) {
        if (r.name == name) return r;
      }
      throw ReportError("comparison names unknown experiment '" + name + "'");
    };
    for (const auto& [a, b] : pairs) rows.push_back(compare(find(a), find(b)));
    write_text(out / "comparisons.csv", comparisons_csv(rows));
  }
}

}  // namespace sasan::runner
