#include "doctest.h"

#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "fixtures.hpp"
#include "sasan/config.hpp"
#include "sasan/container.hpp"
#include "sasan/error.hpp"
#include "sasan/experiment.hpp"
#include "sasan/report.hpp"

using namespace sasan;
namespace fs = std::filesystem;
using sasan::testing::scratch_dir;

namespace {

int run_cli(const std::string& args, const fs::path& log = {}) {
  std::string cmd = std::string(SASAN_CLI_PATH) + " " + args;
  cmd += log.empty() ? " > /dev/null 2>&1" : " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::uint32_t header_length(const std::vector<std::uint8_t>& bytes) {
  return static_cast<std::uint32_t>(bytes[6]) | static_cast<std::uint32_t>(bytes[7]) << 8 |
         static_cast<std::uint32_t>(bytes[8]) << 16 | static_cast<std::uint32_t>(bytes[9]) << 24;
}

std::string format_error(const std::vector<std::uint8_t>& bytes) {
  try {
    io::decode_container(bytes);
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

metricore::MetricsReport report_with(std::vector<std::vector<double>> dice, std::vector<int> classes = {1, 2}) {
  metricore::MetricsReport r;
  r.classes = std::move(classes);
  for (std::size_t i = 0; i < dice.front().size(); ++i) r.sample_ids.push_back(std::to_string(i));
  r.dice = dice;
  for (auto& col : dice) {
    for (auto& v : col) v = 10.0 * (1.0 - v);
  }
  r.assd = dice;
  return r;
}

const char* kTinyExperiment =
    "# short run for tests\n"
    "image_size = 32\n"
    "epochs_total = 2\n"
    "epochs_constant_lr = 1\n"
    "max_steps_per_epoch = 2\n"
    "checkpoint_every = 0\n"
    "segmenter_epochs = 1\n";

const char* kTinyData = "image_size = 32\nnum_train = 8\nnum_test = 4\n";

}  // namespace

// ------------------------------------------------------------------ container

TEST_CASE("empty container") {
  const auto bytes = io::encode_container({});
  CHECK(std::memcmp(bytes.data(), "SASN", 4) == 0);
  const auto back = io::decode_container(bytes);
  CHECK(back.tensors.empty());
}

TEST_CASE("payload size follows shape and dtype") {
  io::Container c;
  c.add("x", io::RawTensor::from_f32({3, 4, 5}, std::vector<float>(60, 1.5f)));
  const auto bytes = io::encode_container(c);
  CHECK(bytes.size() == 10 + header_length(bytes) + 3 * 4 * 5 * 4);
  // Little-endian 1.5f = 0x3FC00000.
  const auto payload = bytes.size() - 240;
  CHECK(bytes[payload] == 0x00);
  CHECK(bytes[payload + 2] == 0xC0);
  CHECK(bytes[payload + 3] == 0x3F);
  CHECK(bytes[4] == io::kContainerVersion);
  CHECK(bytes[5] == 0);
}

TEST_CASE("non-finite payloads round trip bit exactly") {
  const double nan_payload = std::bit_cast<double>(0x7FF8DEADBEEF0001ULL);
  std::vector<double> f64{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::infinity(),
                          -std::numeric_limits<double>::infinity(), -0.0, nan_payload, 1e-310};
  std::vector<float> f32{std::numeric_limits<float>::quiet_NaN(), -std::numeric_limits<float>::infinity(), 0.1f};
  io::Container c;
  c.add("d", io::RawTensor::from_f64({2, 3}, f64));
  c.add("f", io::RawTensor::from_f32({3}, f32));
  c.add("u", io::RawTensor::from_u8({2, 2}, {0, 1, 254, 255}));
  c.metadata["note"] = "hello";
  const auto dir = scratch_dir("container");
  io::write_container(dir / "c.sasn", c);
  const auto back = io::read_container(dir / "c.sasn");
  CHECK((back.tensors == c.tensors));
  CHECK(back.metadata["note"] == "hello");
  const auto d = back.get("d").as_f64();
  for (std::size_t i = 0; i < f64.size(); ++i) {
    CHECK(std::bit_cast<std::uint64_t>(d[i]) == std::bit_cast<std::uint64_t>(f64[i]));
  }
}

TEST_CASE("container rejects malformed data naming the field") {
  io::Container c;
  c.add("x", io::RawTensor::from_f32({2}, {1.0f, 2.0f}));
  const auto good = io::encode_container(c);

  auto bad = good;
  bad[0] = 'X';
  CHECK(format_error(bad).find("magic") != std::string::npos);
  bad = good;
  bad[4] = 99;
  CHECK(format_error(bad).find("version") != std::string::npos);
  bad = good;
  bad.pop_back();
  CHECK(format_error(bad).find("'x'") != std::string::npos);
  bad = good;
  bad.push_back(0);
  CHECK_FALSE(format_error(bad).empty());
  bad = good;
  bad[10] = '!';
  CHECK(format_error(bad).find("header") != std::string::npos);
  CHECK_FALSE(format_error({'S', 'A'}).empty());

  CHECK_THROWS_AS(c.add("x", io::RawTensor::from_u8({1}, {1})), ContractError);
  CHECK_THROWS_AS(c.add(io::kMetadataKey, io::RawTensor::from_u8({1}, {1})), ContractError);
  CHECK_THROWS_AS(io::read_container("/nonexistent/file.sasn"), std::exception);
}

// --------------------------------------------------------------------- config

TEST_CASE("key-value config parsing") {
  const auto kv = io::parse_key_values("# comment\n a = 1 \nb=two # trailing\n\n");
  CHECK(kv.at("a") == "1");
  CHECK(kv.at("b") == "two");
  CHECK(io::parse_key_values(io::format_key_values(kv)) == kv);
  CHECK_THROWS_AS(io::parse_key_values("a = 1\na = 2\n"), ConfigError);
  CHECK_THROWS_AS(io::parse_key_values("just words\n"), ConfigError);
  try {
    io::parse_key_values("a = 1\n\noops\n");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find('3') != std::string::npos);
  }
}

TEST_CASE("experiment spec round trip and variant registry") {
  runner::ExperimentSpec spec;
  spec.name = "x";
  spec.mode = runner::Mode::adapt_b_to_a;
  spec.segmenter.epochs = 7;
  spec.train.weights.aux = 0.5;
  const auto back = runner::ExperimentSpec::from_key_values(spec.to_key_values());
  CHECK(back.to_key_values() == spec.to_key_values());
  CHECK(runner::to_string(runner::Mode::adapt_a_to_b) == "adapt_A_to_B");
  CHECK_THROWS_AS(runner::mode_from_string("sideways"), ConfigError);

  const std::vector<std::string> expected{"final",  "no_seg_disc", "no_aux", "no_reg",   "attn16",
                                          "lowres", "reg5",        "aux6",   "with_aug", "no_aug"};
  CHECK(runner::registered_variants() == expected);
  trainloop::TrainConfig base;
  CHECK(runner::plan_variant("attn16", base).train.num_attention == 16);
  CHECK(runner::plan_variant("lowres", base).train.image_size == 32);
  CHECK(runner::plan_variant("reg5", base).train.weights.reg == 5.0);
  CHECK(runner::plan_variant("aux6", base).train.weights.aux == 6.0);
  CHECK(runner::plan_variant("no_seg_disc", base).train.flags.no_seg_disc);
  CHECK(runner::plan_variant("no_reg", base).train.flags.no_reg);
  CHECK(runner::plan_variant("no_aux", base).train.flags.no_aux);
  CHECK(runner::plan_variant("with_aug", base).fake_augmented);
  CHECK_FALSE(runner::plan_variant("no_aug", base).adapt);
  CHECK_THROWS_AS(runner::plan_variant("bogus", base), ConfigError);
}

TEST_CASE("dataset orientation swaps the modalities") {
  const auto data = sasan::testing::tiny_dataset(32, 2, 1);
  const auto swapped = runner::orient(data, runner::Mode::adapt_b_to_a);
  CHECK((swapped.images_a == data.images_b));
  CHECK((swapped.images_b == data.images_a));
  CHECK(runner::orient(data, runner::Mode::adapt_a_to_b) == data);
}

// --------------------------------------------------------------------- report

TEST_CASE("aggregate tables and comparisons") {
  runner::ExperimentRecord a{"final", report_with({{0.8, 0.7, 0.9}, {0.6, 0.5, 0.55}}), {}};
  runner::ExperimentRecord b{"no_reg", report_with({{0.5, 0.4, 0.6}, {0.3, 0.35, 0.2}}), {}};
  const auto csv = runner::aggregate_csv({a, b});
  std::istringstream lines(csv);
  std::string header, row;
  std::getline(lines, header);
  CHECK(header == "experiment,dice_1,dice_2,dice_mean,assd_1,assd_2,assd_mean");
  std::vector<std::string> names;
  while (std::getline(lines, row)) {
    std::vector<double> cells;
    std::stringstream ss(row);
    std::string cell;
    std::getline(ss, cell, ',');
    names.push_back(cell);
    while (std::getline(ss, cell, ',')) cells.push_back(std::stod(cell));
    REQUIRE(cells.size() == 6);
    CHECK(std::abs(cells[2] - (cells[0] + cells[1]) / 2) < 1e-9);
    CHECK(std::abs(cells[5] - (cells[3] + cells[4]) / 2) < 1e-9);
  }
  CHECK(names == std::vector<std::string>{"final", "no_reg"});
  CHECK(runner::aggregate_table({a, b}).find("±") != std::string::npos);

  const auto same = runner::compare(a, a);
  CHECK(same.welch.p_two_sided == doctest::Approx(1.0).epsilon(1e-12));
  const auto diff = runner::compare(a, b);
  CHECK(diff.welch.p_two_sided < 0.05);
  CHECK(diff.mean_first > diff.mean_second);

  runner::ExperimentRecord c{"other", report_with({{0.5, 0.4, 0.6}}, {1}), {}};
  CHECK_THROWS_AS(runner::compare(a, c), ReportError);

  const auto one = report_with({{0.8, 0.7}, {0.6, 0.5}});
  const auto metrics_csv = one.to_csv();
  CHECK(std::count(metrics_csv.begin(), metrics_csv.end(), '\n') == 4);  // header + 2 classes + Mean

  const auto dir = scratch_dir("report");
  runner::render_report({a, b}, dir, {{"final", "no_reg"}});
  CHECK(fs::exists(dir / "report.csv"));
  CHECK(fs::exists(dir / "report.txt"));
  CHECK(fs::exists(dir / "comparisons.csv"));
  CHECK_THROWS_AS(runner::render_report({a, c}, scratch_dir("report_bad"), {{"final", "other"}}), ReportError);
}

TEST_CASE("loss plot lists every term") {
  trainloop::History h;
  for (int s = 0; s < 3; ++s) {
    trainloop::HistoryRow r;
    r.step = s;
    r.generator_terms = {{"cycle_a", 1.0 / (s + 1)}, {"reg_a", 0.5}};
    r.discriminator_terms = {{"disc_img_a", 0.25}};
    h.steps.push_back(r);
  }
  const auto svg = runner::loss_plot_svg(h, "t");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("cycle_a") != std::string::npos);
  CHECK(svg.find("disc_img_a") != std::string::npos);
}

TEST_CASE("provenance digests") {
  CHECK(runner::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const auto dir = scratch_dir("digest");
  write(dir / "a.txt", "abc");
  CHECK(runner::sha256_file(dir / "a.txt") == runner::sha256_hex("abc"));
  const auto before = runner::sha256_tree(dir);
  write(dir / "b.txt", "x");
  CHECK(runner::sha256_tree(dir) != before);
  {
    runner::DirectoryLock lock(dir);
    CHECK_THROWS(runner::DirectoryLock{dir});
  }
  CHECK_NOTHROW(runner::DirectoryLock{dir});
}

// ------------------------------------------------------------------------ cli

TEST_CASE("cli usage errors") {
  CHECK(run_cli("") == 2);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("gen-data --no-such-flag") == 2);
  CHECK(run_cli("--help") == 0);
}

TEST_CASE("cli end to end") {
  const auto root = scratch_dir("cli");
  write(root / "data.cfg", kTinyData);
  write(root / "exp.cfg", kTinyExperiment);
  const auto data = root / "data";
  const auto log = root / "log.txt";

  REQUIRE(run_cli("gen-data --seed 7 --config " + (root / "data.cfg").string() + " --out " + data.string()) == 0);
  REQUIRE(fs::exists(data / "manifest.json"));
  REQUIRE(fs::exists(data / "run.json"));
  const auto digest = runner::sha256_tree(data);
  CHECK(run_cli("gen-data --seed 7 --config " + (root / "data.cfg").string() + " --out " + data.string(), log) == 0);
  CHECK(slurp(log).find("up to date") != std::string::npos);
  CHECK(runner::sha256_tree(data) == digest);

  const auto run = nlohmann::json::parse(slurp(data / "run.json"));
  CHECK(run.at("seed") == 7);
  CHECK(run.contains("code_version"));
  CHECK(run.contains("config"));
  CHECK(run.contains("inputs"));

  SUBCASE("missing inputs and bad devices exit with 1") {
    CHECK(run_cli("train --data " + (root / "nowhere").string() + " --out " + (root / "t").string(), log) == 1);
    CHECK(slurp(log).find("nowhere") != std::string::npos);
    CHECK(run_cli("gen-data --out " + (root / "d2").string() + " --device cuda:0", log) == 1);
    CHECK(run_cli("translate --checkpoint " + (root / "none.sasn").string() + " --input x --out y", log) == 1);
    write(root / "bad.cfg", "epochs_total = -3\n");
    CHECK(run_cli("train --data " + data.string() + " --config " + (root / "bad.cfg").string() + " --out " +
                  (root / "t").string(), log) == 1);
  }

  SUBCASE("train, translate, evaluate and visualize") {
    const auto out = root / "train";
    REQUIRE(run_cli("train --data " + data.string() + " --config " + (root / "exp.cfg").string() + " --out " +
                    out.string()) == 0);
    REQUIRE(fs::exists(out / "final.sasn"));
    CHECK(fs::exists(out / "history.csv"));
    CHECK(fs::exists(out / "run.json"));
    CHECK_FALSE(fs::exists(out / ".lock"));

    // A held lock makes a second invocation fail.
    write(out / ".lock", "");
    CHECK(run_cli("train --data " + data.string() + " --config " + (root / "exp.cfg").string() + " --out " +
                  out.string()) == 1);
    fs::remove(out / ".lock");

    const auto bundle = runner::load_dataset(data);
    io::Container images, labels;
    images.add("batch", trainloop::to_raw(trainloop::images_to_tensor(bundle.images_b, {8, 9, 10})));
    images.add("single", trainloop::to_raw(trainloop::images_to_tensor(bundle.images_b, {11})[0][0]));
    labels.add("batch", trainloop::to_raw(trainloop::labels_to_tensor(bundle.labels, {8, 9, 10}).to(torch::kUInt8)));
    labels.add("single", trainloop::to_raw(trainloop::labels_to_tensor(bundle.labels, {11}).to(torch::kUInt8)));
    io::write_container(root / "images.sasn", images);
    io::write_container(root / "labels.sasn", labels);

    REQUIRE(run_cli("translate --checkpoint " + (out / "final.sasn").string() + " --direction ba --input " +
                    (root / "images.sasn").string() + " --out " + (root / "fake.sasn").string()) == 0);
    const auto fake = io::read_container(root / "fake.sasn");
    REQUIRE(fake.tensors.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(fake.tensors[i].first == images.tensors[i].first);
      CHECK(fake.tensors[i].second.shape == images.tensors[i].second.shape);
      CHECK(fake.tensors[i].second.dtype == images.tensors[i].second.dtype);
      CHECK_FALSE(fake.tensors[i].second.bytes == images.tensors[i].second.bytes);
    }

    REQUIRE(run_cli("train --segmenter-only --data " + data.string() + " --config " + (root / "exp.cfg").string() +
                    " --out " + (root / "seg").string()) == 0);
    REQUIRE(run_cli("eval-seg --checkpoint " + (root / "seg" / "evaluator.sasn").string() + " --input " +
                    (root / "fake.sasn").string() + " --labels " + (root / "labels.sasn").string() + " --out " +
                    (root / "scores").string()) == 0);
    const auto m = metricore::MetricsReport::from_json(nlohmann::json::parse(slurp(root / "scores" / "metrics.json")));
    CHECK(m.dice.front().size() == 4);

    REQUIRE(run_cli("eval-fidelity --input " + (root / "fake.sasn").string() + " --reference " +
                    (root / "images.sasn").string() + " --out " + (root / "fid").string()) == 0);
    const auto fid = nlohmann::json::parse(slurp(root / "fid" / "fidelity.json"));
    CHECK(fid.at("fidelity_summary").at("ssim").at("n") == 4);

    REQUIRE(run_cli("attn-grid --checkpoint " + (out / "final.sasn").string() + " --input " +
                    (root / "images.sasn").string() + " --index 1 --out " + (root / "grid.pgm").string()) == 0);
    CHECK(slurp(root / "grid.pgm").rfind("P5", 0) == 0);
  }

  SUBCASE("ablate then report") {
    const auto out = root / "ablation";
    REQUIRE(run_cli("ablate --data " + data.string() + " --config " + (root / "exp.cfg").string() +
                    " --variants no_reg,final --out " + out.string()) == 0);
    for (const char* v : {"no_reg", "final"}) {
      CHECK(fs::exists(out / v / "metrics.json"));
      CHECK(fs::exists(out / v / "final.sasn"));
      CHECK(fs::exists(out / v / "history.csv"));
    }
    CHECK(fs::exists(out / "evaluator.sasn"));
    CHECK(fs::exists(out / "no_adaptation.json"));
    const auto hist = trainloop::History::from_csv(slurp(out / "no_reg" / "history.csv"));
    for (const auto& r : hist.steps) CHECK(r.term("reg_a") + r.term("reg_b") == 0.0);

    REQUIRE(run_cli("report --out " + out.string() + " --compare final:no_reg") == 0);
    std::istringstream csv(slurp(out / "report" / "report.csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line.rfind("experiment,dice_1,dice_2,dice_3,dice_mean", 0) == 0);
    std::vector<std::string> rows;
    while (std::getline(csv, line)) rows.push_back(line.substr(0, line.find(',')));
    CHECK(rows == std::vector<std::string>{"no_reg", "final"});
    CHECK(fs::exists(out / "report" / "comparisons.csv"));
    CHECK(run_cli("report --out " + out.string() + " --variants final,missing", log) == 1);
  }
}
