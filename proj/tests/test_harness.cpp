#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "mdenet/checkpoint.hpp"
#include "mdenet/errors.hpp"
#include "mdenet/plot.hpp"
#include "mdenet/train.hpp"

using namespace mdenet;
using mdenet::testing::tiny_config;
using mdenet::testing::tiny_spec;
namespace fs = std::filesystem;

namespace {

DatasetSplit tiny_split(int known = 3, double separation = 8.0, std::uint64_t seed = 5) {
  auto spec = tiny_spec(known);
  spec.cluster_separation = separation;
  return split_known_unknown(gen_synthetic(spec, seed), known, 0.8, seed);
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("mdenet_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json checkpoint_manifest(const fs::path& p) {
  const auto bytes = slurp(p);
  std::uint64_t len = 0;
  for (int i = 7; i >= 0; --i) len = (len << 8) | static_cast<unsigned char>(bytes[8 + i]);
  return nlohmann::json::parse(bytes.substr(16, len));
}

}  // namespace

TEST_CASE("config JSON round-trip and hash") {
  auto c = tiny_config();
  c.alpha = 0.2;
  c.threshold_mode = ThresholdMode::global;
  c.modalities = Modalities::image;
  auto back = train_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  CHECK(to_json(back) == to_json(c));
  CHECK(config_hash(back) == config_hash(c));
  CHECK(config_hash(c).size() == 16);
  back.seed += 1;
  CHECK(config_hash(back) != config_hash(c));

  auto desk = mdenet::testing::desk_config();
  CHECK(desk.learning_rate == 1e-4);
  CHECK(desk.batch_size == 32);
  CHECK_NOTHROW(desk.validate());

  CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"epochs", "many"}}), ParseError);
  auto bad = tiny_config();
  bad.batch_size = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("Adam reaches the minimizer of a 1-d quadratic") {
  auto x = parameter({1, 1}, {0.0});
  auto target = constant({1, 1}, {3.0});
  Adam opt({x}, 0.01);
  int steps = 0;
  for (; steps < 5000; ++steps) {
    opt.zero_grad();
    auto d = sub(x, target);
    backward(matmul(d, d));
    opt.step();
  }
  CHECK(std::abs(x->value[0] - 3.0) <= 1e-3);
  CHECK(opt.steps() == 5000);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  auto split = tiny_split();
  auto c = tiny_config();
  c.learning_rate = 0.0;
  c.track_metrics = false;
  auto fz = Featurizer::fit(split.train_known, c.height, c.width, c.max_length, c.min_count);
  auto fresh = Model::make(c.model_config(fz.vocab.size()), c.seed);
  auto before = fresh.registry();

  std::vector<double> rho_by_run;
  for (std::size_t epochs : {1u, 3u}) {
    c.epochs = epochs;
    auto run = train(c, split);
    auto after = run.trained.model.registry();
    REQUIRE(after.params.size() == before.params.size());
    for (std::size_t i = 0; i < after.params.size(); ++i) {
      const auto& [name, v] = after.params[i];
      if (name == "sphere.rho") continue;  // set from the first batch, then only clamped
      CAPTURE(name);
      CHECK(v->value == before.params[i].second->value);
    }
    rho_by_run.push_back(run.trained.model.sphere.radius());
  }
  CHECK(rho_by_run[0] == rho_by_run[1]);
}

TEST_CASE("training history shape and loss decrease on separable data") {
  auto split = tiny_split(5, 8.0);
  auto c = tiny_config(5);
  c.epochs = 20;
  c.learning_rate = 1e-3;
  auto run = train(c, split);
  const auto per_epoch = (split.train_known.size() + c.batch_size - 1) / c.batch_size;
  CHECK(run.history.steps.size() == c.epochs * per_epoch);
  REQUIRE(run.history.epochs.size() == c.epochs);
  CHECK(run.history.epochs[19].mean_total < run.history.epochs[0].mean_total);
  for (const auto& e : run.history.epochs) {
    CHECK(e.cls_acc.has_value());
    CHECK(e.det_acc.has_value());
  }
  for (const auto& s : run.history.steps) {
    CHECK(s.rho >= 0.0);
    CHECK(s.sub_norm <= c.norm_cap + 1e-12);
  }
}

TEST_CASE("training preconditions and failures") {
  auto split = tiny_split();
  auto c = tiny_config();
  c.known_families = 4;
  CHECK_THROWS_AS(train(c, split), ConfigError);

  c = tiny_config();
  c.learning_rate = 1e200;
  try {
    train(c, split);
    FAIL("expected a training error");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
    CHECK(std::string(e.what()).find("cls=") != std::string::npos);
  }

  c = tiny_config();
  int calls = 0;
  auto run = train(c, split, [&](const StepRecord&) { return ++calls < 3; });
  CHECK(run.history.steps.size() == 3);
}

TEST_CASE("same seed twice gives identical results") {
  auto split = tiny_split();
  auto c = tiny_config();
  auto a = train(c, split);
  auto b = train(c, split);
  CHECK(loss_csv(a.history) == loss_csv(b.history));
  auto ra = evaluate(a.trained, split);
  auto rb = evaluate(b.trained, split);
  CHECK(ra.metrics_json().dump() == rb.metrics_json().dump());

  c.seed += 1;
  auto other = train(c, split);
  CHECK(loss_csv(other.history) != loss_csv(a.history));
}

TEST_CASE("evaluation report identities") {
  auto split = tiny_split();
  auto run = train(tiny_config(), split);
  auto rep = evaluate(run.trained, split);
  REQUIRE(rep.detection.has_value());
  CHECK(rep.detection->det_acc == (rep.detection->tpr + rep.detection->tnr) / 2.0);
  long long trace = 0, total = 0;
  for (std::size_t r = 0; r < rep.confusion.size(); ++r)
    for (std::size_t c = 0; c < rep.confusion.size(); ++c) {
      total += rep.confusion[r][c];
      trace += r == c ? rep.confusion[r][c] : 0;
    }
  CHECK(total == static_cast<long long>(split.test_known.size()));
  CHECK(static_cast<double>(trace) / static_cast<double>(total) == rep.cls_acc);
  CHECK(run.trained.centroids.has_value());
  CHECK(run.trained.thresholds.has_value());

  auto again = evaluate(run.trained, split);
  CHECK(again.metrics_json().dump() == rep.metrics_json().dump());
  CHECK(again.confusion_csv() == rep.confusion_csv());

  auto j = rep.metrics_json();
  REQUIRE(j.contains("probability_baseline"));
  const double dp = j["probability_baseline"]["best_delta_p"].get<double>();
  CHECK(dp >= 0.01);
  CHECK(dp <= 0.99);
}

TEST_CASE("probability baseline sweep") {
  Embeddings known = {{0.9, 0.1}, {0.7, 0.3}, {0.55, 0.45}};
  Embeddings unknown = {{0.5, 0.5}, {0.6, 0.4}};
  auto s = sweep_probability_baseline(known, unknown);
  CHECK(s.known_rate.size() == 99);
  // Every delta_p in [0.60, 0.69] rejects both unknowns and keeps two knowns.
  CHECK(s.best.det_acc == doctest::Approx((2.0 / 3.0 + 1.0) / 2.0));
  CHECK(s.best_delta_p == doctest::Approx(0.6));
  for (std::size_t i = 1; i < s.known_rate.size(); ++i) CHECK(s.known_rate[i].second <= s.known_rate[i - 1].second);
}

TEST_CASE("grid search") {
  auto pairs = admissible_weight_pairs();
  CHECK(pairs.size() == 36);
  for (const auto& [a, b] : pairs) {
    CHECK_FALSE((std::abs(a - 0.5) < 1e-12 && std::abs(b - 0.5) < 1e-12));
    CHECK(1.0 - a - b >= 0.1 - 1e-12);
  }

  auto split = tiny_split();
  auto c = tiny_config();
  int seen = 0;
  auto grid = grid_search(c, split, 1, [&](const GridCell&) { ++seen; });
  CHECK(seen == 36);
  REQUIRE(grid.cells.size() == 36);
  auto panels = grid.panels();
  std::size_t filled = 0;
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t k = 0; k < 8; ++k) {
      const auto& m = panels["mean"][r][k];
      if (m.is_null()) continue;
      ++filled;
      CHECK(m.get<double>() ==
            (panels["cls_acc"][r][k].get<double>() + panels["det_acc"][r][k].get<double>()) / 2.0);
    }
  CHECK(filled == 36);

  std::istringstream csv(grid.csv());
  std::string line;
  std::getline(csv, line);
  CHECK(line == "alpha,beta,cls_acc,det_acc,mean");
  for (const auto& cell : grid.cells) {
    REQUIRE(std::getline(csv, line));
    double a, b, cls, det, mean;
    REQUIRE(std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%lf", &a, &b, &cls, &det, &mean) == 5);
    CHECK(a == cell.alpha);
    CHECK(b == cell.beta);
    CHECK(cls == cell.cls_acc);
    CHECK(det == cell.det_acc);
    CHECK(mean == cell.mean);
  }
  CHECK(grid_heatmap_svg(panels).find("<svg") == 0);
}

TEST_CASE("ablation") {
  auto split = tiny_split();
  auto c = tiny_config();
  c.epochs = 1;
  auto rows = ablate(c, split);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].modalities == Modalities::image);
  CHECK(rows[1].modalities == Modalities::sentence);
  CHECK(rows[2].modalities == Modalities::both);
  CHECK(ablation_csv(rows).rfind("modalities,cls_acc,tpr,tnr,det_acc\nimage,", 0) == 0);

  auto plain = split;
  for (auto* part : {&plain.train_known, &plain.test_known, &plain.test_unknown})
    for (auto& r : *part) r.tokens.reset();
  CHECK_THROWS_AS(ablate(c, plain), ConfigError);
  c.modalities = Modalities::sentence;
  CHECK_THROWS_AS(train(c, plain), ConfigError);

  c.modalities = Modalities::image;
  auto run = train(c, split);
  CHECK_FALSE(run.trained.model.textual.has_value());
  auto dir = scratch("ablation");
  save_checkpoint(run.trained, (dir / "image.ckpt").string());
  const auto manifest = checkpoint_manifest(dir / "image.ckpt");
  for (const auto& t : manifest["tensors"])
    CHECK(t["name"].get<std::string>().rfind("textual", 0) == std::string::npos);
}

TEST_CASE("checkpoint round-trip reproduces evaluation exactly") {
  auto split = tiny_split();
  auto run = train(tiny_config(), split);
  auto rep = evaluate(run.trained, split);
  auto dir = scratch("checkpoint");
  const auto path = (dir / "model.ckpt").string();
  save_checkpoint(run.trained, path);
  auto loaded = load_checkpoint(path);
  CHECK(loaded.family_names == run.trained.family_names);
  CHECK(config_hash(loaded.config) == config_hash(run.trained.config));
  auto a = run.trained.model.registry(), b = loaded.model.registry();
  REQUIRE(a.params.size() == b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) CHECK(a.params[i].second->value == b.params[i].second->value);
  REQUIRE(loaded.centroids.has_value());
  CHECK(loaded.centroids->centroids == run.trained.centroids->centroids);

  auto rep2 = evaluate(loaded, split);
  CHECK(rep2.metrics_json().dump() == rep.metrics_json().dump());

  auto manifest = checkpoint_manifest(path);
  CHECK(manifest["format"] == kCheckpointFormat);
  CHECK(manifest["config_hash"] == config_hash(run.trained.config));

  {
    std::ofstream out(dir / "junk.ckpt", std::ios::binary);
    out << "NOTACHECKPOINT";
  }
  CHECK_THROWS_AS(load_checkpoint((dir / "junk.ckpt").string()), ParseError);
  const auto bytes = slurp(path);
  {
    std::ofstream out(dir / "short.ckpt", std::ios::binary);
    out << bytes.substr(0, bytes.size() - 9);
  }
  CHECK_THROWS_AS(load_checkpoint((dir / "short.ckpt").string()), ParseError);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), IoError);
}

TEST_CASE("report emission") {
  auto split = tiny_split();
  auto run = train(tiny_config(), split);
  auto rep = evaluate(run.trained, split);
  auto dir = scratch("report");
  auto files = emit_report(run.history, rep, dir.string());
  for (const char* name : {"metrics.json", "loss.csv", "confusion.csv", "history.json"})
    CHECK(fs::exists(dir / name));
  CHECK(files.size() == 4);

  const auto text = slurp(dir / "metrics.json");
  CHECK(nlohmann::json::parse(text).dump(2) + "\n" == text);
  CHECK(nlohmann::json::parse(text) == rep.metrics_json());
  CHECK(slurp(dir / "loss.csv") == loss_csv(run.history));
  CHECK(loss_curve_svg(slurp(dir / "loss.csv")) == loss_curve_svg(run.history));

  const auto blocker = dir / "blocker";
  std::ofstream(blocker) << "x";
  CHECK_THROWS_AS(emit_report(run.history, rep, (blocker / "sub").string()), IoError);
}
