// mdenet command line: synth, train, eval, detect, grid, ablate, plot.
//
// Outputs go under $MDENET_OUTPUT_ROOT (default ./runs), one directory per
// run named <config-hash>-seed<seed>.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "mdenet/checkpoint.hpp"
#include "mdenet/errors.hpp"
#include "mdenet/plot.hpp"
#include "mdenet/train.hpp"

namespace fs = std::filesystem;
using namespace mdenet;
using nlohmann::json;

namespace {

struct Overrides {
  std::optional<double> alpha, beta, lambda, lr;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> threshold_mode, modalities;
  std::optional<std::size_t> epochs, batch_size;

  void attach(CLI::App* cmd) {
    cmd->add_option("--alpha", alpha, "classification loss weight");
    cmd->add_option("--beta", beta, "discriminative loss weight");
    cmd->add_option("--lambda", lambda, "sub-space weight penalty");
    cmd->add_option("--seed", seed, "run seed (also drives the split)");
    cmd->add_option("--threshold-mode", threshold_mode, "global | per_family");
    cmd->add_option("--modalities", modalities, "image | sentence | both");
    cmd->add_option("--epochs", epochs);
    cmd->add_option("--lr", lr, "learning rate");
    cmd->add_option("--batch-size", batch_size);
  }

  void apply(TrainConfig& c) const {
    if (alpha) c.alpha = *alpha;
    if (beta) c.beta = *beta;
    if (lambda) c.lambda = *lambda;
    if (seed) c.seed = *seed;
    if (threshold_mode) c.threshold_mode = threshold_mode_from_string(*threshold_mode);
    if (modalities) c.modalities = modalities_from_string(*modalities);
    if (epochs) c.epochs = *epochs;
    if (lr) c.learning_rate = *lr;
    if (batch_size) c.batch_size = *batch_size;
  }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw IoError("cannot write " + path.string());
}

json read_json(const std::string& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

TrainConfig load_config(const std::string& path, const Overrides& ov) {
  TrainConfig c = path.empty() ? TrainConfig{} : train_config_from_json(read_json(path));
  ov.apply(c);
  c.validate();
  return c;
}

fs::path run_dir(const TrainConfig& c) {
  const char* root = std::getenv("MDENET_OUTPUT_ROOT");
  fs::path dir = fs::path(root && *root ? root : "runs") / (config_hash(c) + "-seed" + std::to_string(c.seed));
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  return dir;
}

DatasetSplit split_for(const TrainConfig& c, const std::string& data) {
  return split_known_unknown(load_jsonl(data), c.known_families, c.train_fraction, c.seed);
}

void print_summary(const EvalReport& rep) {
  std::printf("cls_acc %.4f", rep.cls_acc);
  if (rep.detection)
    std::printf("  tpr %.4f  tnr %.4f  det_acc %.4f", rep.detection->tpr, rep.detection->tnr, rep.detection->det_acc);
  if (rep.baseline) std::printf("  baseline det_acc %.4f (delta_p %.2f)", rep.baseline->best.det_acc, rep.baseline->best_delta_p);
  std::printf("\n");
}

int cmd_synth(double separation, double agreement, int known, int unknown, int samples, std::uint64_t seed,
              const std::string& out) {
  SyntheticSpec spec;
  spec.cluster_separation = separation;
  spec.modality_agreement = agreement;
  spec.known_families = known;
  spec.unknown_families = unknown;
  spec.samples_per_family = samples;
  auto ds = gen_synthetic(spec, seed);
  write_jsonl(ds, out);
  json meta = to_json(spec);
  meta["seed"] = seed;
  write_file(out + ".spec.json", meta.dump(2) + "\n");
  std::printf("%s: %zu records, %zu families\n", out.c_str(), ds.records.size(), ds.family_count());
  return 0;
}

int cmd_train(const TrainConfig& c, const std::string& data) {
  auto split = split_for(c, data);
  auto dir = run_dir(c);
  write_file(dir / "config.json", to_json(c).dump(2) + "\n");
  write_file(dir / "split.json", split_manifest(split).dump() + "\n");
  auto run = train(c, split, [](const StepRecord& r) {
    if (r.step % 50 == 0) std::fprintf(stderr, "epoch %zu step %zu total %.5f\n", r.epoch, r.step, r.total);
    return true;
  });
  auto rep = evaluate(run.trained, split);
  emit_report(run.history, rep, dir.string());
  save_checkpoint(run.trained, (dir / "model.ckpt").string());
  print_summary(rep);
  std::printf("%s\n", dir.string().c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::optional<std::string>& mode) {
  auto trained = load_checkpoint(ckpt);
  if (mode) trained.config.threshold_mode = threshold_mode_from_string(*mode);
  auto split = split_for(trained.config, data);
  auto rep = evaluate(trained, split);
  auto dir = run_dir(trained.config);
  write_file(dir / "metrics.json", rep.metrics_json().dump(2) + "\n");
  write_file(dir / "confusion.csv", rep.confusion_csv());
  print_summary(rep);
  std::printf("%s\n", dir.string().c_str());
  return 0;
}

int cmd_detect(const std::string& ckpt, const std::string& data, const std::string& out) {
  auto trained = load_checkpoint(ckpt);
  if (!trained.centroids || !trained.thresholds)
    throw InputError("checkpoint " + ckpt + " has no fitted centroid/threshold tables; run eval first");
  auto ds = load_jsonl(data);
  auto set = trained.featurizer.prepare(ds.records);
  auto inf = infer(trained.model, set);
  std::ostringstream os;
  std::size_t unknown = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto v = detect(inf.z[i], inf.probs[i], *trained.centroids, *trained.thresholds);
    unknown += !v.known;
    json j{{"index", i},
           {"verdict", v.known ? "Known" : "Unknown"},
           {"family", v.known ? json(trained.family_names.at(static_cast<std::size_t>(v.family))) : json(nullptr)},
           {"tentative_family", trained.family_names.at(static_cast<std::size_t>(v.tentative_family))},
           {"distance", v.distance}};
    os << j.dump() << '\n';
  }
  if (out.empty() || out == "-") {
    std::cout << os.str();
  } else {
    write_file(out, os.str());
  }
  std::fprintf(stderr, "%zu samples, %zu Unknown\n", set.size(), unknown);
  return 0;
}

int cmd_grid(const TrainConfig& c, const std::string& data, std::size_t epochs_per_cell) {
  auto split = split_for(c, data);
  auto dir = run_dir(c);
  auto grid = grid_search(c, split, epochs_per_cell, [](const GridCell& g) {
    std::fprintf(stderr, "alpha %.1f beta %.1f cls %.4f det %.4f\n", g.alpha, g.beta, g.cls_acc, g.det_acc);
  });
  write_file(dir / "grid.csv", grid.csv());
  write_file(dir / "grid_panels.json", grid.panels().dump(2) + "\n");
  std::printf("%s\n", dir.string().c_str());
  return 0;
}

int cmd_ablate(const TrainConfig& c, const std::string& data) {
  auto split = split_for(c, data);
  auto dir = run_dir(c);
  auto rows = ablate(c, split);
  const auto csv = ablation_csv(rows);
  write_file(dir / "ablation.csv", csv);
  std::printf("%s%s\n", csv.c_str(), dir.string().c_str());
  return 0;
}

int cmd_plot(const std::string& dir) {
  int made = 0;
  if (fs::exists(fs::path(dir) / "loss.csv")) {
    write_file(fs::path(dir) / "loss.svg", loss_curve_svg(read_file((fs::path(dir) / "loss.csv").string())));
    ++made;
  }
  if (fs::exists(fs::path(dir) / "grid_panels.json")) {
    write_file(fs::path(dir) / "grid.svg", grid_heatmap_svg(read_json((fs::path(dir) / "grid_panels.json").string())));
    ++made;
  }
  if (!made) throw InputError(dir + " has neither loss.csv nor grid_panels.json");
  std::printf("%d plot(s) written to %s\n", made, dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mdenet: multi-modal malware open-set recognition"};
  app.require_subcommand(1);

  std::string config, data, ckpt, out, dir;
  std::optional<std::string> mode;
  Overrides ov;

  auto* synth = app.add_subcommand("synth", "write a synthetic JSONL dataset");
  double separation = 8.0, agreement = 0.5;
  int known = 5, unknown = 2, samples = 200;
  std::uint64_t synth_seed = 7;
  synth->add_option("--separation", separation);
  synth->add_option("--agreement", agreement, "probability a token signature matches the family");
  synth->add_option("--known", known);
  synth->add_option("--unknown", unknown);
  synth->add_option("--samples", samples, "samples per family");
  synth->add_option("--seed", synth_seed);
  synth->add_option("-o,--out", out)->required();

  auto* trainc = app.add_subcommand("train", "train, evaluate and checkpoint one run");
  trainc->add_option("-c,--config", config, "JSON config")->check(CLI::ExistingFile);
  trainc->add_option("-d,--data", data, "JSONL dataset")->required()->check(CLI::ExistingFile);
  ov.attach(trainc);

  auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint");
  evalc->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  evalc->add_option("-d,--data", data)->required()->check(CLI::ExistingFile);
  evalc->add_option("--threshold-mode", mode, "global | per_family");

  auto* detectc = app.add_subcommand("detect", "Known/Unknown verdicts as JSONL");
  detectc->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  detectc->add_option("-d,--data", data)->required()->check(CLI::ExistingFile);
  detectc->add_option("-o,--out", out, "output file (default stdout)");

  auto* gridc = app.add_subcommand("grid", "alpha/beta grid search");
  std::size_t epochs_per_cell = 30;
  gridc->add_option("-c,--config", config)->check(CLI::ExistingFile);
  gridc->add_option("-d,--data", data)->required()->check(CLI::ExistingFile);
  gridc->add_option("--epochs-per-cell", epochs_per_cell);
  ov.attach(gridc);

  auto* ablatec = app.add_subcommand("ablate", "image / sentence / both comparison");
  ablatec->add_option("-c,--config", config)->check(CLI::ExistingFile);
  ablatec->add_option("-d,--data", data)->required()->check(CLI::ExistingFile);
  ov.attach(ablatec);

  auto* plotc = app.add_subcommand("plot", "render SVGs for a run directory");
  plotc->add_option("dir", dir)->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(separation, agreement, known, unknown, samples, synth_seed, out);
    if (*trainc) return cmd_train(load_config(config, ov), data);
    if (*evalc) return cmd_eval(ckpt, data, mode);
    if (*detectc) return cmd_detect(ckpt, data, out);
    if (*gridc) return cmd_grid(load_config(config, ov), data, epochs_per_cell);
    if (*ablatec) return cmd_ablate(load_config(config, ov), data);
    if (*plotc) return cmd_plot(dir);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
