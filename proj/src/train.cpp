#include "mdenet/train.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mdenet/errors.hpp"

namespace mdenet {

using nlohmann::json;

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::size_t> stack_widths(const NumericEncoderConfig& c) {
  std::vector<std::size_t> w;
  for (const auto& layer : c.stack) w.push_back(layer.out_channels);
  return w;
}

}  // namespace

void TrainConfig::validate() const {
  weights().validate();
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (triplets need peers)");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  if (!(lambda > 0.0)) throw ConfigError("lambda must be positive");
  if (disc_margin && !(*disc_margin > 0.0)) throw ConfigError("disc_margin must be positive");
  if (height == 0 || width == 0) throw ConfigError("image size must be positive");
  if (max_length == 0) throw ConfigError("max_length must be positive");
  if (known_families < 2) throw ConfigError("known_families must be >= 2");
  if (embedding_dim == 0 || sub_dim == 0 || fusion_hidden == 0) throw ConfigError("zero-width layer");
  numeric.validate();
  textual.validate();
}

ModelConfig TrainConfig::model_config(std::size_t vocab_size) const {
  ModelConfig m;
  m.modalities = modalities;
  m.height = height;
  m.width = width;
  m.max_length = max_length;
  m.vocab_size = vocab_size;
  m.known_families = static_cast<std::size_t>(known_families);
  m.numeric = numeric;
  m.textual = textual;
  m.fusion_hidden = fusion_hidden;
  m.embedding_dim = embedding_dim;
  m.sub_dim = sub_dim;
  m.lambda = lambda;
  m.norm_cap = norm_cap;
  return m;
}

json to_json(const TrainConfig& c) {
  json j{{"learning_rate", c.learning_rate},
         {"batch_size", c.batch_size},
         {"epochs", c.epochs},
         {"alpha", c.alpha},
         {"beta", c.beta},
         {"lambda", c.lambda},
         {"norm_cap", c.norm_cap},
         {"disc_margin", c.disc_margin ? json(*c.disc_margin) : json(nullptr)},
         {"seed", c.seed},
         {"threshold_mode", to_string(c.threshold_mode)},
         {"modalities", to_string(c.modalities)},
         {"known_families", c.known_families},
         {"train_fraction", c.train_fraction},
         {"height", c.height},
         {"width", c.width},
         {"max_length", c.max_length},
         {"min_count", c.min_count},
         {"numeric",
          {{"key_channels", c.numeric.key_channels},
           {"value_channels", c.numeric.value_channels},
           {"local_channels", c.numeric.local_channels},
           {"stack_widths", stack_widths(c.numeric)},
           {"branch_dim", c.numeric.branch_dim}}},
         {"textual",
          {{"model_dim", c.textual.model_dim},
           {"ffn_dim", c.textual.ffn_dim},
           {"blocks", c.textual.blocks},
           {"heads", c.textual.heads},
           {"output_dim", c.textual.output_dim}}},
         {"fusion_hidden", c.fusion_hidden},
         {"embedding_dim", c.embedding_dim},
         {"sub_dim", c.sub_dim},
         {"track_metrics", c.track_metrics}};
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  auto get = [](const json& obj, const char* key, auto& field) {
    if (auto it = obj.find(key); it != obj.end()) field = it->get<std::remove_reference_t<decltype(field)>>();
  };
  try {
    get(j, "learning_rate", c.learning_rate);
    get(j, "batch_size", c.batch_size);
    get(j, "epochs", c.epochs);
    get(j, "alpha", c.alpha);
    get(j, "beta", c.beta);
    get(j, "lambda", c.lambda);
    get(j, "norm_cap", c.norm_cap);
    if (auto it = j.find("disc_margin"); it != j.end() && !it->is_null()) c.disc_margin = it->get<double>();
    get(j, "seed", c.seed);
    if (auto it = j.find("threshold_mode"); it != j.end()) {
      c.threshold_mode = threshold_mode_from_string(it->get<std::string>());
    }
    if (auto it = j.find("modalities"); it != j.end()) c.modalities = modalities_from_string(it->get<std::string>());
    get(j, "known_families", c.known_families);
    get(j, "train_fraction", c.train_fraction);
    get(j, "height", c.height);
    get(j, "width", c.width);
    get(j, "max_length", c.max_length);
    get(j, "min_count", c.min_count);
    if (auto it = j.find("numeric"); it != j.end()) {
      get(*it, "key_channels", c.numeric.key_channels);
      get(*it, "value_channels", c.numeric.value_channels);
      get(*it, "local_channels", c.numeric.local_channels);
      get(*it, "branch_dim", c.numeric.branch_dim);
      auto widths = stack_widths(c.numeric);
      get(*it, "stack_widths", widths);
      c.numeric.stack = NumericEncoderConfig::default_stack(c.numeric.value_channels, widths);
    }
    if (auto it = j.find("textual"); it != j.end()) {
      get(*it, "model_dim", c.textual.model_dim);
      get(*it, "ffn_dim", c.textual.ffn_dim);
      get(*it, "blocks", c.textual.blocks);
      get(*it, "heads", c.textual.heads);
      get(*it, "output_dim", c.textual.output_dim);
    }
    get(j, "fusion_hidden", c.fusion_hidden);
    get(j, "embedding_dim", c.embedding_dim);
    get(j, "sub_dim", c.sub_dim);
    get(j, "track_metrics", c.track_metrics);
  } catch (const json::exception& e) {
    throw ParseError(std::string("train config: ") + e.what());
  }
  return c;
}

std::string config_hash(const TrainConfig& c) {
  const auto text = to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

// ---- training --------------------------------------------------------------

namespace {

struct HeldOut {
  PreparedSet train, known, unknown;
};

HeldOut prepare_all(const Featurizer& fz, const DatasetSplit& split) {
  return {fz.prepare(split.train_known), fz.prepare(split.test_known), fz.prepare(split.test_unknown)};
}

struct Tables {
  CentroidTable centroids;
  ThresholdTable thresholds;
};

Tables fit_tables(Model& model, const PreparedSet& train_set, ThresholdMode mode,
                  const std::vector<std::string>& names) {
  auto inf = infer(model, train_set);
  Tables t;
  t.centroids = compute_centroids(inf.z, train_set.labels, model.classifier.families(), names);
  t.thresholds = compute_thresholds(inf.z, train_set.labels, t.centroids, mode);
  return t;
}

std::vector<bool> known_verdicts(const Inference& inf, const Tables& t) {
  std::vector<bool> out;
  out.reserve(inf.z.size());
  for (std::size_t i = 0; i < inf.z.size(); ++i) {
    out.push_back(detect(inf.z[i], inf.probs[i], t.centroids, t.thresholds).known);
  }
  return out;
}

}  // namespace

TrainResult train(const TrainConfig& config, const DatasetSplit& split, const StepCallback& on_step) {
  config.validate();
  if (split.train_known.empty()) throw InputError("train: empty training partition");
  if (split.known_families != config.known_families) {
    throw ConfigError("train: split has " + std::to_string(split.known_families) +
                      " known families, config expects " + std::to_string(config.known_families));
  }
  if (uses_sentence(config.modalities) &&
      std::none_of(split.train_known.begin(), split.train_known.end(),
                   [](const MalwareRecord& r) { return r.tokens.has_value(); })) {
    throw ConfigError("train: sentence modality requested on a token-free dataset");
  }

  Featurizer fz = Featurizer::fit(split.train_known, config.height, config.width, config.max_length,
                                  config.min_count);
  const PreparedSet train_set = fz.prepare(split.train_known);
  TrainResult result{{Model::make(config.model_config(static_cast<std::size_t>(fz.vocab.size())), config.seed),
                      fz, config, split.family_names, std::nullopt, std::nullopt},
                     {}};
  Model& model = result.trained.model;
  const TripletSampler sampler(train_set.labels, split.family_names);
  ParamRegistry reg = model.registry();
  Adam opt(reg.vars(), config.learning_rate);
  Rng rng(config.seed ^ 0x9E3779B97F4A7C15ULL);
  const auto weights = config.weights();

  std::optional<HeldOut> held;
  if (config.track_metrics) held = prepare_all(fz, split);

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_total = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const auto end = std::min(order.size(), start + config.batch_size);
      const std::vector<std::size_t> anchors(order.begin() + static_cast<long>(start),
                                             order.begin() + static_cast<long>(end));
      const auto triplets = sampler.sample(anchors, rng);
      const auto b = anchors.size();
      std::vector<std::size_t> rows(3 * b);
      std::vector<int> labels(b);
      for (std::size_t i = 0; i < b; ++i) {
        rows[i] = triplets[i].anchor;
        rows[b + i] = triplets[i].positive;
        rows[2 * b + i] = triplets[i].negative;
        labels[i] = train_set.labels[anchors[i]];
      }
      Var z_all = model.embed(train_set, rows, /*training=*/true);
      Var z = slice_rows(z_all, 0, b);
      Var z_pos = slice_rows(z_all, b, 2 * b);
      Var z_neg = slice_rows(z_all, 2 * b, 3 * b);
      if (step == 0) model.sphere.init_radius(z);

      Var cls = cross_entropy(model.classifier.classify(z), labels);
      Var disc = disc_loss(z, z_pos, z_neg, config.disc_margin);
      Var excl = excl_loss(z, model.sphere);
      Var total = total_loss(cls, disc, excl, weights);

      StepRecord rec{epoch, step, cls->value[0], disc->value[0], excl->value[0], total->value[0], 0.0, 0.0};
      if (!std::isfinite(rec.total) || !std::isfinite(rec.cls) || !std::isfinite(rec.disc) ||
          !std::isfinite(rec.excl)) {
        throw TrainingError("non-finite loss at step " + std::to_string(step) + " (cls=" +
                            fmt_double(rec.cls) + ", disc=" + fmt_double(rec.disc) +
                            ", excl=" + fmt_double(rec.excl) + ")");
      }
      opt.zero_grad();
      backward(total);
      opt.step();
      model.sphere.project();
      rec.rho = model.sphere.radius();
      rec.sub_norm = model.sphere.projection_norm();
      result.history.steps.push_back(rec);
      epoch_total += rec.total;
      ++epoch_steps;
      ++step;
      if (on_step && !on_step(rec)) return result;
    }
    EpochRecord er{epoch, epoch_steps ? epoch_total / static_cast<double>(epoch_steps) : 0.0, {}, {}};
    if (held) {
      auto tables = fit_tables(model, held->train, config.threshold_mode, split.family_names);
      if (held->known.size() > 0) {
        auto inf = infer(model, held->known);
        er.cls_acc = cls_accuracy(inf.predictions, held->known.labels);
        if (held->unknown.size() > 0) {
          auto inf_u = infer(model, held->unknown);
          er.det_acc = det_accuracy(known_verdicts(inf, tables), known_verdicts(inf_u, tables)).det_acc;
        }
      }
    }
    result.history.epochs.push_back(er);
  }
  return result;
}

// ---- evaluation ------------------------------------------------------------

BaselineSweep sweep_probability_baseline(const Embeddings& known_probs, const Embeddings& unknown_probs) {
  BaselineSweep sweep;
  bool first = true;
  const auto total = known_probs.size() + unknown_probs.size();
  for (int step = 1; step <= 99; ++step) {
    const double dp = step / 100.0;
    std::vector<bool> kk, ku;
    for (const auto& p : known_probs) kk.push_back(detect_probability_baseline(p, dp).known);
    for (const auto& p : unknown_probs) ku.push_back(detect_probability_baseline(p, dp).known);
    const auto known_count = std::count(kk.begin(), kk.end(), true) + std::count(ku.begin(), ku.end(), true);
    sweep.known_rate.emplace_back(dp, total ? static_cast<double>(known_count) / static_cast<double>(total) : 0.0);
    if (kk.empty() || ku.empty()) continue;
    const auto m = det_accuracy(kk, ku);
    if (first || m.det_acc > sweep.best.det_acc) {
      sweep.best = m;
      sweep.best_delta_p = dp;
      first = false;
    }
  }
  return sweep;
}

EvalReport evaluate(TrainedModel& trained, const DatasetSplit& split) {
  Model& model = trained.model;
  const auto held = prepare_all(trained.featurizer, split);
  if (held.train.size() == 0) throw InputError("evaluate: empty training partition");
  auto tables = fit_tables(model, held.train, trained.config.threshold_mode, split.family_names);
  trained.centroids = tables.centroids;
  trained.thresholds = tables.thresholds;

  EvalReport rep;
  rep.mode = trained.config.threshold_mode;
  rep.thresholds = tables.thresholds;
  rep.centroids = tables.centroids;
  rep.family_names.assign(split.family_names.begin(),
                          split.family_names.begin() + std::min<long>(split.known_families,
                                                                      static_cast<long>(split.family_names.size())));
  const auto k = model.classifier.families();
  if (held.known.size() == 0) throw InputError("evaluate: empty known test partition");
  auto inf_known = infer(model, held.known);
  rep.cls_acc = cls_accuracy(inf_known.predictions, held.known.labels);
  rep.confusion = confusion_matrix(inf_known.predictions, held.known.labels, k);
  if (held.unknown.size() > 0) {
    auto inf_unknown = infer(model, held.unknown);
    rep.detection = det_accuracy(known_verdicts(inf_known, tables), known_verdicts(inf_unknown, tables));
    rep.baseline = sweep_probability_baseline(inf_known.probs, inf_unknown.probs);
  }
  return rep;
}

json EvalReport::metrics_json() const {
  json j{{"cls_acc", cls_acc},
         {"mode", to_string(mode)},
         {"delta", thresholds.delta_global},
         {"delta_per_family", thresholds.delta_per_family},
         {"tpr", nullptr},
         {"tnr", nullptr},
         {"det_acc", nullptr}};
  if (detection) {
    j["tpr"] = detection->tpr;
    j["tnr"] = detection->tnr;
    j["det_acc"] = detection->det_acc;
  }
  if (baseline) {
    j["probability_baseline"] = {{"best_delta_p", baseline->best_delta_p},
                                 {"tpr", baseline->best.tpr},
                                 {"tnr", baseline->best.tnr},
                                 {"det_acc", baseline->best.det_acc}};
  }
  return j;
}

std::string EvalReport::confusion_csv() const { return mdenet::confusion_csv(confusion, family_names); }

// ---- grid search and ablation ---------------------------------------------

std::vector<std::pair<double, double>> admissible_weight_pairs() {
  std::vector<std::pair<double, double>> out;
  for (int a = 1; a <= 8; ++a)
    for (int b = 1; b <= 8; ++b)
      if (a + b <= 9) out.emplace_back(a / 10.0, b / 10.0);
  return out;
}

GridResult grid_search(const TrainConfig& base, const DatasetSplit& split, std::size_t epochs_per_cell,
                       const std::function<void(const GridCell&)>& on_cell) {
  GridResult g;
  for (auto [alpha, beta] : admissible_weight_pairs()) {
    TrainConfig cfg = base;
    cfg.alpha = alpha;
    cfg.beta = beta;
    cfg.epochs = epochs_per_cell;
    cfg.track_metrics = false;
    auto run = train(cfg, split);
    auto rep = evaluate(run.trained, split);
    if (!rep.detection) throw InputError("grid_search: detection needs unknown-family test samples");
    GridCell cell{alpha, beta, rep.cls_acc, rep.detection->det_acc, (rep.cls_acc + rep.detection->det_acc) / 2.0};
    g.cells.push_back(cell);
    if (on_cell) on_cell(cell);
  }
  return g;
}

std::string GridResult::csv() const {
  std::string out = "alpha,beta,cls_acc,det_acc,mean\n";
  for (const auto& c : cells) {
    out += fmt_double(c.alpha) + ',' + fmt_double(c.beta) + ',' + fmt_double(c.cls_acc) + ',' +
           fmt_double(c.det_acc) + ',' + fmt_double(c.mean) + '\n';
  }
  return out;
}

json GridResult::panels() const {
  auto empty = json::array();
  for (int i = 0; i < 8; ++i) empty.push_back(json::array({nullptr, nullptr, nullptr, nullptr, nullptr, nullptr, nullptr, nullptr}));
  json cls = empty, det = empty, mean = empty;
  for (const auto& c : cells) {
    const auto r = static_cast<std::size_t>(std::lround(c.alpha * 10.0)) - 1;
    const auto col = static_cast<std::size_t>(std::lround(c.beta * 10.0)) - 1;
    cls[r][col] = c.cls_acc;
    det[r][col] = c.det_acc;
    mean[r][col] = c.mean;
  }
  std::vector<double> axis;
  for (int i = 1; i <= 8; ++i) axis.push_back(i / 10.0);
  return json{{"alpha", axis}, {"beta", axis}, {"cls_acc", cls}, {"det_acc", det}, {"mean", mean}};
}

std::vector<AblationRow> ablate(const TrainConfig& config, const DatasetSplit& split) {
  const bool has_tokens = std::any_of(split.train_known.begin(), split.train_known.end(),
                                      [](const MalwareRecord& r) { return r.tokens.has_value(); });
  if (!has_tokens) throw ConfigError("ablate: sentence-only run requested on a token-free dataset");
  std::vector<AblationRow> rows;
  for (auto m : {Modalities::image, Modalities::sentence, Modalities::both}) {
    TrainConfig cfg = config;
    cfg.modalities = m;
    auto run = train(cfg, split);
    auto rep = evaluate(run.trained, split);
    rows.push_back({m, rep.cls_acc, rep.detection});
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "modalities,cls_acc,tpr,tnr,det_acc\n";
  for (const auto& r : rows) {
    out += to_string(r.modalities) + ',' + fmt_double(r.cls_acc);
    if (r.detection) {
      out += ',' + fmt_double(r.detection->tpr) + ',' + fmt_double(r.detection->tnr) + ',' +
             fmt_double(r.detection->det_acc);
    } else {
      out += ",,,";
    }
    out += '\n';
  }
  return out;
}

// ---- reporting -------------------------------------------------------------

std::string loss_csv(const TrainHistory& history) {
  std::string out = "epoch,step,cls,disc,excl,total,rho,sub_norm\n";
  for (const auto& s : history.steps) {
    out += std::to_string(s.epoch) + ',' + std::to_string(s.step) + ',' + fmt_double(s.cls) + ',' +
           fmt_double(s.disc) + ',' + fmt_double(s.excl) + ',' + fmt_double(s.total) + ',' +
           fmt_double(s.rho) + ',' + fmt_double(s.sub_norm) + '\n';
  }
  return out;
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

std::vector<std::string> emit_report(const TrainHistory& history, const EvalReport& report,
                                     const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
  const fs::path root(dir);
  json epochs = json::array();
  for (const auto& e : history.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"mean_total", e.mean_total},
                      {"cls_acc", e.cls_acc ? json(*e.cls_acc) : json(nullptr)},
                      {"det_acc", e.det_acc ? json(*e.det_acc) : json(nullptr)}});
  }
  json rho = json::array();
  for (const auto& s : history.steps) rho.push_back(s.rho);
  std::vector<std::string> written;
  auto put = [&](const char* name, const std::string& text) {
    write_file(root / name, text);
    written.push_back((root / name).string());
  };
  put("metrics.json", report.metrics_json().dump(2) + "\n");
  put("loss.csv", loss_csv(history));
  put("confusion.csv", report.confusion_csv());
  put("history.json", json{{"epochs", epochs}, {"rho", rho}}.dump(2) + "\n");
  return written;
}

}  // namespace mdenet
