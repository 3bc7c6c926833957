#include "mdenet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_map>

#include "mdenet/errors.hpp"

namespace mdenet {

using nlohmann::json;

bool Dataset::has_tokens() const {
  return std::any_of(records.begin(), records.end(),
                     [](const MalwareRecord& r) { return r.tokens.has_value(); });
}

namespace {

struct RawRecord {
  std::string family;
  std::optional<long long> declared_id;
  std::vector<double> numeric;
  std::optional<std::vector<std::string>> tokens;
};

RawRecord parse_line(const std::string& line, std::size_t lineno, const LoadSchema& schema) {
  const auto where = "line " + std::to_string(lineno);
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(where + ": " + e.what());
  }
  if (!j.is_object()) throw ParseError(where + ": record is not a JSON object");
  RawRecord r;
  auto fam = j.find(schema.family);
  if (fam == j.end() || !fam->is_string()) {
    throw SchemaError(where + ": missing string field '" + schema.family + "'");
  }
  r.family = fam->get<std::string>();
  if (auto id = j.find(schema.family_id); id != j.end()) {
    if (!id->is_number_integer()) throw SchemaError(where + ": '" + schema.family_id + "' not an integer");
    r.declared_id = id->get<long long>();
  }
  auto num = j.find(schema.numeric);
  if (num == j.end() || !num->is_array()) {
    throw SchemaError(where + ": missing array field '" + schema.numeric + "'");
  }
  r.numeric.reserve(num->size());
  for (const auto& v : *num) {
    if (!v.is_number()) throw SchemaError(where + ": non-numeric entry in '" + schema.numeric + "'");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw SchemaError(where + ": non-finite value in '" + schema.numeric + "'");
    r.numeric.push_back(d);
  }
  if (auto tok = j.find(schema.tokens); tok != j.end() && !tok->is_null()) {
    if (!tok->is_array()) throw SchemaError(where + ": '" + schema.tokens + "' is not an array");
    std::vector<std::string> tokens;
    for (const auto& t : *tok) {
      if (!t.is_string()) throw SchemaError(where + ": non-string token");
      tokens.push_back(t.get<std::string>());
    }
    r.tokens = std::move(tokens);
  }
  return r;
}

}  // namespace

Dataset parse_jsonl(std::istream& in, const LoadSchema& schema) {
  std::vector<RawRecord> raw;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto r = parse_line(line, lineno, schema);
    if (!raw.empty() && r.numeric.size() != raw.front().numeric.size()) {
      throw SchemaError("line " + std::to_string(lineno) + ": numeric length " +
                        std::to_string(r.numeric.size()) + " differs from " +
                        std::to_string(raw.front().numeric.size()));
    }
    raw.push_back(std::move(r));
  }

  // Dense ids: ascending declared id when every record declares one,
  // otherwise order of first appearance.
  const bool declared = !raw.empty() && std::all_of(raw.begin(), raw.end(), [](const RawRecord& r) {
    return r.declared_id.has_value();
  });
  std::vector<std::pair<long long, std::string>> order;
  std::unordered_map<std::string, long long> first_key;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const long long key = declared ? *raw[i].declared_id : static_cast<long long>(i);
    auto [it, inserted] = first_key.emplace(raw[i].family, key);
    if (inserted) {
      order.emplace_back(key, raw[i].family);
    } else if (declared && it->second != key) {
      throw SchemaError("family '" + raw[i].family + "' declared with two different ids");
    }
  }
  std::sort(order.begin(), order.end());
  Dataset ds;
  std::unordered_map<std::string, int> dense;
  for (const auto& [key, name] : order) {
    dense.emplace(name, static_cast<int>(ds.family_names.size()));
    ds.family_names.push_back(name);
  }
  ds.records.reserve(raw.size());
  for (auto& r : raw) {
    ds.records.push_back({{dense.at(r.family), r.family}, std::move(r.numeric), std::move(r.tokens)});
  }
  return ds;
}

Dataset load_jsonl(const std::string& path, const LoadSchema& schema) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset file: " + path);
  return parse_jsonl(in, schema);
}

std::string to_jsonl(const Dataset& ds, const LoadSchema& schema) {
  std::string out;
  for (const auto& r : ds.records) {
    json j;
    j[schema.family] = r.family.name;
    j[schema.numeric] = r.numeric;
    if (r.tokens) j[schema.tokens] = *r.tokens;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_jsonl(const Dataset& ds, const std::string& path, const LoadSchema& schema) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset file: " + path);
  out << to_jsonl(ds, schema);
  if (!out) throw IoError("write failed: " + path);
}

// ---- numeric modality ------------------------------------------------------

NormalizationStats compute_stats(std::span<const MalwareRecord> records) {
  NormalizationStats st;
  if (records.empty()) return st;
  const auto f = records.front().numeric.size();
  st.min.assign(f, std::numeric_limits<double>::infinity());
  st.max.assign(f, -std::numeric_limits<double>::infinity());
  for (const auto& r : records) {
    if (r.numeric.size() != f) throw SchemaError("compute_stats: ragged numeric vectors");
    for (std::size_t i = 0; i < f; ++i) {
      st.min[i] = std::min(st.min[i], r.numeric[i]);
      st.max[i] = std::max(st.max[i], r.numeric[i]);
    }
  }
  return st;
}

MalwareImage make_image(std::span<const double> numeric, std::size_t height, std::size_t width,
                        const NormalizationStats& stats) {
  if (height == 0 || width == 0) throw ConfigError("make_image: image size must be positive");
  if (stats.min.size() != numeric.size() || stats.max.size() != numeric.size()) {
    throw SchemaError("make_image: stats cover " + std::to_string(stats.min.size()) +
                      " features, record has " + std::to_string(numeric.size()));
  }
  MalwareImage img{height, width, std::vector<double>(height * width, 0.0)};
  const auto n = std::min(numeric.size(), img.pixels.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double lo = stats.min[i], hi = stats.max[i];
    const double v = hi > lo ? (numeric[i] - lo) / (hi - lo) : 0.5;
    img.pixels[i] = std::clamp(v, 0.0, 1.0);
  }
  return img;
}

// ---- textual modality ------------------------------------------------------

int Vocabulary::lookup(const std::string& token) const {
  auto it = ids.find(token);
  return it == ids.end() ? kUnk : it->second;
}

json Vocabulary::to_json() const {
  json j = json::object();
  for (const auto& [tok, id] : ids) j[tok] = id;
  return j;
}

Vocabulary Vocabulary::from_json(const json& j) {
  Vocabulary v;
  for (auto it = j.begin(); it != j.end(); ++it) v.ids.emplace(it.key(), it.value().get<int>());
  return v;
}

Vocabulary build_vocab(std::span<const MalwareRecord> records, int min_count) {
  std::map<std::string, long long> freq;
  for (const auto& r : records) {
    if (!r.tokens) continue;
    for (const auto& t : *r.tokens) ++freq[t];
  }
  std::vector<std::pair<std::string, long long>> kept;
  for (const auto& [tok, n] : freq) {
    if (n >= min_count) kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  int next = 2;
  for (const auto& [tok, n] : kept) v.ids.emplace(tok, next++);
  return v;
}

MalwareSentence tokenize(std::span<const std::string> tokens, const Vocabulary& vocab,
                         std::size_t max_length) {
  MalwareSentence s;
  s.vocab_size = vocab.size();
  s.token_ids.assign(max_length, Vocabulary::kPad);
  s.true_length = std::min(tokens.size(), max_length);
  for (std::size_t i = 0; i < s.true_length; ++i) s.token_ids[i] = vocab.lookup(tokens[i]);
  return s;
}

// ---- splits ----------------------------------------------------------------

DatasetSplit split_known_unknown(const Dataset& ds, int known_families, double train_fraction,
                                 std::uint64_t seed) {
  const int total = static_cast<int>(ds.family_count());
  if (known_families < 1 || known_families > total) {
    throw SplitError("known family count " + std::to_string(known_families) +
                     " outside [1, " + std::to_string(total) + "]");
  }
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) {
    throw SplitError("train_fraction must lie in (0, 1]");
  }
  std::vector<std::vector<std::size_t>> by_family(static_cast<std::size_t>(known_families));
  DatasetSplit sp;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const int f = ds.records[i].family.id;
    if (f < known_families) {
      by_family[static_cast<std::size_t>(f)].push_back(i);
    } else {
      sp.test_unknown_index.push_back(i);
    }
  }
  Rng rng(seed);
  for (int f = 0; f < known_families; ++f) {
    auto& idx = by_family[static_cast<std::size_t>(f)];
    const auto n = idx.size();
    const bool need_both = train_fraction < 1.0;
    if (n == 0 || (need_both && n < 2)) {
      throw SplitError("family '" + ds.family_names[static_cast<std::size_t>(f)] + "' has " +
                       std::to_string(n) + " samples; cannot fill both train and test");
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n) + 0.5));
    if (need_both) n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
    sp.train_index.insert(sp.train_index.end(), idx.begin(), idx.begin() + static_cast<long>(n_train));
    sp.test_known_index.insert(sp.test_known_index.end(), idx.begin() + static_cast<long>(n_train), idx.end());
  }
  std::sort(sp.train_index.begin(), sp.train_index.end());
  std::sort(sp.test_known_index.begin(), sp.test_known_index.end());
  for (auto i : sp.train_index) sp.train_known.push_back(ds.records[i]);
  for (auto i : sp.test_known_index) sp.test_known.push_back(ds.records[i]);
  for (auto i : sp.test_unknown_index) sp.test_unknown.push_back(ds.records[i]);
  sp.family_names = ds.family_names;
  sp.known_families = known_families;
  sp.seed = seed;
  sp.train_fraction = train_fraction;
  return sp;
}

json split_manifest(const DatasetSplit& split) {
  return json{{"seed", split.seed},
              {"train_fraction", split.train_fraction},
              {"known_families", split.known_families},
              {"train_known", split.train_index},
              {"test_known", split.test_known_index},
              {"test_unknown", split.test_unknown_index}};
}

DatasetSplit split_from_manifest(const Dataset& ds, const json& manifest) {
  DatasetSplit sp;
  try {
    sp.seed = manifest.at("seed").get<std::uint64_t>();
    sp.train_fraction = manifest.at("train_fraction").get<double>();
    sp.known_families = manifest.at("known_families").get<int>();
    sp.train_index = manifest.at("train_known").get<std::vector<std::size_t>>();
    sp.test_known_index = manifest.at("test_known").get<std::vector<std::size_t>>();
    sp.test_unknown_index = manifest.at("test_unknown").get<std::vector<std::size_t>>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("split manifest: ") + e.what());
  }
  auto take = [&](const std::vector<std::size_t>& idx, std::vector<MalwareRecord>& out) {
    for (auto i : idx) {
      if (i >= ds.records.size()) throw SplitError("split manifest index out of range");
      out.push_back(ds.records[i]);
    }
  };
  take(sp.train_index, sp.train_known);
  take(sp.test_known_index, sp.test_known);
  take(sp.test_unknown_index, sp.test_unknown);
  sp.family_names = ds.family_names;
  return sp;
}

// ---- synthetic data --------------------------------------------------------

void validate(const SyntheticSpec& s) {
  if (s.known_families < 2) throw ConfigError("synthetic: known_families must be >= 2");
  if (s.unknown_families < 0) throw ConfigError("synthetic: unknown_families must be >= 0");
  if (!(s.cluster_separation > 0.0)) throw ConfigError("synthetic: cluster_separation must be > 0");
  if (s.modality_agreement < 0.0 || s.modality_agreement > 1.0) {
    throw ConfigError("synthetic: modality_agreement must lie in [0, 1]");
  }
  if (s.samples_per_family < 1) throw ConfigError("synthetic: samples_per_family must be >= 1");
  if (s.features < s.known_families + s.unknown_families) {
    throw ConfigError("synthetic: need at least one feature per family for orthogonal means");
  }
  if (s.noise < 0.0) throw ConfigError("synthetic: noise must be >= 0");
  if (s.max_length < 1 || s.signature_length < 1 || s.tokens_per_sample < 0) {
    throw ConfigError("synthetic: invalid sentence lengths");
  }
  if (s.vocab_size < 1) throw ConfigError("synthetic: vocab_size must be >= 1");
}

json to_json(const SyntheticSpec& s) {
  return json{{"known_families", s.known_families},
              {"unknown_families", s.unknown_families},
              {"samples_per_family", s.samples_per_family},
              {"features", s.features},
              {"cluster_separation", s.cluster_separation},
              {"modality_agreement", s.modality_agreement},
              {"max_length", s.max_length},
              {"vocab_size", s.vocab_size},
              {"noise", s.noise},
              {"signature_length", s.signature_length},
              {"tokens_per_sample", s.tokens_per_sample}};
}

SyntheticSpec synthetic_spec_from_json(const json& j) {
  SyntheticSpec s;
  auto get = [&](const char* key, auto& field) {
    if (auto it = j.find(key); it != j.end()) field = it->get<std::remove_reference_t<decltype(field)>>();
  };
  try {
    get("known_families", s.known_families);
    get("unknown_families", s.unknown_families);
    get("samples_per_family", s.samples_per_family);
    get("features", s.features);
    get("cluster_separation", s.cluster_separation);
    get("modality_agreement", s.modality_agreement);
    get("max_length", s.max_length);
    get("vocab_size", s.vocab_size);
    get("noise", s.noise);
    get("signature_length", s.signature_length);
    get("tokens_per_sample", s.tokens_per_sample);
  } catch (const json::exception& e) {
    throw ParseError(std::string("synthetic spec: ") + e.what());
  }
  validate(s);
  return s;
}

Dataset gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  validate(spec);
  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto f = static_cast<std::size_t>(spec.features);
  const int total = spec.known_families + spec.unknown_families;

  // Gram-Schmidt over Gaussian draws gives one unit direction per family.
  std::vector<std::vector<double>> dirs;
  while (static_cast<int>(dirs.size()) < total) {
    std::vector<double> v(f);
    for (auto& x : v) x = gauss(rng);
    for (const auto& u : dirs) {
      double dot = 0.0;
      for (std::size_t i = 0; i < f; ++i) dot += v[i] * u[i];
      for (std::size_t i = 0; i < f; ++i) v[i] -= dot * u[i];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-8) continue;
    for (auto& x : v) x /= norm;
    dirs.push_back(std::move(v));
  }
  const double known_radius = spec.cluster_separation / std::sqrt(2.0);
  const double unknown_radius = 2.0 * spec.cluster_separation;

  const int per_family_tokens = spec.signature_length;
  const int pool = std::max(spec.vocab_size - total * per_family_tokens, 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> noise_tok(0, pool - 1);

  Dataset ds;
  for (int fam = 0; fam < total; ++fam) {
    const bool known = fam < spec.known_families;
    char name[32];
    std::snprintf(name, sizeof name, known ? "known_%02d" : "unknown_%02d",
                  known ? fam : fam - spec.known_families);
    ds.family_names.emplace_back(name);
  }
  for (int fam = 0; fam < total; ++fam) {
    const bool known = fam < spec.known_families;
    const double radius = known ? known_radius : unknown_radius;
    const auto& dir = dirs[static_cast<std::size_t>(fam)];
    for (int s = 0; s < spec.samples_per_family; ++s) {
      MalwareRecord r;
      r.family = {fam, ds.family_names[static_cast<std::size_t>(fam)]};
      r.numeric.resize(f);
      for (std::size_t i = 0; i < f; ++i) r.numeric[i] = radius * dir[i] + spec.noise * gauss(rng);
      std::vector<std::string> toks;
      toks.reserve(static_cast<std::size_t>(spec.tokens_per_sample));
      for (int t = 0; t < spec.tokens_per_sample; ++t) {
        if (unit(rng) < spec.modality_agreement) {
          toks.push_back("fam" + std::to_string(fam) + "_api" + std::to_string(t % per_family_tokens));
        } else {
          toks.push_back("shared_api" + std::to_string(noise_tok(rng)));
        }
      }
      r.tokens = std::move(toks);
      ds.records.push_back(std::move(r));
    }
  }
  return ds;
}

// ---- model-ready inputs ----------------------------------------------------

Featurizer Featurizer::fit(std::span<const MalwareRecord> train_known, std::size_t height,
                           std::size_t width, std::size_t max_length, int min_count) {
  Featurizer fz;
  fz.stats = compute_stats(train_known);
  fz.vocab = build_vocab(train_known, min_count);
  fz.height = height;
  fz.width = width;
  fz.max_length = max_length;
  return fz;
}

PreparedSet Featurizer::prepare(std::span<const MalwareRecord> records) const {
  PreparedSet out;
  out.images.reserve(records.size());
  out.sentences.reserve(records.size());
  out.labels.reserve(records.size());
  static const std::vector<std::string> kEmpty;
  for (const auto& r : records) {
    out.images.push_back(make_image(r.numeric, height, width, stats));
    const auto& toks = r.tokens ? *r.tokens : kEmpty;
    out.sentences.push_back(tokenize(toks, vocab, max_length));
    out.labels.push_back(r.family.id);
  }
  return out;
}

json Featurizer::to_json() const {
  return json{{"min", stats.min},   {"max", stats.max},          {"vocab", vocab.to_json()},
              {"height", height},   {"width", width},            {"max_length", max_length}};
}

Featurizer Featurizer::from_json(const json& j) {
  Featurizer fz;
  try {
    fz.stats.min = j.at("min").get<std::vector<double>>();
    fz.stats.max = j.at("max").get<std::vector<double>>();
    fz.vocab = Vocabulary::from_json(j.at("vocab"));
    fz.height = j.at("height").get<std::size_t>();
    fz.width = j.at("width").get<std::size_t>();
    fz.max_length = j.at("max_length").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("featurizer: ") + e.what());
  }
  return fz;
}

}  // namespace mdenet
