#include "mdenet/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "mdenet/errors.hpp"

namespace mdenet {

using nlohmann::json;

namespace {

constexpr std::array<char, 8> kMagic = {'M', 'D', 'E', 'N', 'E', 'T', 'C', 'K'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

struct Slot {
  std::string name;
  Shape shape;
  std::vector<double>* data;
  const char* kind;
};

std::vector<Slot> slots(ParamRegistry& reg) {
  std::vector<Slot> out;
  for (auto& [name, v] : reg.params) out.push_back({name, v->shape, &v->value, "param"});
  for (auto& b : reg.buffers) out.push_back({b.name, b.shape, b.data, "buffer"});
  return out;
}

}  // namespace

void save_checkpoint(const TrainedModel& trained, const std::string& path) {
  auto& model = const_cast<Model&>(trained.model);
  ParamRegistry reg = model.registry();
  auto all = slots(reg);
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& s : all) {
    tensors.push_back({{"name", s.name}, {"shape", s.shape}, {"offset", offset}, {"count", s.data->size()},
                       {"kind", s.kind}});
    offset += s.data->size();
  }
  json manifest{{"format", kCheckpointFormat},
                {"config", to_json(trained.config)},
                {"config_hash", config_hash(trained.config)},
                {"family_names", trained.family_names},
                {"featurizer", trained.featurizer.to_json()},
                {"vocab_size", model.config.vocab_size},
                {"tensors", tensors}};
  if (trained.centroids) manifest["centroids"] = to_json(*trained.centroids);
  if (trained.thresholds) manifest["thresholds"] = to_json(*trained.thresholds);

  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(kMagic.data(), kMagic.size());
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& s : all) {
    out.write(reinterpret_cast<const char*>(s.data->data()),
              static_cast<std::streamsize>(s.data->size() * sizeof(double)));
  }
  if (!out) throw IoError("write failed: " + path);
}

TrainedModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw ParseError(path + ": not a checkpoint (bad magic)");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1ULL << 32)) throw ParseError(path + ": corrupt manifest length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ParseError(path + ": truncated manifest");

  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(path + ": manifest: " + e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat) {
    throw ParseError(path + ": unsupported checkpoint format");
  }
  TrainConfig config = train_config_from_json(manifest.at("config"));
  Featurizer fz = Featurizer::from_json(manifest.at("featurizer"));
  const auto vocab_size = manifest.at("vocab_size").get<std::size_t>();
  TrainedModel trained{Model::make(config.model_config(vocab_size), config.seed), std::move(fz), config,
                       manifest.at("family_names").get<std::vector<std::string>>(), std::nullopt,
                       std::nullopt};
  if (manifest.contains("centroids")) trained.centroids = centroids_from_json(manifest["centroids"]);
  if (manifest.contains("thresholds")) trained.thresholds = thresholds_from_json(manifest["thresholds"]);

  ParamRegistry reg = trained.model.registry();
  auto all = slots(reg);
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != all.size()) throw SchemaError(path + ": tensor count does not match the model");
  const std::streamoff base = in.tellg();
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto& t = tensors[i];
    auto& s = all[i];
    if (t.at("name").get<std::string>() != s.name || t.at("shape").get<Shape>() != s.shape) {
      throw SchemaError(path + ": tensor " + t.at("name").get<std::string>() + " does not match " + s.name +
                        " " + shape_str(s.shape));
    }
    const auto offset = t.at("offset").get<std::uint64_t>();
    in.seekg(base + static_cast<std::streamoff>(offset * sizeof(double)));
    in.read(reinterpret_cast<char*>(s.data->data()),
            static_cast<std::streamsize>(s.data->size() * sizeof(double)));
    if (!in) throw ParseError(path + ": truncated tensor data for " + s.name);
  }
  return trained;
}

}  // namespace mdenet
