#include "pulmo/checkpoint.hpp"

#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "pulmo/common.hpp"

namespace pulmo {

using nlohmann::json;

Checkpoint::Checkpoint() : meta_storage(new json(json::object())) {}
Checkpoint::Checkpoint(const Checkpoint& other)
    : version(other.version), kind(other.kind), meta_storage(new json(*other.meta_storage)), tensors(other.tensors) {}
Checkpoint& Checkpoint::operator=(const Checkpoint& other) {
  if (this != &other) {
    version = other.version;
    kind = other.kind;
    *meta_storage = *other.meta_storage;
    tensors = other.tensors;
  }
  return *this;
}
Checkpoint::Checkpoint(Checkpoint&& other) noexcept
    : version(other.version), kind(std::move(other.kind)), meta_storage(other.meta_storage),
      tensors(std::move(other.tensors)) {
  other.meta_storage = nullptr;
}
Checkpoint& Checkpoint::operator=(Checkpoint&& other) noexcept {
  if (this != &other) {
    delete meta_storage;
    version = other.version;
    kind = std::move(other.kind);
    meta_storage = other.meta_storage;
    tensors = std::move(other.tensors);
    other.meta_storage = nullptr;
  }
  return *this;
}
Checkpoint::~Checkpoint() { delete meta_storage; }

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

namespace {

std::string blob_path(const std::string& manifest_path) {
  auto dot = manifest_path.find_last_of('.');
  auto slash = manifest_path.find_last_of('/');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) return manifest_path + ".bin";
  return manifest_path.substr(0, dot) + ".bin";
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  json dir = json::array();
  std::int64_t offset = 0;
  for (const auto& t : ck.tensors) {
    std::int64_t n = 1;
    for (int s : t.shape) n *= s;
    if (n != static_cast<std::int64_t>(t.data.size()))
      throw DataError("checkpoint: tensor '" + t.name + "' shape does not match data size");
    dir.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"count", n}});
    offset += n;
  }
  json manifest = {
      {"version", ck.version}, {"kind", ck.kind}, {"meta", ck.meta()}, {"tensors", dir},
      {"total_floats", offset},
  };
  {
    std::ofstream f(path);
    if (!f) throw DataError("checkpoint: cannot write " + path);
    f << manifest.dump(2) << "\n";
  }
  std::ofstream raw(blob_path(path), std::ios::binary);
  if (!raw) throw DataError("checkpoint: cannot write " + blob_path(path));
  for (const auto& t : ck.tensors)
    raw.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("checkpoint: cannot open " + path);
  json manifest;
  try {
    f >> manifest;
  } catch (const json::exception& e) {
    throw DataError("checkpoint: invalid manifest JSON in " + path + ": " + e.what());
  }
  Checkpoint ck;
  try {
    ck.version = manifest.at("version").get<int>();
    ck.kind = manifest.at("kind").get<std::string>();
    ck.meta() = manifest.at("meta");
    if (ck.version != 1) throw DataError("checkpoint: unsupported version " + std::to_string(ck.version));

    std::ifstream raw(blob_path(path), std::ios::binary);
    if (!raw) throw DataError("checkpoint: missing blob " + blob_path(path));
    raw.seekg(0, std::ios::end);
    const std::int64_t bytes = static_cast<std::int64_t>(raw.tellg());
    raw.seekg(0);
    const std::int64_t total = manifest.at("total_floats").get<std::int64_t>();
    if (bytes != total * static_cast<std::int64_t>(sizeof(float)))
      throw DataError("checkpoint: blob size mismatch in " + blob_path(path));

    for (const auto& e : manifest.at("tensors")) {
      CheckpointTensor t;
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<std::vector<int>>();
      const std::int64_t n = e.at("count").get<std::int64_t>();
      const std::int64_t off = e.at("offset").get<std::int64_t>();
      if (off < 0 || off + n > total) throw DataError("checkpoint: tensor '" + t.name + "' out of bounds");
      t.data.resize(static_cast<std::size_t>(n));
      raw.seekg(off * static_cast<std::streamoff>(sizeof(float)));
      raw.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(n * sizeof(float)));
      if (!raw) throw DataError("checkpoint: truncated blob " + blob_path(path));
      ck.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw DataError("checkpoint: malformed manifest " + path + ": " + e.what());
  }
  return ck;
}

json nnet_config_to_json(const NNetConfig& c) {
  return json{
      {"pre_channels", c.pre_channels},
      {"block_channels", c.block_channels},
      {"units_per_block", c.units_per_block},
      {"deconv_channels", c.deconv_channels},
      {"back3_channels", c.back3_channels},
      {"feature_channels", c.feature_channels},
      {"head_hidden", c.head_hidden},
      {"n_anchors", c.n_anchors},
  };
}

NNetConfig nnet_config_from_json(const json& j) {
  NNetConfig c;
  try {
    c.pre_channels = j.at("pre_channels").get<int>();
    c.block_channels = j.at("block_channels").get<std::array<int, 4>>();
    c.units_per_block = j.at("units_per_block").get<int>();
    c.deconv_channels = j.at("deconv_channels").get<int>();
    c.back3_channels = j.at("back3_channels").get<int>();
    c.feature_channels = j.at("feature_channels").get<int>();
    c.head_hidden = j.at("head_hidden").get<int>();
    c.n_anchors = j.at("n_anchors").get<int>();
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: bad network config: ") + e.what());
  }
  return c;
}

void pack_net(Checkpoint& ck, NNet<float>& net, const std::string& prefix) {
  for (auto& p : net.named_params()) {
    CheckpointTensor t;
    t.name = prefix + p.name;
    t.shape = p.tensor.shape();
    t.data.assign(p.tensor.data(), p.tensor.data() + p.tensor.size());
    ck.tensors.push_back(std::move(t));
  }
  for (auto& b : net.named_buffers()) {
    CheckpointTensor t;
    t.name = prefix + b.name;
    t.shape = {static_cast<int>(b.data->size())};
    t.data.assign(b.data->data(), b.data->data() + b.data->size());
    ck.tensors.push_back(std::move(t));
  }
}

void unpack_net(const Checkpoint& ck, NNet<float>& net, const std::string& prefix) {
  for (auto& p : net.named_params()) {
    const auto* t = ck.find(prefix + p.name);
    if (!t) throw DataError("checkpoint: missing tensor '" + prefix + p.name + "'");
    if (t->shape != p.tensor.shape())
      throw DataError("checkpoint: shape mismatch for tensor '" + prefix + p.name + "'");
    for (std::int64_t i = 0; i < p.tensor.size(); ++i)
      p.tensor.value()[i] = t->data[static_cast<std::size_t>(i)];
  }
  for (auto& b : net.named_buffers()) {
    const auto* t = ck.find(prefix + b.name);
    if (!t) throw DataError("checkpoint: missing tensor '" + prefix + b.name + "'");
    if (static_cast<std::int64_t>(t->data.size()) != b.data->size())
      throw DataError("checkpoint: shape mismatch for tensor '" + prefix + b.name + "'");
    for (Eigen::Index i = 0; i < b.data->size(); ++i) (*b.data)[i] = t->data[static_cast<std::size_t>(i)];
  }
}

}  // namespace pulmo
