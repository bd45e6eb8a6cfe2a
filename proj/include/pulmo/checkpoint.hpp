#pragma once

// Model checkpoints: a JSON manifest (version, kind, model hyperparameters,
// tensor directory) next to a little-endian float32 blob holding every tensor
// back to back. Tensors cover learned parameters and running statistics.

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "pulmo/nnet.hpp"

namespace pulmo {

struct CheckpointTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

struct Checkpoint {
  int version = 1;
  std::string kind;  // "detector" or "classifier"
  nlohmann::json* meta_storage = nullptr;  // opaque; use meta() accessors

  std::vector<CheckpointTensor> tensors;

  Checkpoint();
  Checkpoint(const Checkpoint& other);
  Checkpoint& operator=(const Checkpoint& other);
  Checkpoint(Checkpoint&&) noexcept;
  Checkpoint& operator=(Checkpoint&&) noexcept;
  ~Checkpoint();

  nlohmann::json& meta() { return *meta_storage; }
  const nlohmann::json& meta() const { return *meta_storage; }

  const CheckpointTensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

nlohmann::json nnet_config_to_json(const NNetConfig& c);
NNetConfig nnet_config_from_json(const nlohmann::json& j);

// Appends every named parameter and running-statistics buffer of `net`.
void pack_net(Checkpoint& ck, NNet<float>& net, const std::string& prefix);

// Copies matching tensors back into `net`; throws DataError when a tensor is
// missing or its shape disagrees.
void unpack_net(const Checkpoint& ck, NNet<float>& net, const std::string& prefix);

}  // namespace pulmo
