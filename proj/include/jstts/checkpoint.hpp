#pragma once

// Checkpoint container: magic, format version, a JSON header, then raw
// little-endian float64 blobs in header order. Files are written to a
// temporary sibling and renamed into place.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "jstts/model.hpp"
#include "jstts/optim.hpp"
#include "jstts/textproc.hpp"

namespace jstts {

inline constexpr uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::string group;  // parameter group, or "optim" for optimizer state
  Tensor value;
};

struct Checkpoint {
  int stage = 0;
  int64_t step = 0;
  ModelConfig model_config;
  IdRegistry registry;
  std::map<std::string, std::string> meta;  // config echo and run bookkeeping
  std::vector<NamedTensor> tensors;

  const Tensor* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Model parameters, vocoder state and trained-language set.
void store_model(Checkpoint& ck, const Model& model);
// Copies parameters into a model built from ck.model_config. Throws
// ValueError on a missing or misshapen parameter.
void load_model(const Checkpoint& ck, Model& model);

// Per-group Adam moments and step counts.
void store_optim(Checkpoint& ck, const std::string& prefix, const std::vector<Parameter*>& params, const AdamState& st);
bool load_optim(const Checkpoint& ck, const std::string& prefix, const std::vector<Parameter*>& params, AdamState& st);

uint64_t group_checksum(const Checkpoint& ck, Group g);

}  // namespace jstts
