#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "adaptime/model.hpp"
#include "adaptime/tensor.hpp"

namespace adaptime {

// Binary checkpoint layout; all integers little-endian:
//
//   magic       8 bytes   "ADPTCKPT"
//   version     u32       1
//   meta_len    u64       byte length of the JSON metadata that follows
//   metadata    meta_len  UTF-8 JSON
//   count       u32       number of tensors
//   per tensor: name_len u32, name bytes, rank u32, extents u64[rank],
//               values f64[prod(extents)] (IEEE-754 bits, little-endian,
//               row-major)
struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::string& bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// metadata["model"] holds the model config; `extra` keys are merged in.
Checkpoint model_checkpoint(const SequenceModel& model,
                            const nlohmann::json& extra = nlohmann::json::object());
SequenceModel model_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace adaptime
