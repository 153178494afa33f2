#include "adaptime/checkpoint.hpp"

#include "adaptime/error.hpp"
#include "adaptime/hashing.hpp"
#include "binary_io.hpp"

namespace adaptime {

namespace {

constexpr std::string_view kMagic = "ADPTCKPT";

std::string_view pooling_name(PoolMode mode) { return mode == PoolMode::kMean ? "mean" : "sum"; }

PoolMode parse_pooling(const std::string& name) {
  if (name == "mean") return PoolMode::kMean;
  if (name == "sum") return PoolMode::kSum;
  fail(ErrorKind::kConfig, "unknown pooling '" + name + "' (expected mean or sum)");
}

}  // namespace

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  fail(ErrorKind::kData, "checkpoint has no tensor '" + name + "'");
}

std::string encode_checkpoint(const Checkpoint& checkpoint) {
  detail::ByteWriter w;
  w.raw(kMagic);
  w.u32(kCheckpointVersion);
  const std::string meta = checkpoint.metadata.dump();
  w.u64(meta.size());
  w.raw(meta);
  w.u32(static_cast<std::uint32_t>(checkpoint.tensors.size()));
  for (const auto& [name, tensor] : checkpoint.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t extent : tensor.shape()) w.u64(extent);
    for (double v : tensor.data()) w.f64(v);
  }
  return w.bytes();
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes, "checkpoint");
  if (r.raw(kMagic.size()) != kMagic) fail(ErrorKind::kData, "checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    fail(ErrorKind::kData, "checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint out;
  const std::uint64_t meta_len = r.u64();
  try {
    out.metadata = nlohmann::json::parse(r.raw(meta_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, std::string("checkpoint: metadata is not JSON: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& extent : shape) extent = r.u64();
    std::vector<double> values(shape_size(shape));
    for (double& v : values) v = r.f64();
    out.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!r.done()) fail(ErrorKind::kData, "checkpoint: trailing bytes");
  return out;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  write_file(path, encode_checkpoint(checkpoint));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

nlohmann::json model_config_to_json(const ModelConfig& config) {
  return {
      {"variant", std::string(variant_name(config.variant))},
      {"vocab_size", config.vocab_size},
      {"embedding_dim", config.embedding_dim},
      {"hidden_dim", config.hidden_dim},
      {"num_windows", config.num_windows},
      {"horizon_hours", config.horizon_hours},
      {"prior_sigma", config.prior_sigma},
      {"pooling", std::string(pooling_name(config.pooling))},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    c.num_windows = j.at("num_windows").get<std::size_t>();
    c.horizon_hours = j.at("horizon_hours").get<double>();
    c.prior_sigma = j.at("prior_sigma").get<double>();
    c.pooling = parse_pooling(j.at("pooling").get<std::string>());
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, std::string("model config: ") + e.what());
  }
}

Checkpoint model_checkpoint(const SequenceModel& model, const nlohmann::json& extra) {
  Checkpoint out;
  out.metadata = extra;
  out.metadata["model"] = model_config_to_json(model.config());
  for (const Parameter* p : model.parameters()) out.tensors.emplace_back(p->name, p->value);
  return out;
}

SequenceModel model_from_checkpoint(const Checkpoint& checkpoint) {
  if (!checkpoint.metadata.contains("model")) fail(ErrorKind::kData, "checkpoint has no model config");
  SequenceModel model(model_config_from_json(checkpoint.metadata.at("model")), 0);
  for (Parameter* p : model.parameters()) {
    const Tensor& stored = checkpoint.tensor(p->name);
    if (stored.shape() != p->value.shape()) {
      fail(ErrorKind::kData, "checkpoint tensor '" + p->name + "' has shape " +
                                 shape_string(stored.shape()) + ", model expects " +
                                 shape_string(p->value.shape()));
    }
    p->value = stored;
    p->zero_grad();
  }
  return model;
}

}  // namespace adaptime
