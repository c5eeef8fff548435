#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "bgf/model.hpp"

namespace bgf {

class CheckpointError : public Error {
 public:
  using Error::Error;
};

struct CheckpointTensor {
  std::string name;
  std::string kind;  // param, buffer, momentum
  Shape shape;
  std::vector<float> data;
};

// Layout: "BGFCKPT1", uint64 LE header length, JSON header, float32 LE payload.
// The header holds {version, model, train, tensors[{name, kind, shape, offset,
// count}]}; offsets are in floats from the start of the payload.
struct Checkpoint {
  static constexpr int kVersion = 1;
  nlohmann::json model;                   // model_config_to_json of the resolved config
  nlohmann::json train = nlohmann::json::object();
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name, const std::string& kind) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Parameters and buffers of the model, in visit order.
template <typename T>
Checkpoint capture_model(Model<T>& m);
// Overwrites parameters and buffers. Throws CheckpointError on a missing
// tensor or shape mismatch.
template <typename T>
void restore_model(Model<T>& m, const Checkpoint& c);

}  // namespace bgf
