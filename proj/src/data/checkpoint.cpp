#include "bgf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace bgf {

namespace {

constexpr char kMagic[8] = {'B', 'G', 'F', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

float get_f32(const std::uint8_t* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(u);
}

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name, const std::string& kind) const {
  for (const auto& t : tensors)
    if (t.name == name && t.kind == kind) return &t;
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    if (static_cast<std::int64_t>(t.data.size()) != shape_numel(t.shape)) {
      throw CheckpointError("checkpoint tensor " + t.name + ": data does not match shape " + shape_str(t.shape));
    }
    manifest.push_back({{"name", t.name}, {"kind", t.kind}, {"shape", t.shape}, {"offset", offset},
                        {"count", t.data.size()}});
    offset += t.data.size();
  }
  const nlohmann::json header = {
      {"version", Checkpoint::kVersion}, {"model", c.model}, {"train", c.train}, {"tensors", manifest}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + 4 * offset);
  for (const auto& t : c.tensors)
    for (float f : t.data) put_f32(out, f);
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw CheckpointError(source + ": not a checkpoint (bad magic)");
  }
  const std::uint64_t hlen = get_u64(bytes.data() + 8);
  if (hlen > bytes.size() - 16) throw CheckpointError(source + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(source + ": malformed header: " + e.what());
  }
  if (header.value("version", 0) != Checkpoint::kVersion) {
    throw CheckpointError(source + ": unsupported checkpoint version");
  }
  Checkpoint c;
  c.model = header.at("model");
  c.train = header.value("train", nlohmann::json::object());
  const std::uint8_t* payload = bytes.data() + 16 + hlen;
  const std::uint64_t nfloats = (bytes.size() - 16 - hlen) / 4;
  for (const auto& m : header.at("tensors")) {
    CheckpointTensor t;
    t.name = m.at("name").get<std::string>();
    t.kind = m.at("kind").get<std::string>();
    t.shape = m.at("shape").get<Shape>();
    const auto off = m.at("offset").get<std::uint64_t>();
    const auto count = m.at("count").get<std::uint64_t>();
    if (static_cast<std::int64_t>(count) != shape_numel(t.shape)) {
      throw CheckpointError(source + ": tensor " + t.name + " count does not match its shape");
    }
    if (off + count > nfloats) throw CheckpointError(source + ": tensor " + t.name + " runs past the payload");
    t.data.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) t.data[i] = get_f32(payload + 4 * (off + i));
    c.tensors.push_back(std::move(t));
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const auto bytes = encode_checkpoint(c);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(path.string() + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(path.string() + ": write failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path.string() + ": cannot open for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

template <typename T>
Checkpoint capture_model(Model<T>& m) {
  Checkpoint c;
  c.model = model_config_to_json(m.config());
  auto add = [&c](const std::string& name, const char* kind, const NdTensor<T>& v) {
    CheckpointTensor t;
    t.name = name;
    t.kind = kind;
    t.shape = v.shape();
    t.data.assign(v.data().begin(), v.data().end());
    c.tensors.push_back(std::move(t));
  };
  m.visit({[&](Parameter<T>& p) { add(p.name, "param", p.value); },
           [&](const std::string& name, NdTensor<T>& b) { add(name, "buffer", b); }});
  return c;
}

template <typename T>
void restore_model(Model<T>& m, const Checkpoint& c) {
  auto load = [&c](const std::string& name, const char* kind, NdTensor<T>& v) {
    const CheckpointTensor* t = c.find(name, kind);
    if (!t) throw CheckpointError(std::string("checkpoint has no ") + kind + " '" + name + "'");
    if (t->shape != v.shape()) {
      throw CheckpointError("checkpoint " + std::string(kind) + " '" + name + "' has shape " + shape_str(t->shape) +
                            ", model expects " + shape_str(v.shape()));
    }
    for (std::size_t i = 0; i < t->data.size(); ++i) v[static_cast<std::int64_t>(i)] = static_cast<T>(t->data[i]);
  };
  m.visit({[&](Parameter<T>& p) { load(p.name, "param", p.value); },
           [&](const std::string& name, NdTensor<T>& b) { load(name, "buffer", b); }});
}

template Checkpoint capture_model(Model<float>&);
template Checkpoint capture_model(Model<double>&);
template void restore_model(Model<float>&, const Checkpoint&);
template void restore_model(Model<double>&, const Checkpoint&);

}  // namespace bgf
