#include "cropdoc/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "cropdoc/errors.hpp"

namespace cropdoc {

namespace {

constexpr const char* kMagic = "CROPDOC-CHECKPOINT";

void put_f32(std::string& out, float value) {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

float get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

std::string shape_token(const Shape& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s;
}

struct ManifestEntry {
  std::string shape;
  std::size_t offset = 0;
  std::size_t count = 0;
};

}  // namespace

void write_network_config(KeyValues& kv, const NetworkConfig& c) {
  kv.set("bands", c.bands);
  kv.set("spectral_kernels", c.spectral_kernels);
  kv.set("spatial_kernels", c.spatial_kernels);
  kv.set("capsules", c.capsules);
  kv.set("capsule_dim", c.capsule_dim);
  kv.set("class_dim", c.class_dim);
  kv.set("n_class", c.n_class);
  kv.set("patch", c.patch);
  kv.set("kernel", c.kernel);
  kv.set("receptive_field", c.receptive_field);
  kv.set("routing_iters", c.routing_iters);
  kv.set("decoder_hidden", c.decoder_hidden);
}

NetworkConfig read_network_config(const KeyValues& kv, NetworkConfig c) {
  c.bands = kv.get_size("bands", c.bands);
  c.spectral_kernels = kv.get_size("spectral_kernels", c.spectral_kernels);
  c.spatial_kernels = kv.get_size("spatial_kernels", c.spatial_kernels);
  c.capsules = kv.get_size("capsules", c.capsules);
  c.capsule_dim = kv.get_size("capsule_dim", c.capsule_dim);
  c.class_dim = kv.get_size("class_dim", c.class_dim);
  c.n_class = kv.get_size("n_class", c.n_class);
  c.patch = kv.get_size("patch", c.patch);
  c.kernel = kv.get_size("kernel", c.kernel);
  c.receptive_field = kv.get_size("receptive_field", c.receptive_field);
  c.routing_iters = kv.get_size("routing_iters", c.routing_iters);
  c.decoder_hidden = kv.get_size("decoder_hidden", c.decoder_hidden);
  return c;
}

void write_loss_config(KeyValues& kv, const LossConfig& c) {
  kv.set("edge_plus", c.edge_plus);
  kv.set("edge_minus", c.edge_minus);
  kv.set("mu", c.mu);
  kv.set("theta", c.theta);
}

LossConfig read_loss_config(const KeyValues& kv, LossConfig c) {
  c.edge_plus = kv.get_double("edge_plus", c.edge_plus);
  c.edge_minus = kv.get_double("edge_minus", c.edge_minus);
  c.mu = kv.get_double("mu", c.mu);
  c.theta = kv.get_double("theta", c.theta);
  return c;
}

void save_checkpoint(const CapsNet& model, const std::filesystem::path& path) {
  std::string header = std::string(kMagic) + "\n";
  KeyValues kv;
  kv.set("version", static_cast<std::size_t>(kCheckpointVersion));
  write_network_config(kv, model.config());
  header += kv.dump();
  header += "[manifest]\n";

  std::string payload;
  for (const auto& block : model.blocks()) {
    header += block.name + " " + shape_token(block.shape) + " " + std::to_string(payload.size()) + " " +
              std::to_string(block.values.size()) + "\n";
    for (double v : block.values) put_f32(payload, static_cast<float>(v));
  }
  header += "[payload]\n";

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw FormatError("failed writing checkpoint " + path.string());
}

CapsNet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::size_t pos = 0;
  auto next_line = [&](std::string& line) {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw FormatError("checkpoint header truncated: " + path.string());
    line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
  };

  std::string line;
  next_line(line);
  if (line != kMagic) throw FormatError("not a checkpoint (bad magic): " + path.string());

  std::string config_text;
  for (next_line(line); line != "[manifest]"; next_line(line)) config_text += line + "\n";
  const KeyValues kv = KeyValues::parse(config_text, path.string());
  const auto version = kv.get_u64("version", 0);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }

  std::map<std::string, ManifestEntry> manifest;
  for (next_line(line); line != "[payload]"; next_line(line)) {
    std::istringstream row(line);
    std::string name;
    ManifestEntry e;
    if (!(row >> name >> e.shape >> e.offset >> e.count)) {
      throw FormatError("malformed manifest line '" + line + "' in " + path.string());
    }
    manifest[name] = e;
  }
  const std::size_t payload_start = pos;
  const std::size_t payload_size = bytes.size() - payload_start;

  NetworkConfig config;
  try {
    config = read_network_config(kv);
    config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  CapsNet model(config);
  for (auto& block : model.blocks()) {
    const auto it = manifest.find(block.name);
    if (it == manifest.end()) throw FormatError("checkpoint missing block " + block.name);
    const ManifestEntry& e = it->second;
    if (e.shape != shape_token(block.shape) || e.count != block.values.size()) {
      throw FormatError("checkpoint block " + block.name + " has shape " + e.shape + ", expected " +
                        shape_token(block.shape));
    }
    if (e.offset % 4 != 0 || e.offset + 4 * e.count > payload_size) {
      throw FormatError("checkpoint payload truncated at block " + block.name);
    }
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + payload_start + e.offset);
    for (std::size_t i = 0; i < e.count; ++i) block.values[i] = static_cast<double>(get_f32(p + 4 * i));
  }
  return model;
}

}  // namespace cropdoc
