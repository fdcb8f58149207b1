#pragma once

#include <filesystem>

#include "cropdoc/capsnet.hpp"
#include "cropdoc/keyvalue.hpp"

namespace cropdoc {

inline constexpr int kCheckpointVersion = 1;

void write_network_config(KeyValues& kv, const NetworkConfig& config);
// Keys absent from `kv` keep the value in `base`.
NetworkConfig read_network_config(const KeyValues& kv, NetworkConfig base = {});

void write_loss_config(KeyValues& kv, const LossConfig& config);
LossConfig read_loss_config(const KeyValues& kv, LossConfig base = {});

/// Checkpoint layout:
///
///   CROPDOC-CHECKPOINT
///   version=1
///   <network config as key=value lines>
///   [manifest]
///   <name> <extents joined by 'x'> <byte offset> <element count>
///   ...
///   [payload]
///   <little-endian float32 values, blocks back to back>
///
/// Blocks cover every trainable tensor plus batch-norm running statistics.
void save_checkpoint(const CapsNet& model, const std::filesystem::path& path);
CapsNet load_checkpoint(const std::filesystem::path& path);

}  // namespace cropdoc
