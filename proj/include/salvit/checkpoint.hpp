#pragma once

#include <map>
#include <string>

#include "salvit/params.hpp"

namespace salvit::nc {

/// Checkpoint file layout:
///   line  "SALVIT-CKPT 1"
///   lines "meta <key> <value...>"             (free-form metadata)
///   lines "tensor <name> <rank> <d0> ... f32" (one per parameter)
///   line  "END"
///   raw little-endian 32-bit float payloads in manifest order.
void save_checkpoint(const std::string& path, const ParamStore& params,
                     const std::map<std::string, std::string>& meta);

struct LoadedCheckpoint {
  std::map<std::string, std::string> meta;
  ParamStore params;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace salvit::nc
