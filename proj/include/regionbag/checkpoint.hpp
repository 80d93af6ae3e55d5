#pragma once

#include <string>

#include "json.hpp"
#include "regionbag/autodiff.hpp"

namespace regionbag {

// Single-file checkpoint container:
//   bytes 0..5   magic "RBCK1\n"
//   bytes 6..13  little-endian u64 header length H
//   H bytes      JSON header {"config": ..., "tensors": [{name, rows, cols}, ...]}
//   rest         tensor payloads in header order, row-major float64
// Doubles are stored verbatim, so save -> load round-trips bit-exactly.

void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     const ad::ParamStore& params);

nlohmann::json read_checkpoint_config(const std::string& path);

// Fill an existing store (names and shapes must match the file exactly).
void load_checkpoint_values(const std::string& path, ad::ParamStore& params);

}  // namespace regionbag
