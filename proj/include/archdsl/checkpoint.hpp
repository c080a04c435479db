#pragma once

#include <string>

#include "json.hpp"

#include "archdsl/tensor.hpp"

namespace archdsl {

// Flat named-array container:
//   8 bytes  magic "ADSLCKPT"
//   8 bytes  little-endian uint64 header length N
//   N bytes  UTF-8 JSON header {"version":1,"meta":{...},
//            "tensors":[{"name","shape","offset","count"}, ...]}
//   payload  little-endian IEEE-754 float64 values; offsets are in values, not bytes
struct Checkpoint {
  ParamStore params;
  nlohmann::json meta = nlohmann::json::object();
};

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const nlohmann::json& meta = nlohmann::json::object());
Checkpoint load_checkpoint(const std::string& path);

}  // namespace archdsl
