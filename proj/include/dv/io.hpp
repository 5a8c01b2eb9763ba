#pragma once

#include <map>
#include <string>

#include "dv/tensor.hpp"

namespace dv::io {

// Flat binary tensor format: magic "DVT1", rank (LE u32), extents (LE u32
// each), then values as LE f64.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Checkpoint: directory of .dvt files plus manifest.json (name -> file, shape).
void save_checkpoint(const std::string& dir, const std::map<std::string, Tensor>& params);
std::map<std::string, Tensor> load_checkpoint(const std::string& dir);

}  // namespace dv::io
