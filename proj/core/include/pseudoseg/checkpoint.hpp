#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "pseudoseg/params.hpp"

namespace pseudoseg::train {

// Named-parameter container with a shape manifest, the resolved experiment
// config (verbatim JSON) and its hash. No cross-version compatibility.
struct Checkpoint {
  std::map<std::string, Tensor> theta;
  std::map<std::string, Tensor> attention;
  std::string config_json;
  std::uint64_t config_hash = 0;
  std::int64_t iteration = 0;
};

std::uint64_t fnv1a64(const std::string& text);

void save_checkpoint(const std::filesystem::path& file, const net::ParamStore& theta,
                     const net::ParamStore& attention, const std::string& config_json,
                     std::int64_t iteration);

Checkpoint load_checkpoint(const std::filesystem::path& file);

// Copies tensors into an existing store by name; shapes must match.
void restore_params(net::ParamStore& store, const std::map<std::string, Tensor>& values);

}  // namespace pseudoseg::train
