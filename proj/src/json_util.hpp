#pragma once

// JSON helpers shared by the parameter files and the run config.

#include <string>

#include "json.hpp"
#include "mvret/cam.hpp"
#include "mvret/error.hpp"

namespace mvret::detail {

using ordered_json = nlohmann::ordered_json;

inline std::string_view pool_mode_name(PoolMode mode) {
  return mode == PoolMode::average ? "average" : "max";
}

inline PoolMode parse_pool_mode(std::string_view text) {
  if (text == "average") return PoolMode::average;
  if (text == "max") return PoolMode::max;
  fail(ErrorKind::config, "unknown pool mode '" + std::string(text) + "' (average|max)");
}

inline ordered_json cam_config_to_json(const CamConfig& c) {
  ordered_json j;
  j["chunk_size"] = c.chunk_size;
  j["conv_stride"] = c.conv_stride;
  j["pool_kernel"] = c.pool_kernel;
  j["pool_mode"] = std::string(pool_mode_name(c.pool_mode));
  j["num_cbr_blocks"] = c.num_cbr_blocks;
  j["lambda"] = c.lambda;
  j["dino_dim"] = c.dino_dim;
  j["normalize_descriptor"] = c.normalize_descriptor;
  j["bn_momentum"] = c.bn_momentum;
  j["bn_eps"] = c.bn_eps;
  return j;
}

// Missing keys keep the value already in `c`.
inline void cam_config_from_json(const ordered_json& j, CamConfig& c) {
  if (j.contains("chunk_size")) c.chunk_size = j.at("chunk_size").get<std::size_t>();
  if (j.contains("conv_stride")) c.conv_stride = j.at("conv_stride").get<std::size_t>();
  if (j.contains("pool_kernel")) c.pool_kernel = j.at("pool_kernel").get<std::size_t>();
  if (j.contains("pool_mode")) c.pool_mode = parse_pool_mode(j.at("pool_mode").get<std::string>());
  if (j.contains("num_cbr_blocks")) c.num_cbr_blocks = j.at("num_cbr_blocks").get<std::size_t>();
  if (j.contains("lambda")) c.lambda = j.at("lambda").get<double>();
  if (j.contains("dino_dim")) c.dino_dim = j.at("dino_dim").get<std::size_t>();
  if (j.contains("normalize_descriptor"))
    c.normalize_descriptor = j.at("normalize_descriptor").get<bool>();
  if (j.contains("bn_momentum")) c.bn_momentum = j.at("bn_momentum").get<double>();
  if (j.contains("bn_eps")) c.bn_eps = j.at("bn_eps").get<double>();
}

}  // namespace mvret::detail
