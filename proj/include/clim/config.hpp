#pragma once

#include <filesystem>
#include <string>

#include "clim/dataset.hpp"
#include "clim/evaluation.hpp"
#include "clim/trainer.hpp"

namespace clim {

/// Everything one run needs. Sections of the JSON file: data, augment,
/// contrastive, neighborhood, train (with a nested encoder), eval.
struct RunConfig {
  std::string data_path;  // empty = generate `synthetic`
  SyntheticSpec synthetic;
  TrainConfig train;
  ProbeConfig eval;
  int eval_knn_k = 20;

  void validate() const;
};

/// Unknown keys and wrongly typed values are ValidationErrors naming the key.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& path);
std::string to_json(const RunConfig& cfg);
void save_config(const RunConfig& cfg, const std::filesystem::path& path);

/// Loads data_path (tensor file or PPM directory) or generates the synthetic set.
Dataset load_dataset(const std::string& path, const SyntheticSpec& fallback);

}  // namespace clim
