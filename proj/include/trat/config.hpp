#ifndef TRAT_CONFIG_HPP
#define TRAT_CONFIG_HPP

#include <string>
#include <utility>

#include "trat/data.hpp"
#include "trat/train.hpp"

namespace trat {

// Data source resolved by load_dataset: seeded synthetic moons with a
// train/test split, or pre-split IDX image/label file pairs.
struct DataConfig {
  std::string dataset = "moons";  // "moons" or "idx"
  int n = 1000;
  double noise_std = 0.1;
  double train_frac = 0.8;
  std::uint64_t seed = 0;
  std::string train_images, train_labels, test_images, test_labels;
};

// One experiment description, read from a sectioned key = value text file
// with sections [model], [data], [attack], [taylor], [train], [output].
// Parsing is strict: unknown sections or keys, duplicate keys, and malformed
// values fail with line and column; omitted keys keep the defaults that
// run_config_toml prints.
struct RunConfig {
  std::string arch = "mlp-moons";
  DataConfig data;
  TrainConfig train;  // also carries the [attack], [taylor], [output] payloads
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Fully resolved snapshot: every key explicit and the checkpoint schedule
// expanded, so a run can be reproduced from its output directory alone.
// Numbers use shortest round-trip decimal form.
std::string run_config_toml(const RunConfig& cfg);
void write_run_config(const RunConfig& cfg, const std::string& path);

// (train, test) per the data section.
std::pair<Dataset, Dataset> load_dataset(const DataConfig& cfg);

struct RunArtifacts {
  TrainResult result;
  Dataset train_set;
  Dataset test_set;
};

// One complete run from a resolved config: dataset materialization, network
// initialization from the raw Rng(train.seed) stream (the trainer consumes
// child streams only, so the two never collide), then the training loop.
// Checkpoint and metrics writes follow train.out_dir as usual.
RunArtifacts execute_run(const RunConfig& cfg);

}  // namespace trat

#endif  // TRAT_CONFIG_HPP
