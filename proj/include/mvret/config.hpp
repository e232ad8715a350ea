#pragma once

// Run configuration shared by every CLI subcommand. Serialized as flat JSON
// keys; the hash identifies a run in every artifact it writes.

#include <cstdint>
#include <string>
#include <string_view>

#include "mvret/cam.hpp"
#include "mvret/retrieval.hpp"
#include "mvret/training.hpp"

namespace mvret {

struct RunConfig {
  std::string data;       // dataset directory; empty -> synthetic fixture
  std::string data_eval;  // optional second dataset for evaluation
  std::string model;      // parameter directory for eval/bound
  std::string out;
  std::uint64_t seed = 0;           // training seed
  std::uint64_t synth_seed = 42;    // fixture used when `data` is empty
  std::size_t views = 0;            // evenly spaced view subset, 0 = all
  AdapterKind adapter = AdapterKind::cam;
  CamConfig cam;
  TrainConfig train;  // train.seed is ignored; see train_config()
  VfsConfig vfs;
  std::string lexicon_path;  // optional name list restricting the lexicon
  AnmrrVariant anmrr_variant = AnmrrVariant::gtm;
  std::size_t recall_k = 0;

  /// `train` with its seed taken from `seed`.
  TrainConfig train_config() const;
  /// Throws ErrorKind::config.
  void validate() const;
};

/// Canonical text: fixed key order, 2-space indent, trailing newline.
std::string serialize_run_config(const RunConfig& config);

/// Keys missing from `text` keep the values in `base`. Unknown keys and
/// mistyped values throw ErrorKind::config; malformed JSON ErrorKind::format.
RunConfig parse_run_config(std::string_view text, RunConfig base = {});

/// FNV-1a over the canonical serialization with `out` cleared, so the same
/// run written to two directories carries the same hash.
std::uint64_t config_hash(const RunConfig& config);

}  // namespace mvret
