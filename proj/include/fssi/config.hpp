#pragma once

#include <filesystem>
#include <string>

#include "fssi/backbone.hpp"
#include "fssi/episodic.hpp"
#include "fssi/identification.hpp"

namespace fssi {

// Everything a CLI run needs. Parsed from a flat "key=value" file; '#' starts
// a comment. Recognized keys:
//   variant=SC|DSC  use_ca=true|false  channels=128,256,512  kernel=3x3
//   ca_reduction=128  embed_dim=512
//   K N Q epochs episodes_per_epoch lr crop_frames
//   eval_k eval_repeats eval_shots
//   seed manifest checkpoint out
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  EpisodicEvalConfig eval;
  std::uint64_t seed = 0;
  std::string manifest;
  std::string checkpoint;
  std::string out;

  // Sets the model, training and run seeds together.
  void set_seed(std::uint64_t value);
  void validate() const;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
// Inverse of parse_config for every key.
std::string format_config(const RunConfig& config);

}  // namespace fssi
