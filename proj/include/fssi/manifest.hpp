#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fssi/dataset.hpp"

namespace fssi {

enum class Split { kTrain, kEnroll, kTest };

std::string to_string(Split split);
Split parse_split(const std::string& text);

struct ManifestRow {
  std::string speaker_id;
  std::string path;  // as written; relative paths resolve against the manifest's directory
  Split split = Split::kTrain;

  bool operator==(const ManifestRow&) const = default;
};

// UTF-8 CSV with header "speaker_id,path,split". Fields may not contain
// commas, quotes or newlines.
struct Manifest {
  std::vector<ManifestRow> rows;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const ManifestRow& row) const;
  // Speakers in first-appearance order with their rows of one split.
  std::vector<std::pair<std::string, std::vector<const ManifestRow*>>> group(Split split) const;
};

// Validates the header, fields, split tags, that no path appears twice and,
// when `check_paths` is set, that every path exists.
Manifest read_manifest(const std::filesystem::path& path, bool check_paths = true);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

// Reads every WAV of one split and extracts log-mel features.
Dataset load_split(const Manifest& manifest, Split split);

}  // namespace fssi
