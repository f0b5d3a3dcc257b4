#include "fssi/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "fssi/errors.hpp"
#include "fssi/wav.hpp"

namespace fssi {
namespace {

constexpr const char* kHeader = "speaker_id,path,split";

void check_field(const std::string& field, const std::string& what) {
  if (field.empty()) throw DataError("manifest " + what + " is empty");
  if (field.find_first_of(",\"\r\n") != std::string::npos) {
    throw DataError("manifest " + what + " '" + field + "' contains a comma, quote or newline");
  }
}

}  // namespace

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kEnroll: return "enroll";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "enroll") return Split::kEnroll;
  if (text == "test") return Split::kTest;
  throw DataError("unknown split tag '" + text + "' (expected train, enroll or test)");
}

std::filesystem::path Manifest::resolve(const ManifestRow& row) const {
  std::filesystem::path p(row.path);
  return p.is_absolute() ? p : base_dir / p;
}

std::vector<std::pair<std::string, std::vector<const ManifestRow*>>> Manifest::group(
    Split split) const {
  std::vector<std::pair<std::string, std::vector<const ManifestRow*>>> groups;
  for (const ManifestRow& row : rows) {
    if (row.split != split) continue;
    auto it = std::find_if(groups.begin(), groups.end(),
                           [&](const auto& g) { return g.first == row.speaker_id; });
    if (it == groups.end()) {
      groups.emplace_back(row.speaker_id, std::vector<const ManifestRow*>{});
      it = groups.end() - 1;
    }
    it->second.push_back(&row);
  }
  return groups;
}

Manifest read_manifest(const std::filesystem::path& path, bool check_paths) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  Manifest m;
  m.base_dir = path.parent_path();
  std::string line;
  if (!std::getline(in, line) || line != kHeader) {
    throw DataError(path.string() + ": first line must be '" + std::string(kHeader) + "'");
  }
  std::set<std::string> seen;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = c1 == std::string::npos ? c1 : line.find(',', c1 + 1);
    if (c2 == std::string::npos || line.find(',', c2 + 1) != std::string::npos) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected 3 fields");
    }
    ManifestRow row{line.substr(0, c1), line.substr(c1 + 1, c2 - c1 - 1),
                    parse_split(line.substr(c2 + 1))};
    check_field(row.speaker_id, "speaker id");
    check_field(row.path, "path");
    if (!seen.insert(row.path).second) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": path " + row.path +
                      " is listed more than once");
    }
    if (check_paths && !std::filesystem::exists(m.resolve(row))) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": missing file " +
                      m.resolve(row).string());
    }
    m.rows.push_back(std::move(row));
  }
  return m;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::set<std::string> seen;
  for (const ManifestRow& row : manifest.rows) {
    check_field(row.speaker_id, "speaker id");
    check_field(row.path, "path");
    if (!seen.insert(row.path).second) throw DataError("path " + row.path + " appears twice");
  }
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << kHeader << '\n';
  for (const ManifestRow& row : manifest.rows) {
    out << row.speaker_id << ',' << row.path << ',' << to_string(row.split) << '\n';
  }
  if (!out) throw DataError("write failed for " + path.string());
}

Dataset load_split(const Manifest& manifest, Split split) {
  Dataset data;
  for (const auto& [speaker, rows] : manifest.group(split)) {
    SpeakerData s{speaker, {}};
    for (const ManifestRow* row : rows) s.utterances.push_back(log_mel(read_wav(manifest.resolve(*row))));
    data.speakers.push_back(std::move(s));
  }
  return data;
}

}  // namespace fssi
