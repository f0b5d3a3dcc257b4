#pragma once

#include <string>
#include <vector>

#include "fssi/features.hpp"

namespace fssi {

struct SpeakerData {
  std::string id;
  std::vector<FeatureMatrix> utterances;
};

// Speakers in a fixed order; used for training sets and enrollment/test pools.
struct Dataset {
  std::vector<SpeakerData> speakers;

  std::size_t min_utterances() const;
  std::size_t total_utterances() const;
  // Index of the speaker with this id, or speakers.size() when absent.
  std::size_t find(const std::string& id) const;
};

}  // namespace fssi
