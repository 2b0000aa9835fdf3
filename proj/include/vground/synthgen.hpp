#pragma once

// Deterministic synthetic episodic-memory data: noise-background feature-grid
// videos with planted moving concept patterns plus per-task annotations.

#include "vground/config.hpp"
#include "vground/data.hpp"
#include "vground/rng.hpp"

namespace vground {

// C seeded patterns with pairwise |correlation| < 0.5, plus the query
// vocabulary. Throws ConfigError for C < 2.
ConceptBank make_concept_bank(int concepts, std::uint64_t seed, int pattern_size = 4, int channels = 3);

Episode generate_episode(const ConceptBank& bank, const GenConfig& cfg, std::uint64_t seed, const std::string& id,
                         const std::string& split);

Dataset generate_dataset(const GenConfig& cfg);

}  // namespace vground
