#pragma once

#include <istream>
#include <ostream>
#include <string>

#include "duplex/pairs.hpp"

namespace duplex::pairs {

// Line-delimited dataset format: a JSON header line carrying the stream
// constants, then one JSON record per pair with integer token arrays.

inline constexpr const char* kDatasetFormat = "duplex-pairs";
inline constexpr int kDatasetVersion = 1;

void write_dataset(std::ostream& out, const PreferenceDataset& ds,
                   const stream::TokenizerConfig& tcfg);
void save_dataset(const std::string& path, const PreferenceDataset& ds,
                  const stream::TokenizerConfig& tcfg);

/// Validates the header (format name, version, stream constants) and
/// reconstructs every pair. Throws SchemaError on malformed input.
PreferenceDataset read_dataset(std::istream& in);
PreferenceDataset load_dataset(const std::string& path);

}  // namespace duplex::pairs
