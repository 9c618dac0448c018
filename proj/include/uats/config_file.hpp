#pragma once

#include <cstdint>
#include <string>

#include "uats/trainer.hpp"

namespace uats {

// Declarative run configuration: `key = value` lines with [section] nesting,
// mapping 1:1 onto TrainConfig plus the variant id.
struct FileConfig {
  TrainConfig train;
  char variant = 'G';
};

FileConfig parse_config(const std::string& text);
FileConfig load_config(const std::string& path);
std::string serialize_config(const FileConfig& cfg);
std::uint64_t config_hash(const FileConfig& cfg);

}  // namespace uats
