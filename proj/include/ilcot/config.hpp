#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "ilcot/train.hpp"

namespace ilcot {

// Flat key=value settings. '#' starts a comment; blank lines are skipped.
using Settings = std::map<std::string, std::string>;

Settings read_settings(const std::filesystem::path& path);
Settings parse_settings(const std::string& text);

// Applies settings onto cfg. Unknown keys and unparsable values throw UsageError.
void apply_settings(TrainConfig& cfg, const Settings& s);
Settings to_settings(const TrainConfig& cfg);

}  // namespace ilcot
