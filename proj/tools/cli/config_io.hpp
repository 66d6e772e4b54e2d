// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cpt/engine.hpp"

namespace cpt::cli {

/// Config error carrying the offending field path in its message.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Parses INI-style text. Sections mirror the modules ([method], [mixture], [schedule], [budget],
/// [model], [stream], [world]); [run] holds seed and batch_size. mixture.preset expands to the
/// named ratios before explicit lambda keys apply. The result is validated.
engine::RunConfig parse_config(const std::string& text);

/// Reads an INI config, or the config snapshot of a run manifest when the file ends in .json.
engine::RunConfig load_config(const std::filesystem::path& path);

/// INI rendering of every field; parse_config(render_config(c)) == c field by field.
std::string render_config(const engine::RunConfig& cfg);

/// Applies a named preset of the form group:value (see preset_catalog()).
void apply_preset(engine::RunConfig& cfg, const std::string& preset);

struct PresetGroup {
    std::string group;
    std::string description;
    std::vector<std::string> values;
};
const std::vector<PresetGroup>& preset_catalog();
/// Every preset of a group as "group:value".
std::vector<std::string> presets_in(const std::string& group);

struct RunManifest {
    engine::RunConfig config;
    std::uint64_t seed = 0;
    std::string tool_version;
    std::string trajectory_path;
    std::string stream_path;
    std::string checkpoint_path;
};

std::string manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(const std::string& text);

}  // namespace cpt::cli
