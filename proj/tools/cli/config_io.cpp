// SPDX-License-Identifier: Apache-2.0
#include "config_io.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cpt/mixture.hpp"
#include "cpt/version.hpp"

namespace cpt::cli {

namespace {

using nlohmann::json;

const char* const kSections[] = {"run", "method", "mixture", "schedule", "budget", "model", "stream", "world"};

std::string path_of(const std::string& section, const std::string& key) {
    return section == "run" ? key : section + "." + key;
}

bool parse_bool(const std::string& s, bool& out) {
    if (s == "true" || s == "yes" || s == "on" || s == "1") return out = true, true;
    if (s == "false" || s == "no" || s == "off" || s == "0") return out = false, true;
    return false;
}

template <class T>
bool parse_number(const std::string& s, T& out) {
    const char* first = s.data();
    const char* last = s.data() + s.size();
    const auto [ptr, ec] = std::from_chars(first, last, out);
    return ec == std::errc{} && ptr == last;
}

// Converts an INI string to the JSON type of the default value at the same path.
json typed_value(const json& like, const std::string& raw, const std::string& path) {
    if (like.is_boolean()) {
        bool b = false;
        if (!parse_bool(raw, b)) throw ConfigError(path + ": expected true/false, got '" + raw + "'");
        return b;
    }
    if (like.is_number_unsigned() || like.is_number_integer()) {
        if (like.is_number_unsigned() || (!raw.empty() && raw[0] != '-')) {
            std::uint64_t u = 0;
            if (!parse_number(raw, u)) throw ConfigError(path + ": expected a non-negative integer, got '" + raw + "'");
            return u;
        }
        std::int64_t i = 0;
        if (!parse_number(raw, i)) throw ConfigError(path + ": expected an integer, got '" + raw + "'");
        return i;
    }
    if (like.is_number_float()) {
        double d = 0.0;
        if (!parse_number(raw, d)) throw ConfigError(path + ": expected a number, got '" + raw + "'");
        return d;
    }
    return raw;
}

json config_json(const engine::RunConfig& c) { return json::parse(engine::config_to_json(c)); }

engine::RunConfig finish(const json& j) {
    engine::RunConfig cfg;
    try {
        cfg = engine::config_from_json(j.dump());
        cfg.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return cfg;
}

void set_ratios(json& j, const mixture::MixtureRatios& r) {
    j["mixture"]["lambda_p"] = r.lambda_p;
    j["mixture"]["lambda_d"] = r.lambda_d;
    j["mixture"]["lambda_b"] = r.lambda_b;
}

std::string render_value(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

}  // namespace

engine::RunConfig parse_config(const std::string& text) {
    boost::property_tree::ptree pt;
    std::istringstream in(text);
    try {
        boost::property_tree::ini_parser::read_ini(in, pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
    }
    json j = config_json(engine::RunConfig{});
    for (const auto& [section, body] : pt) {
        if (std::find(std::begin(kSections), std::end(kSections), section) == std::end(kSections)) {
            if (body.empty()) throw ConfigError(section + ": keys must live in a section");
            throw ConfigError(section + ": unknown section");
        }
        if (section == "mixture") {
            if (const auto preset = body.get_optional<std::string>("preset")) {
                try {
                    set_ratios(j, mixture::preset_ratios(*preset));
                } catch (const std::invalid_argument& e) {
                    throw ConfigError(std::string("mixture.preset: ") + e.what());
                }
            }
        }
        for (const auto& [key, node] : body) {
            if (section == "mixture" && key == "preset") continue;
            const std::string path = path_of(section, key);
            const std::string raw = node.get_value<std::string>();
            json& target = section == "run" ? j : j[section];
            if (section == "run" && key != "seed" && key != "batch_size") throw ConfigError(path + ": unknown field");
            if (section == "world" && key == "seed") {
                target[key] = typed_value(json(std::uint64_t{0}), raw, path);
                continue;
            }
            if (!target.contains(key)) throw ConfigError(path + ": unknown field");
            target[key] = typed_value(target[key], raw, path);
        }
    }
    return finish(j);
}

engine::RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    if (path.extension() == ".json") return manifest_from_json(ss.str()).config;
    return parse_config(ss.str());
}

std::string render_config(const engine::RunConfig& cfg) {
    const json j = config_json(cfg);
    std::ostringstream os;
    os << "[run]\nseed = " << j["seed"].dump() << "\nbatch_size = " << j["batch_size"].dump() << "\n";
    for (const char* section : kSections) {
        if (std::string(section) == "run") continue;
        os << "\n[" << section << "]\n";
        for (const auto& [key, value] : j[section].items()) os << key << " = " << render_value(value) << "\n";
    }
    return os.str();
}

const std::vector<PresetGroup>& preset_catalog() {
    static const std::vector<PresetGroup> catalog{
        {"mixture", "pretrain/update/buffer mixing ratios", mixture::preset_names()},
        {"tau", "initial softmax temperature", {"0.01", "0.1", "0.5", "0.75", "1.0"}},
        {"merge-w", "old-new merge weight", {"0.85", "0.9", "0.95"}},
        {"tasks", "number of update tasks T", {"20", "50", "100", "200"}},
        {"budget", "total compute relative to the default", {"0.25x", "0.5x", "1x", "2x", "4x", "6x"}},
        {"pool", "pretraining pool replayed during updates", synthetic::pretrain_pool_names()},
        {"schedule",
         "learning-rate meta-schedule",
         {"independent-cosine", "independent-rsqrt", "autoregressive-cosine", "continued-dynamic-cosine",
          "autoregressive-rsqrt", "continued-dynamic-rsqrt", "peaks-match-rsqrt"}},
        {"ordering", "stream ordering", {"random", "loss", "frequency", "similarity", "time", "dataset"}},
    };
    return catalog;
}

std::vector<std::string> presets_in(const std::string& group) {
    for (const auto& g : preset_catalog())
        if (g.group == group) {
            std::vector<std::string> out;
            for (const auto& v : g.values) out.push_back(group + ":" + v);
            return out;
        }
    throw ConfigError("unknown preset group '" + group + "'");
}

void apply_preset(engine::RunConfig& cfg, const std::string& preset) {
    const auto colon = preset.find(':');
    if (colon == std::string::npos) throw ConfigError("preset '" + preset + "' must look like group:value");
    const std::string group = preset.substr(0, colon);
    const std::string value = preset.substr(colon + 1);
    const auto& catalog = preset_catalog();
    const auto it = std::find_if(catalog.begin(), catalog.end(), [&](const PresetGroup& g) { return g.group == group; });
    if (it == catalog.end()) throw ConfigError("unknown preset group '" + group + "'");
    if (std::find(it->values.begin(), it->values.end(), value) == it->values.end())
        throw ConfigError("unknown preset '" + preset + "'");
    if (group == "mixture") {
        cfg.ratios = mixture::preset_ratios(value);
    } else if (group == "tau") {
        cfg.model.tau_init = std::stod(value);
    } else if (group == "merge-w") {
        cfg.method.merge_w = std::stod(value);
    } else if (group == "tasks") {
        cfg.stream.num_tasks = std::stoul(value);
    } else if (group == "budget") {
        cfg.budget.total_gflops *= std::stod(value.substr(0, value.size() - 1));
    } else if (group == "pool") {
        cfg.world.pretrain_pool = value;
    } else if (group == "schedule") {
        cfg.schedule.variant = schedules::parse_variant(value);
    } else if (group == "ordering") {
        cfg.stream.ordering = streams::parse_ordering(value);
    }
}

std::string manifest_to_json(const RunManifest& m) {
    json j;
    j["tool"] = "cptsim";
    j["tool_version"] = m.tool_version.empty() ? std::string(kVersion) : m.tool_version;
    j["seed"] = m.seed;
    j["config"] = config_json(m.config);
    j["outputs"] = {{"trajectory", m.trajectory_path}, {"stream", m.stream_path}, {"checkpoint", m.checkpoint_path}};
    return j.dump(2);
}

RunManifest manifest_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("manifest: ") + e.what());
    }
    if (!j.contains("config")) throw ConfigError("manifest: missing config");
    RunManifest m;
    m.config = finish(j["config"]);
    m.seed = j.value("seed", m.config.seed);
    m.tool_version = j.value("tool_version", std::string());
    if (j.contains("outputs")) {
        const auto& o = j["outputs"];
        m.trajectory_path = o.value("trajectory", std::string());
        m.stream_path = o.value("stream", std::string());
        m.checkpoint_path = o.value("checkpoint", std::string());
    }
    return m;
}

}  // namespace cpt::cli
