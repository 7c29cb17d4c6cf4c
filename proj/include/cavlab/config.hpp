#pragma once

// JSON configuration files. Layout:
//
//   { "road":   { "length": 66, "lane_speed_limit": [1, 2], ... },
//     "reward": { "alive_or_goal": 0.1, ... },
//     "learn":  { "alpha": 0.4, "episodes": 100000, ... } }
//
// Every section and every field is optional; missing values keep their
// defaults. Unknown fields are rejected so that typos do not pass silently.

#include <string>

#include "cavlab/qlearn.hpp"
#include "cavlab/world.hpp"
#include "json.hpp"

namespace cavlab {

struct SimConfig {
    RoadConfig road;
    RewardConfig reward;
    LearnConfig learn;
};

void to_json(nlohmann::json& j, const RoadConfig& c);
void to_json(nlohmann::json& j, const RewardConfig& c);
void to_json(nlohmann::json& j, const LearnConfig& c);
void to_json(nlohmann::json& j, const SimConfig& c);

/// Overlays the fields present in `j` onto `c`. Throws ConfigError.
void merge_json(const nlohmann::json& j, RoadConfig& c);
void merge_json(const nlohmann::json& j, RewardConfig& c);
void merge_json(const nlohmann::json& j, LearnConfig& c);
void merge_json(const nlohmann::json& j, SimConfig& c);

SimConfig load_sim_config(const std::string& path);

/// Whole file as a string; throws std::runtime_error when unreadable.
std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

}  // namespace cavlab
