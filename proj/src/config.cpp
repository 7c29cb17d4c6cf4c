#include "cavlab/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace cavlab {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const char* section, std::initializer_list<const char*> known) {
    if (!j.is_object()) throw ConfigError(std::string(section) + ": expected an object");
    const std::set<std::string> names(known.begin(), known.end());
    for (const auto& [key, _] : j.items())
        if (!names.count(key)) throw ConfigError(std::string(section) + ": unknown field '" + key + "'");
}

template <typename T>
void take(const json& j, const char* section, const char* name, T& out) {
    const auto it = j.find(name);
    if (it == j.end()) return;
    try {
        out = it->get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string(section) + "." + name + ": wrong type");
    }
}

}  // namespace

void to_json(json& j, const RoadConfig& c) {
    j = json{{"length", c.length},       {"lanes", c.lanes},           {"lane_speed_limit", c.lane_speed_limit},
             {"max_agent_speed", c.max_agent_speed}, {"scan_range", c.scan_range}, {"n_obstacles", c.n_obstacles},
             {"max_steps", c.max_steps}};
}

void to_json(json& j, const RewardConfig& c) {
    j = json{{"alive_or_goal", c.alive_or_goal},
             {"shift_penalty", c.shift_penalty},
             {"crash_or_bump", c.crash_or_bump},
             {"speed_bonus_divisor", c.speed_bonus_divisor},
             {"overspeed_factor", c.overspeed_factor},
             {"speed_limit", c.speed_limit}};
}

void to_json(json& j, const LearnConfig& c) {
    j = json{{"alpha", c.alpha},
             {"gamma", c.gamma},
             {"episodes", c.episodes},
             {"epsilon_start", c.epsilon_start},
             {"epsilon_end", c.epsilon_end},
             {"epsilon_decay_episodes", c.epsilon_decay_episodes},
             {"seed", c.seed},
             {"v2v", c.v2v},
             {"bucket", c.bucket}};
}

void to_json(json& j, const SimConfig& c) { j = json{{"road", c.road}, {"reward", c.reward}, {"learn", c.learn}}; }

void merge_json(const json& j, RoadConfig& c) {
    reject_unknown(j, "road",
                   {"length", "lanes", "lane_speed_limit", "max_agent_speed", "scan_range", "n_obstacles", "max_steps"});
    take(j, "road", "length", c.length);
    take(j, "road", "lanes", c.lanes);
    take(j, "road", "lane_speed_limit", c.lane_speed_limit);
    take(j, "road", "max_agent_speed", c.max_agent_speed);
    take(j, "road", "scan_range", c.scan_range);
    take(j, "road", "n_obstacles", c.n_obstacles);
    take(j, "road", "max_steps", c.max_steps);
}

void merge_json(const json& j, RewardConfig& c) {
    reject_unknown(j, "reward",
                   {"alive_or_goal", "shift_penalty", "crash_or_bump", "speed_bonus_divisor", "overspeed_factor",
                    "speed_limit"});
    take(j, "reward", "alive_or_goal", c.alive_or_goal);
    take(j, "reward", "shift_penalty", c.shift_penalty);
    take(j, "reward", "crash_or_bump", c.crash_or_bump);
    take(j, "reward", "speed_bonus_divisor", c.speed_bonus_divisor);
    take(j, "reward", "overspeed_factor", c.overspeed_factor);
    take(j, "reward", "speed_limit", c.speed_limit);
}

void merge_json(const json& j, LearnConfig& c) {
    reject_unknown(j, "learn",
                   {"alpha", "gamma", "episodes", "epsilon_start", "epsilon_end", "epsilon_decay_episodes", "seed",
                    "v2v", "bucket"});
    take(j, "learn", "alpha", c.alpha);
    take(j, "learn", "gamma", c.gamma);
    take(j, "learn", "episodes", c.episodes);
    take(j, "learn", "epsilon_start", c.epsilon_start);
    take(j, "learn", "epsilon_end", c.epsilon_end);
    take(j, "learn", "epsilon_decay_episodes", c.epsilon_decay_episodes);
    take(j, "learn", "seed", c.seed);
    take(j, "learn", "v2v", c.v2v);
    take(j, "learn", "bucket", c.bucket);
}

void merge_json(const json& j, SimConfig& c) {
    reject_unknown(j, "config", {"road", "reward", "learn"});
    if (j.contains("road")) merge_json(j.at("road"), c.road);
    if (j.contains("reward")) merge_json(j.at("reward"), c.reward);
    if (j.contains("learn")) merge_json(j.at("learn"), c.learn);
}

SimConfig load_sim_config(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    SimConfig c;
    merge_json(j, c);
    c.road.validate();
    c.reward.validate();
    c.learn.validate();
    return c;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << contents;
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace cavlab
