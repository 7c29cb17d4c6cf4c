#pragma once

// Scripted on-ramp merges written as an FCD log. Each scenario has one ego on
// the ramp and a few vehicles cruising on the main lane. The ego controller
// decelerates on approach, matches speed and position to a gap, moves across
// and then holds lane speed until it leaves the log.
//
// Scenario k occupies its own time window starting at k * 1000 s, so
// vehicles of different scenarios are never co-present. Vehicle ids are
// s<k>_ego and s<k>_m<j>.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cavlab/fcd.hpp"
#include "cavlab/imitation.hpp"

namespace cavlab::imitation {

struct MergeScenarioConfig {
    std::size_t scenarios = 40;
    std::uint64_t seed = 0;
    double dt = 1.0;            // s
    double accel_noise = 0.2;   // std of the ego's acceleration noise, m/s^2
    /// Every n-th scenario (1-based) is a scripted negative; 0 = none. The
    /// negative kind cycles through near_collision, merge_incomplete,
    /// too_short, too_long.
    std::size_t negative_every = 0;

    void validate() const;
};

struct LabeledEgo {
    std::string ego_id;
    std::optional<Reason> expected;  // nullopt = positive
};

struct GeneratedLog {
    std::vector<fcd::Timestep> timesteps;
    std::vector<LabeledEgo> labels;  // one per scenario, in order
    double speed_min = 0.0;          // ego speed range over positive scenarios
    double speed_max = 0.0;
};

GeneratedLog generate_merge_log(const MergeScenarioConfig& cfg);

/// Selector and filter matching the generated geometry.
EgoSelector merge_ego_selector();
FilterConfig merge_filter_config();

}  // namespace cavlab::imitation
