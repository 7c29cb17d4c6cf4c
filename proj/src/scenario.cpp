#include "cavlab/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "cavlab/rng.hpp"

namespace cavlab::imitation {

namespace {

constexpr std::uint64_t kScenarioStream = 0x4d45524745ULL;  // "MERGE"

constexpr double kRampY = -3.2;
constexpr double kMergeStartX = 120.0;
constexpr double kZoneX = 300.0;  // end of the ramp
constexpr double kExitX = 520.0;
constexpr double kWindow = 1000.0;
constexpr int kLateralSteps = 4;
constexpr double kPi = 3.14159265358979323846;

enum class Phase { Approach, GapMatch, Lateral, Cruise };

double heading(double vx, double vy) {
    double a = std::atan2(vx, vy) * 180.0 / kPi;
    if (a < 0.0) a += 360.0;
    if (a >= 360.0) a -= 360.0;
    return a;
}

struct Main {
    double x;
};

}  // namespace

void MergeScenarioConfig::validate() const {
    if (scenarios == 0) throw std::invalid_argument("scenarios must be >= 1");
    if (!(dt > 0.0) || dt > 2.0) throw std::invalid_argument("dt must be in (0, 2]");
    if (!(accel_noise >= 0.0) || !std::isfinite(accel_noise)) throw std::invalid_argument("accel_noise must be >= 0");
}

EgoSelector merge_ego_selector() { return EgoSelector{std::string(R"(s\d+_ego)"), std::nullopt}; }

FilterConfig merge_filter_config() {
    FilterConfig f;
    f.merge_zone = MergeZone{kZoneX, 1e9, "main_"};
    return f;
}

GeneratedLog generate_merge_log(const MergeScenarioConfig& cfg) {
    cfg.validate();
    GeneratedLog out;
    out.speed_min = std::numeric_limits<double>::infinity();
    out.speed_max = -std::numeric_limits<double>::infinity();
    std::size_t negatives_made = 0;

    for (std::size_t k = 0; k < cfg.scenarios; ++k) {
        Rng rng(derive_seed(cfg.seed, kScenarioStream, k));
        std::optional<Reason> kind;
        if (cfg.negative_every > 0 && (k + 1) % cfg.negative_every == 0) {
            static constexpr Reason kCycle[] = {Reason::NearCollision, Reason::MergeIncomplete, Reason::TooShort,
                                                Reason::TooLong};
            kind = kCycle[negatives_made++ % 4];
        }

        const std::string prefix = "s" + std::to_string(k);
        const std::string ego_id = prefix + "_ego";
        out.labels.push_back({ego_id, kind});

        const double v_main = rng.uniform(24.0, 28.0);
        const double v_slow = 0.6 * v_main;
        std::vector<Main> mains;
        const int n_main = 3 + static_cast<int>(rng.below(2));
        double x = rng.uniform(-80.0, -20.0);
        for (int j = 0; j < n_main; ++j) {
            mains.push_back({x});
            x += rng.uniform(40.0, 70.0);
        }

        double ex = 0.0, ey = kRampY, ev = rng.uniform(22.0, 26.0), evy = 0.0;
        Phase phase = Phase::Approach;
        int lateral_done = 0;
        std::size_t max_steps = 120;

        if (kind == Reason::TooShort) {
            // Already merged when first seen, and only briefly observed.
            ex = kZoneX + 20.0;
            ey = 0.0;
            ev = v_main;
            phase = Phase::Cruise;
            max_steps = 6;
            for (auto& m : mains) m.x += kZoneX + 20.0 - 120.0;
        }
        if (kind == Reason::TooLong) max_steps = 520;

        // Target point on the main lane: a gap midpoint, or a vehicle for the
        // near-collision script.
        auto target_point = [&] {
            std::vector<double> xs;
            for (const auto& m : mains) xs.push_back(m.x);
            std::sort(xs.begin(), xs.end());
            std::vector<double> candidates;
            if (kind == Reason::NearCollision) {
                candidates = xs;
            } else {
                candidates.push_back(xs.front() - 25.0);
                for (std::size_t j = 0; j + 1 < xs.size(); ++j) candidates.push_back(0.5 * (xs[j] + xs[j + 1]));
                candidates.push_back(xs.back() + 25.0);
            }
            double target = candidates.front();
            for (double c : candidates)
                if (std::fabs(c - ex) < std::fabs(target - ex)) target = c;
            return target;
        };

        const double base_time = static_cast<double>(k) * kWindow;
        for (std::size_t step = 0; step < max_steps; ++step) {
            fcd::Timestep ts;
            ts.time = base_time + static_cast<double>(step) * cfg.dt;

            double target = target_point();

            // Controller.
            double accel = 0.0;
            switch (phase) {
                case Phase::Approach:
                    accel = std::clamp((v_slow - ev) / cfg.dt, -1.5, 1.5);
                    break;
                case Phase::GapMatch:
                case Phase::Lateral: {
                    const double v_des = std::clamp(v_main + 0.25 * (target - ex), 8.0, v_main + 6.0);
                    accel = std::clamp((v_des - ev) / cfg.dt, -2.5, 2.0);
                    break;
                }
                case Phase::Cruise:
                    accel = std::clamp((v_main - ev) / cfg.dt, -2.0, 1.2);
                    break;
            }
            if (kind == Reason::MergeIncomplete && phase != Phase::Approach) {
                // Never finds a gap: crawls to the end of the ramp and waits.
                const double v_des = std::max(0.0, std::min(v_slow, 0.4 * (kZoneX - 10.0 - ex)));
                accel = std::clamp((v_des - ev) / cfg.dt, -3.0, 1.5);
            }

            const bool on_ramp = ey < -1.6;
            fcd::Snapshot ego{ego_id, ex, ey, ev, heading(ev, evy), std::string(on_ramp ? "ramp_0" : "main_0")};
            ts.snapshots.push_back(ego);
            for (std::size_t j = 0; j < mains.size(); ++j)
                ts.snapshots.push_back({prefix + "_m" + std::to_string(j), mains[j].x, 0.0, v_main, 90.0,
                                        std::string("main_0")});
            out.timesteps.push_back(std::move(ts));

            if (!kind) {
                out.speed_min = std::min(out.speed_min, ev);
                out.speed_max = std::max(out.speed_max, ev);
            }

            if (kind != Reason::TooLong && phase == Phase::Cruise && ex >= kExitX) break;

            // Advance.
            accel += cfg.accel_noise * rng.normal();
            ev = std::max(0.0, ev + accel * cfg.dt);
            ex += ev * cfg.dt;
            for (auto& m : mains) m.x += v_main * cfg.dt;

            evy = 0.0;
            if (phase == Phase::Lateral) {
                evy = -kRampY / (kLateralSteps * cfg.dt);
                ey = std::min(0.0, ey + evy * cfg.dt);
                if (++lateral_done == kLateralSteps) {
                    ey = 0.0;
                    phase = Phase::Cruise;
                    if (kind == Reason::NearCollision) ex = target_point() + 0.5;
                }
            }
            if (phase == Phase::Approach && ex >= kMergeStartX * 0.5 && std::fabs(ev - v_slow) < 1.0)
                phase = Phase::GapMatch;
            target = target_point();
            if (phase == Phase::GapMatch && kind != Reason::MergeIncomplete && ex >= kMergeStartX &&
                std::fabs(target - ex) < 5.0 && std::fabs(ev - v_main) < 2.0)
                phase = Phase::Lateral;
            if (kind == Reason::NearCollision && phase == Phase::Cruise) ev = v_main;
        }
    }
    if (!(out.speed_min <= out.speed_max)) out.speed_min = out.speed_max = 0.0;
    return out;
}

}  // namespace cavlab::imitation
