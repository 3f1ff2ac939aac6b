#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "bevdiff/errors.hpp"

namespace bevdiff {

// Planned ego motion: T waypoints in the ego frame (x forward, y left),
// meters, one every dt_plan seconds.
struct Trajectory {
    std::vector<std::array<double, 2>> waypoints;
    double dt_plan = 0.5;

    // Clamps per-step displacements to v_max*dt_plan, preserving direction.
    // Network outputs pass through here so downstream consumers always see a
    // kinematically sane plan.
    static Trajectory clamped(std::vector<std::array<double, 2>> pts, double dt_plan,
                              double v_max);

    void validate(int expect_t, double v_max) const;
};

inline Trajectory Trajectory::clamped(std::vector<std::array<double, 2>> pts, double dt_plan,
                                      double v_max) {
    const double max_step = v_max * dt_plan;
    std::array<double, 2> prev{0.0, 0.0};
    for (auto& p : pts) {
        if (!std::isfinite(p[0]) || !std::isfinite(p[1]))
            throw NumericalError("trajectory: non-finite waypoint");
        double dx = p[0] - prev[0], dy = p[1] - prev[1];
        const double d = std::hypot(dx, dy);
        if (d > max_step) {
            dx *= max_step / d;
            dy *= max_step / d;
            p = {prev[0] + dx, prev[1] + dy};
        }
        prev = p;
    }
    Trajectory t;
    t.waypoints = std::move(pts);
    t.dt_plan = dt_plan;
    return t;
}

inline void Trajectory::validate(int expect_t, double v_max) const {
    if (expect_t >= 0 && static_cast<int>(waypoints.size()) != expect_t)
        throw DimensionError("trajectory: expected " + std::to_string(expect_t) + " waypoints");
    std::array<double, 2> prev{0.0, 0.0};
    for (const auto& p : waypoints) {
        if (!std::isfinite(p[0]) || !std::isfinite(p[1]))
            throw NumericalError("trajectory: non-finite waypoint");
        if (std::hypot(p[0] - prev[0], p[1] - prev[1]) > v_max * dt_plan + 1e-9)
            throw DomainError("trajectory: waypoint spacing exceeds v_max * dt_plan");
        prev = p;
    }
}

}  // namespace bevdiff
