#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "bevdiff/errors.hpp"

namespace bevdiff {

using Vec2 = std::array<double, 2>;

inline double wrap_angle(double a) {
    while (a >= M_PI) a -= 2.0 * M_PI;
    while (a < -M_PI) a += 2.0 * M_PI;
    return a;
}

enum class Command { kLeft = 0, kStraight = 1, kRight = 2 };
enum class SignalState { kRed = 0, kGreen = 1 };

struct AgentState {
    double x = 0.0, y = 0.0;     // world frame, meters
    double heading = 0.0;        // rad, [-pi, pi)
    double speed = 0.0;          // m/s
    double length = 4.5, width = 2.0;
};

struct MapLane {
    std::vector<Vec2> centerline;  // world frame
    double width = 3.5;
    std::vector<int> successors;
};

struct TrafficSignal {
    Vec2 position{0.0, 0.0};   // stop line center, world frame
    double heading = 0.0;      // lane direction at the stop line
    SignalState state = SignalState::kGreen;
};

// Ground-truth world state at one instant, with the future annotations the
// rasterizer needs. Futures are world-frame waypoint lists. The ego pose
// always anchors the BEV frame; has_ego controls whether its box is drawn
// (an empty scene keeps the frame but renders nothing).
struct SceneSnapshot {
    AgentState ego;
    bool has_ego = true;
    std::vector<AgentState> agents;
    std::vector<MapLane> lanes;
    std::vector<TrafficSignal> signals;
    std::vector<std::vector<Vec2>> agent_futures;  // one list of T_pred points per agent
    std::vector<Vec2> ego_future;                  // exactly T points (or empty = no plan target)
    Command command = Command::kStraight;
    double timestamp = 0.0;
};

// Throws DimensionError/DomainError when the snapshot violates its contract.
void validate_scene(const SceneSnapshot& scene, int expect_t, int expect_t_pred);

// world -> ego frame (x forward, y left)
inline Vec2 world_to_ego(const AgentState& ego, const Vec2& p) {
    const double dx = p[0] - ego.x, dy = p[1] - ego.y;
    const double c = std::cos(ego.heading), s = std::sin(ego.heading);
    return {c * dx + s * dy, -s * dx + c * dy};
}

inline Vec2 ego_to_world(const AgentState& ego, const Vec2& p) {
    const double c = std::cos(ego.heading), s = std::sin(ego.heading);
    return {ego.x + c * p[0] - s * p[1], ego.y + s * p[0] + c * p[1]};
}

}  // namespace bevdiff
