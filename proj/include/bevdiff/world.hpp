#pragma once

#include <functional>
#include <optional>
#include <string>

#include "bevdiff/raster.hpp"
#include "bevdiff/rng.hpp"
#include "bevdiff/scene.hpp"
#include "bevdiff/trajectory.hpp"

namespace bevdiff {

enum class ScenarioKind { kLaneFollow = 0, kLeadBrake = 1, kMerge = 2, kSignalizedStop = 3 };
enum class TerminalStatus { kRunning = 0, kSuccess, kCollision, kRedLight, kTimeout, kOffRoad };
enum class InfractionKind { kCollision = 0, kRedLight, kOffRoad, kTimeout };

const char* scenario_kind_name(ScenarioKind k);
std::optional<ScenarioKind> scenario_kind_from_name(const std::string& name);
const char* terminal_status_name(TerminalStatus s);
const char* infraction_kind_name(InfractionKind k);

struct ScenarioSpec {
    ScenarioKind kind = ScenarioKind::kLaneFollow;
    uint64_t seed = 0;
    int npc_count = -1;        // -1 = kind default
    double time_limit = 40.0;  // seconds
};

struct SimParams {
    double dt = 0.1;
    double wheelbase = 2.8;
    double v_max = 15.0;
    double accel_min = -6.0, accel_max = 3.0;
    double steer_max = 0.6;
    double cruise_speed = 5.0;
    // IDM
    double idm_accel = 2.0;
    double idm_brake = 3.0;
    double idm_gap0 = 2.0;
    double idm_headway = 1.5;
};

struct EgoControl {
    double accel = 0.0;  // m/s^2
    double steer = 0.0;  // rad
};

struct NpcState {
    AgentState agent;
    double s = 0.0;           // arc position along its lane centerline
    int lane = 0;
    double cruise = 5.0;
    bool scripted_lead = false;  // LEAD_BRAKE actor
};

// Scripted brake event for the LEAD_BRAKE lead vehicle.
struct LeadBrakeScript {
    double brake_at = 4.0;
    double hold_for = 3.0;
    double resume_at() const { return brake_at + hold_for; }
};

struct WorldState {
    ScenarioKind kind = ScenarioKind::kLaneFollow;
    uint64_t seed = 0;
    double time = 0.0;
    AgentState ego;
    std::vector<NpcState> npcs;
    std::vector<MapLane> lanes;
    std::vector<TrafficSignal> signals;       // state field updated per step
    std::vector<double> signal_green_from;    // red before, green after
    std::vector<Vec2> route;                  // dense ego route polyline
    double route_length = 0.0;
    double time_limit = 40.0;
    double progress = 0.0;      // monotone arc-length progress (m)
    LeadBrakeScript lead_script;
    SimParams params;

    double completion() const {
        return route_length > 0.0 ? std::min(1.0, progress / route_length) : 0.0;
    }
};

// Deterministic world construction from the spec seed.
WorldState spawn_scenario(const ScenarioSpec& spec, const SimParams& params = SimParams{});

// Advances one fixed tick: ego under a kinematic bicycle model, NPCs under
// lane-following + IDM, signal phase clocks. dt must be params.dt.
void step_world(WorldState& state, const EgoControl& control, double dt);

struct ExpertOutput {
    std::vector<Vec2> future_world;  // T intended waypoints, world frame
    EgoControl control;
};

// Privileged rule-based driver: pure-pursuit on the route + IDM against
// leads and red signals. Emits its intended T-waypoint future for labels.
ExpertOutput expert_policy(const WorldState& state, int waypoints = 8, double dt_plan = 0.5);

// Pure-pursuit (lateral) + PI speed control (longitudinal) toward a planned
// trajectory in the current ego frame. A degenerate all-origin trajectory
// commands a full brake.
EgoControl track_trajectory(const WorldState& state, const Trajectory& traj);

struct InfractionEvent {
    InfractionKind kind;
    double time;
};

struct EpisodeStep {
    double time = 0.0;
    AgentState ego;
    EgoControl control;
    double completion = 0.0;
    std::vector<InfractionKind> events;
};

struct EpisodeLog {
    ScenarioKind kind = ScenarioKind::kLaneFollow;
    uint64_t seed = 0;
    std::vector<EpisodeStep> steps;
    std::vector<InfractionEvent> events;
    TerminalStatus status = TerminalStatus::kRunning;
    double completion = 0.0;
    double duration = 0.0;

    // Line-delimited structured text (one step per line).
    std::string to_text() const;
};

// Infraction predicates over a state sequence; the episode runner applies
// the same checks incrementally.
std::vector<InfractionEvent> detect_infractions(const std::vector<WorldState>& history);

// Single-step checks used by both detect_infractions and the runner.
bool ego_collides(const WorldState& state);
bool ego_off_road(const WorldState& state);
bool ego_crossed_red(const WorldState& prev, const WorldState& cur);

// PERCEPTION-style rasterization of the true current scene, futures empty.
Tensor render_observation(const WorldState& state, const Palette& palette,
                          const RasterGeometry& geometry);

// SceneSnapshot of the current state without futures (render_observation's
// input); futures are attached by the dataset builder.
SceneSnapshot snapshot_now(const WorldState& state);

// Driving command from route geometry ahead of the ego (heading change over
// the next 20 m).
Command derive_command(const WorldState& state);

// Rolls an episode to termination under the given policy. `policy` sees the
// world and returns a control; it runs every tick.
using PolicyFn = std::function<EgoControl(const WorldState&)>;
EpisodeLog run_episode(WorldState state, const PolicyFn& policy,
                       const std::function<void(const WorldState&, int)>& on_step = {});

// Oriented-rectangle overlap (separating axis test); exposed for tests.
bool boxes_overlap(const AgentState& a, const AgentState& b);

// Arc-length of the closest point on a polyline. `lateral` is the signed
// offset from the best segment's direction; `dist` is the euclidean distance
// to the clamped projection point (equal to |lateral| for interior hits,
// larger when the query lies beyond an endpoint).
struct PolylineProjection {
    double s = 0.0;
    double lateral = 0.0;
    double dist = 0.0;
};
PolylineProjection project_to_polyline(const std::vector<Vec2>& poly, const Vec2& p);
double polyline_length(const std::vector<Vec2>& poly);
Vec2 polyline_point(const std::vector<Vec2>& poly, double s);
double polyline_heading(const std::vector<Vec2>& poly, double s);

}  // namespace bevdiff
