#include "bevdiff/world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace bevdiff {

const char* scenario_kind_name(ScenarioKind k) {
    switch (k) {
        case ScenarioKind::kLaneFollow: return "LANE_FOLLOW";
        case ScenarioKind::kLeadBrake: return "LEAD_BRAKE";
        case ScenarioKind::kMerge: return "MERGE";
        case ScenarioKind::kSignalizedStop: return "SIGNALIZED_STOP";
    }
    return "UNKNOWN";
}

std::optional<ScenarioKind> scenario_kind_from_name(const std::string& name) {
    for (ScenarioKind k : {ScenarioKind::kLaneFollow, ScenarioKind::kLeadBrake,
                           ScenarioKind::kMerge, ScenarioKind::kSignalizedStop})
        if (name == scenario_kind_name(k)) return k;
    return std::nullopt;
}

const char* terminal_status_name(TerminalStatus s) {
    switch (s) {
        case TerminalStatus::kRunning: return "RUNNING";
        case TerminalStatus::kSuccess: return "SUCCESS";
        case TerminalStatus::kCollision: return "COLLISION";
        case TerminalStatus::kRedLight: return "RED_LIGHT";
        case TerminalStatus::kTimeout: return "TIMEOUT";
        case TerminalStatus::kOffRoad: return "OFF_ROAD";
    }
    return "UNKNOWN";
}

const char* infraction_kind_name(InfractionKind k) {
    switch (k) {
        case InfractionKind::kCollision: return "COLLISION";
        case InfractionKind::kRedLight: return "RED_LIGHT";
        case InfractionKind::kOffRoad: return "OFF_ROAD";
        case InfractionKind::kTimeout: return "TIMEOUT";
    }
    return "UNKNOWN";
}

// ---- polyline helpers ----

double polyline_length(const std::vector<Vec2>& poly) {
    double len = 0.0;
    for (size_t i = 0; i + 1 < poly.size(); ++i)
        len += std::hypot(poly[i + 1][0] - poly[i][0], poly[i + 1][1] - poly[i][1]);
    return len;
}

PolylineProjection project_to_polyline(const std::vector<Vec2>& poly, const Vec2& p) {
    if (poly.size() < 2) throw DomainError("project_to_polyline: degenerate polyline");
    double best_d2 = 1e300, best_s = 0.0, best_lat = 0.0;
    double s_acc = 0.0;
    for (size_t i = 0; i + 1 < poly.size(); ++i) {
        const double ax = poly[i][0], ay = poly[i][1];
        const double bx = poly[i + 1][0], by = poly[i + 1][1];
        const double vx = bx - ax, vy = by - ay;
        const double seg_len2 = vx * vx + vy * vy;
        if (seg_len2 < 1e-12) continue;
        double t = ((p[0] - ax) * vx + (p[1] - ay) * vy) / seg_len2;
        t = std::clamp(t, 0.0, 1.0);
        const double qx = ax + t * vx, qy = ay + t * vy;
        const double d2 = (p[0] - qx) * (p[0] - qx) + (p[1] - qy) * (p[1] - qy);
        if (d2 < best_d2) {
            best_d2 = d2;
            const double seg_len = std::sqrt(seg_len2);
            best_s = s_acc + t * seg_len;
            // signed lateral: positive to the left of travel direction
            const double cross = vx * (p[1] - ay) - vy * (p[0] - ax);
            best_lat = cross / seg_len;
        }
        s_acc += std::sqrt(seg_len2);
    }
    return {best_s, best_lat, std::sqrt(best_d2)};
}

Vec2 polyline_point(const std::vector<Vec2>& poly, double s) {
    if (poly.size() < 2) throw DomainError("polyline_point: degenerate polyline");
    if (s <= 0.0) return poly.front();
    double s_acc = 0.0;
    for (size_t i = 0; i + 1 < poly.size(); ++i) {
        const double seg =
            std::hypot(poly[i + 1][0] - poly[i][0], poly[i + 1][1] - poly[i][1]);
        if (s_acc + seg >= s && seg > 1e-12) {
            const double t = (s - s_acc) / seg;
            return {poly[i][0] + t * (poly[i + 1][0] - poly[i][0]),
                    poly[i][1] + t * (poly[i + 1][1] - poly[i][1])};
        }
        s_acc += seg;
    }
    return poly.back();
}

double polyline_heading(const std::vector<Vec2>& poly, double s) {
    if (poly.size() < 2) throw DomainError("polyline_heading: degenerate polyline");
    double s_acc = 0.0;
    for (size_t i = 0; i + 1 < poly.size(); ++i) {
        const double seg =
            std::hypot(poly[i + 1][0] - poly[i][0], poly[i + 1][1] - poly[i][1]);
        if ((s_acc + seg >= s && seg > 1e-12) || i + 2 == poly.size())
            return std::atan2(poly[i + 1][1] - poly[i][1], poly[i + 1][0] - poly[i][0]);
        s_acc += seg;
    }
    return 0.0;
}

// ---- scenario construction ----

namespace {

struct FramePose {
    double ox, oy, rot;

    Vec2 map(const Vec2& p) const {
        const double c = std::cos(rot), s = std::sin(rot);
        return {ox + c * p[0] - s * p[1], oy + s * p[0] + c * p[1]};
    }
    double map_heading(double h) const { return wrap_angle(h + rot); }
};

std::vector<Vec2> straight_points(double x0, double x1, double y, double step = 2.0) {
    std::vector<Vec2> pts;
    for (double x = x0; x < x1; x += step) pts.push_back({x, y});
    pts.push_back({x1, y});
    return pts;
}

// cubic smoothstep blend from (x0,y0) to (x1,y1)
std::vector<Vec2> blend_points(double x0, double y0, double x1, double y1, double step = 1.0) {
    std::vector<Vec2> pts;
    for (double x = x0; x < x1; x += step) {
        const double u = (x - x0) / (x1 - x0);
        pts.push_back({x, y0 + (y1 - y0) * (3 * u * u - 2 * u * u * u)});
    }
    return pts;
}

void transform_world(WorldState& w, const FramePose& f) {
    auto map_agent = [&](AgentState& a) {
        const Vec2 p = f.map({a.x, a.y});
        a.x = p[0];
        a.y = p[1];
        a.heading = f.map_heading(a.heading);
    };
    map_agent(w.ego);
    for (auto& n : w.npcs) map_agent(n.agent);
    for (auto& lane : w.lanes)
        for (auto& p : lane.centerline) p = f.map(p);
    for (auto& sig : w.signals) {
        sig.position = f.map(sig.position);
        sig.heading = f.map_heading(sig.heading);
    }
    for (auto& p : w.route) p = f.map(p);
}

void place_agent_on_lane(AgentState& a, const MapLane& lane, double s) {
    const Vec2 p = polyline_point(lane.centerline, s);
    a.x = p[0];
    a.y = p[1];
    a.heading = wrap_angle(polyline_heading(lane.centerline, s));
}

NpcState make_npc(const MapLane& lane, int lane_id, double s, double cruise) {
    NpcState n;
    n.lane = lane_id;
    n.s = s;
    n.cruise = cruise;
    n.agent.speed = cruise;
    place_agent_on_lane(n.agent, lane, s);
    return n;
}

}  // namespace

WorldState spawn_scenario(const ScenarioSpec& spec, const SimParams& params) {
    if (spec.time_limit <= 0.0) throw ConfigError("scenario: time_limit must be positive");
    WorldState w;
    w.kind = spec.kind;
    w.seed = spec.seed;
    w.params = params;
    w.time_limit = spec.time_limit;
    Rng rng(spec.seed * 0x9E3779B97F4A7C15ull + static_cast<uint64_t>(spec.kind) + 1);

    const double cruise = params.cruise_speed;
    const double ego_start = 10.0;
    switch (spec.kind) {
        case ScenarioKind::kLaneFollow: {
            MapLane lane;
            lane.centerline = straight_points(0.0, 200.0, 0.0);
            w.lanes.push_back(lane);
            w.route = straight_points(ego_start, ego_start + 70.0, 0.0);
            place_agent_on_lane(w.ego, lane, ego_start);
            const int n = spec.npc_count >= 0 ? spec.npc_count : 2;
            double next_s = ego_start + 22.0;
            for (int i = 0; i < n; ++i) {
                const double gap = 22.0 + rng.uniform(0.0f, 18.0f);
                next_s += i == 0 ? rng.uniform(0.0f, 12.0f) : gap;
                if (next_s > 180.0) break;
                w.npcs.push_back(make_npc(lane, 0, next_s,
                                          cruise * (0.8 + rng.uniform(0.0f, 0.3f))));
                next_s += 22.0;
            }
            break;
        }
        case ScenarioKind::kLeadBrake: {
            MapLane lane;
            lane.centerline = straight_points(0.0, 200.0, 0.0);
            w.lanes.push_back(lane);
            w.route = straight_points(ego_start, ego_start + 80.0, 0.0);
            place_agent_on_lane(w.ego, lane, ego_start);
            const double gap = 18.0 + rng.uniform(0.0f, 10.0f);
            NpcState lead = make_npc(lane, 0, ego_start + gap, cruise);
            lead.scripted_lead = true;
            w.npcs.push_back(lead);
            w.lead_script.brake_at = 3.0 + rng.uniform(0.0f, 3.0f);
            w.lead_script.hold_for = 2.0 + rng.uniform(0.0f, 2.0f);
            const int extra = spec.npc_count > 1 ? spec.npc_count - 1 : 0;
            for (int i = 0; i < extra; ++i)
                w.npcs.push_back(make_npc(lane, 0, ego_start + gap + 35.0 * (i + 1),
                                          cruise * 0.9));
            break;
        }
        case ScenarioKind::kMerge: {
            MapLane main_lane;
            main_lane.centerline = straight_points(-40.0, 200.0, 3.5);
            MapLane ramp;
            ramp.centerline = straight_points(-10.0, 25.0, 0.0);
            for (const auto& p : blend_points(25.0, 0.0, 50.0, 3.5)) ramp.centerline.push_back(p);
            ramp.centerline.push_back({50.0, 3.5});
            ramp.successors.push_back(0);
            w.lanes.push_back(main_lane);
            w.lanes.push_back(ramp);
            // ego route: along the ramp then down the main lane
            w.route = ramp.centerline;
            for (const auto& p : straight_points(52.0, 95.0, 3.5)) w.route.push_back(p);
            place_agent_on_lane(w.ego, ramp, project_to_polyline(ramp.centerline, {0.0, 0.0}).s);
            const int n = spec.npc_count >= 0 ? spec.npc_count : 2;
            if (n >= 1) {
                // ahead of the merge point, slightly slow; ego merges behind it
                const double s_ahead =
                    project_to_polyline(main_lane.centerline, {30.0 + rng.uniform(0.0f, 25.0f), 3.5})
                        .s;
                w.npcs.push_back(make_npc(main_lane, 0, s_ahead, cruise * 0.8));
            }
            if (n >= 2) {
                const double s_behind =
                    project_to_polyline(main_lane.centerline,
                                        {-38.0 + rng.uniform(0.0f, 14.0f), 3.5})
                        .s;
                w.npcs.push_back(make_npc(main_lane, 0, s_behind, cruise * 0.9));
            }
            break;
        }
        case ScenarioKind::kSignalizedStop: {
            MapLane lane;
            lane.centerline = straight_points(0.0, 200.0, 0.0);
            w.lanes.push_back(lane);
            w.route = straight_points(ego_start, ego_start + 80.0, 0.0);
            place_agent_on_lane(w.ego, lane, ego_start);
            TrafficSignal sig;
            sig.position = {45.0, 0.0};
            sig.heading = 0.0;
            sig.state = SignalState::kRed;
            w.signals.push_back(sig);
            w.signal_green_from.push_back(4.0 + rng.uniform(0.0f, 5.0f));
            const int n = spec.npc_count >= 0 ? spec.npc_count : 0;
            for (int i = 0; i < n; ++i)
                w.npcs.push_back(make_npc(lane, 0, 60.0 + 30.0 * i, cruise * 0.9));
            break;
        }
    }
    w.ego.speed = cruise * 0.5;
    w.route_length = polyline_length(w.route);

    // feasibility: no initial overlaps (bounded retries happen upstream in
    // the per-kind sampling; a residual overlap here is a generation bug)
    for (const auto& n : w.npcs)
        if (boxes_overlap(w.ego, n.agent))
            throw GenerationError("scenario spawn produced overlapping boxes");

    // seeded rigid placement of the whole scene in world coordinates
    FramePose pose{static_cast<double>(rng.uniform(-150.0f, 150.0f)),
                   static_cast<double>(rng.uniform(-150.0f, 150.0f)),
                   static_cast<double>(rng.uniform(-3.14f, 3.14f))};
    transform_world(w, pose);
    w.progress = project_to_polyline(w.route, {w.ego.x, w.ego.y}).s;

    // initialize signal visual state
    for (size_t i = 0; i < w.signals.size(); ++i)
        w.signals[i].state =
            w.time < w.signal_green_from[i] ? SignalState::kRed : SignalState::kGreen;
    return w;
}

// ---- dynamics ----

namespace {

// IDM acceleration toward a leader at distance `gap` closing at `dv`.
double idm_accel(const SimParams& p, double v, double v0, double gap, double dv) {
    const double free_term = 1.0 - std::pow(v / std::max(v0, 0.1), 4.0);
    if (gap <= 0.3) return p.accel_min;
    const double s_star =
        p.idm_gap0 + std::max(0.0, v * p.idm_headway +
                                        v * dv / (2.0 * std::sqrt(p.idm_accel * p.idm_brake)));
    return p.idm_accel * (free_term - (s_star / gap) * (s_star / gap));
}

// nearest leader for an NPC: other NPCs and the ego projected on its lane
struct Leader {
    bool found = false;
    double gap = 1e9;
    double speed = 0.0;
};

Leader npc_leader(const WorldState& w, size_t idx) {
    const NpcState& me = w.npcs[idx];
    const MapLane& lane = w.lanes[static_cast<size_t>(me.lane)];
    Leader best;
    for (size_t j = 0; j < w.npcs.size(); ++j) {
        if (j == idx || w.npcs[j].lane != me.lane) continue;
        const double ds = w.npcs[j].s - me.s;
        if (ds <= 0.0) continue;
        const double gap = ds - (me.agent.length + w.npcs[j].agent.length) / 2.0;
        if (gap < best.gap) best = {true, gap, w.npcs[j].agent.speed};
    }
    const PolylineProjection ep = project_to_polyline(lane.centerline, {w.ego.x, w.ego.y});
    if (ep.dist < 2.0 && ep.s > me.s) {
        const double gap = ep.s - me.s - (me.agent.length + w.ego.length) / 2.0;
        if (gap < best.gap) best = {true, gap, w.ego.speed};
    }
    // red signal on this lane
    for (size_t si = 0; si < w.signals.size(); ++si) {
        if (w.signals[si].state != SignalState::kRed) continue;
        const PolylineProjection sp =
            project_to_polyline(lane.centerline, w.signals[si].position);
        if (sp.dist > 2.0) continue;
        const double gap = sp.s - me.s - me.agent.length / 2.0 - 0.5;
        if (sp.s > me.s && gap < best.gap) best = {true, gap, 0.0};
    }
    return best;
}

}  // namespace

void step_world(WorldState& state, const EgoControl& control, double dt) {
    if (std::abs(dt - state.params.dt) > 1e-9)
        throw DomainError("step_world: dt is fixed at params.dt");
    const SimParams& p = state.params;

    // ego: kinematic bicycle, saturating controls
    const double accel = std::clamp(control.accel, p.accel_min, p.accel_max);
    const double steer = std::clamp(control.steer, -p.steer_max, p.steer_max);
    state.ego.speed = std::clamp(state.ego.speed + accel * dt, 0.0, p.v_max);
    state.ego.heading =
        wrap_angle(state.ego.heading + state.ego.speed * std::tan(steer) / p.wheelbase * dt);
    state.ego.x += state.ego.speed * std::cos(state.ego.heading) * dt;
    state.ego.y += state.ego.speed * std::sin(state.ego.heading) * dt;

    // NPCs: IDM along their lane, exact lane following
    for (size_t i = 0; i < state.npcs.size(); ++i) {
        NpcState& n = state.npcs[i];
        const Leader lead = npc_leader(state, i);
        double a = lead.found
                       ? idm_accel(p, n.agent.speed, n.cruise, lead.gap,
                                   n.agent.speed - lead.speed)
                       : idm_accel(p, n.agent.speed, n.cruise, 1e9, 0.0);
        if (n.scripted_lead && state.time >= state.lead_script.brake_at &&
            state.time < state.lead_script.resume_at()) {
            a = std::min(a, -4.0);
        }
        a = std::clamp(a, p.accel_min, p.accel_max);
        n.agent.speed = std::clamp(n.agent.speed + a * dt, 0.0, p.v_max);
        n.s += n.agent.speed * dt;
        place_agent_on_lane(n.agent, state.lanes[static_cast<size_t>(n.lane)], n.s);
    }

    state.time += dt;
    for (size_t i = 0; i < state.signals.size(); ++i)
        state.signals[i].state =
            state.time < state.signal_green_from[i] ? SignalState::kRed : SignalState::kGreen;

    const PolylineProjection proj = project_to_polyline(state.route, {state.ego.x, state.ego.y});
    state.progress = std::max(state.progress, proj.s);
}

// ---- expert ----

namespace {

EgoControl expert_control(const WorldState& w, int recursion_guard = 0) {
    (void)recursion_guard;
    const SimParams& p = w.params;
    const PolylineProjection me = project_to_polyline(w.route, {w.ego.x, w.ego.y});

    // lateral: pure pursuit on the route
    const double lookahead = std::clamp(2.0 + 0.7 * w.ego.speed, 3.0, 9.0);
    const Vec2 target = polyline_point(w.route, me.s + lookahead);
    const Vec2 t_ego = world_to_ego(w.ego, target);
    const double alpha = std::atan2(t_ego[1], t_ego[0]);
    double steer = std::atan2(2.0 * p.wheelbase * std::sin(alpha), lookahead);
    steer = std::clamp(steer, -p.steer_max, p.steer_max);

    // longitudinal: IDM against leaders in the route corridor and red lights
    double accel = idm_accel(p, w.ego.speed, p.cruise_speed, 1e9, 0.0);
    for (const auto& n : w.npcs) {
        const PolylineProjection np = project_to_polyline(w.route, {n.agent.x, n.agent.y});
        if (np.dist > 2.2 || np.s <= me.s) continue;
        const double gap = np.s - me.s - (w.ego.length + n.agent.length) / 2.0;
        accel = std::min(accel, idm_accel(p, w.ego.speed, p.cruise_speed, gap,
                                          w.ego.speed - n.agent.speed));
    }
    for (size_t si = 0; si < w.signals.size(); ++si) {
        if (w.signals[si].state != SignalState::kRed) continue;
        const PolylineProjection sp = project_to_polyline(w.route, w.signals[si].position);
        if (sp.dist > 2.2 || sp.s <= me.s) continue;
        const double gap = sp.s - me.s - w.ego.length / 2.0 - 0.5;
        accel = std::min(accel, idm_accel(p, w.ego.speed, p.cruise_speed, gap, w.ego.speed));
    }
    return {std::clamp(accel, p.accel_min, p.accel_max), steer};
}

}  // namespace

ExpertOutput expert_policy(const WorldState& state, int waypoints, double dt_plan) {
    ExpertOutput out;
    out.control = expert_control(state);

    // intended future: roll a private copy under the same control law
    WorldState sim = state;
    const int per_wp = std::max(1, static_cast<int>(std::lround(dt_plan / state.params.dt)));
    out.future_world.reserve(static_cast<size_t>(waypoints));
    for (int k = 0; k < waypoints; ++k) {
        for (int i = 0; i < per_wp; ++i) step_world(sim, expert_control(sim), sim.params.dt);
        out.future_world.push_back({sim.ego.x, sim.ego.y});
    }
    return out;
}

EgoControl track_trajectory(const WorldState& state, const Trajectory& traj) {
    const SimParams& p = state.params;
    if (traj.waypoints.empty()) return {p.accel_min, 0.0};
    // degenerate plan: everything at the origin means stop
    double max_r = 0.0;
    for (const auto& wpt : traj.waypoints) max_r = std::max(max_r, std::hypot(wpt[0], wpt[1]));
    if (max_r < 0.3) return {p.accel_min, 0.0};

    // target speed from waypoint spacing over the front of the plan
    double dist = 0.0;
    std::array<double, 2> prev{0.0, 0.0};
    const size_t k_speed = std::min<size_t>(3, traj.waypoints.size());
    for (size_t i = 0; i < k_speed; ++i) {
        dist += std::hypot(traj.waypoints[i][0] - prev[0], traj.waypoints[i][1] - prev[1]);
        prev = traj.waypoints[i];
    }
    const double v_target =
        std::clamp(dist / (static_cast<double>(k_speed) * traj.dt_plan), 0.0, p.v_max);
    const double accel = std::clamp(1.5 * (v_target - state.ego.speed), p.accel_min, p.accel_max);

    // lateral: pure pursuit on the ego-frame polyline
    const double lookahead = std::clamp(1.0 + 0.6 * state.ego.speed, 2.5, 8.0);
    std::array<double, 2> target = traj.waypoints.back();
    prev = {0.0, 0.0};
    for (const auto& wpt : traj.waypoints) {
        if (std::hypot(wpt[0], wpt[1]) >= lookahead) {
            target = wpt;
            break;
        }
        prev = wpt;
    }
    const double range = std::max(std::hypot(target[0], target[1]), 1e-6);
    const double alpha = std::atan2(target[1], target[0]);
    double steer = std::atan2(2.0 * p.wheelbase * std::sin(alpha), std::max(lookahead, range));
    steer = std::clamp(steer, -p.steer_max, p.steer_max);
    return {accel, steer};
}

// ---- infractions ----

bool boxes_overlap(const AgentState& a, const AgentState& b) {
    auto corners = [](const AgentState& s) {
        const double c = std::cos(s.heading), sn = std::sin(s.heading);
        const double hl = s.length / 2.0, hw = s.width / 2.0;
        std::array<Vec2, 4> out;
        const std::array<std::array<double, 2>, 4> local{
            {{hl, hw}, {hl, -hw}, {-hl, -hw}, {-hl, hw}}};
        for (int i = 0; i < 4; ++i)
            out[static_cast<size_t>(i)] = {s.x + c * local[static_cast<size_t>(i)][0] -
                                               sn * local[static_cast<size_t>(i)][1],
                                           s.y + sn * local[static_cast<size_t>(i)][0] +
                                               c * local[static_cast<size_t>(i)][1]};
        return out;
    };
    const auto ca = corners(a), cb = corners(b);
    // separating axis: the 2 edge normals of each box
    for (const auto& boxc : {ca, cb}) {
        for (int e = 0; e < 2; ++e) {
            const double ax = boxc[static_cast<size_t>(e + 1)][0] - boxc[static_cast<size_t>(e)][0];
            const double ay = boxc[static_cast<size_t>(e + 1)][1] - boxc[static_cast<size_t>(e)][1];
            const double nx = -ay, ny = ax;
            double amin = 1e300, amax = -1e300, bmin = 1e300, bmax = -1e300;
            for (int i = 0; i < 4; ++i) {
                const double pa = ca[static_cast<size_t>(i)][0] * nx + ca[static_cast<size_t>(i)][1] * ny;
                const double pb = cb[static_cast<size_t>(i)][0] * nx + cb[static_cast<size_t>(i)][1] * ny;
                amin = std::min(amin, pa);
                amax = std::max(amax, pa);
                bmin = std::min(bmin, pb);
                bmax = std::max(bmax, pb);
            }
            if (amax < bmin || bmax < amin) return false;
        }
    }
    return true;
}

bool ego_collides(const WorldState& state) {
    for (const auto& n : state.npcs)
        if (boxes_overlap(state.ego, n.agent)) return true;
    return false;
}

bool ego_off_road(const WorldState& state) {
    double best = 1e300;
    for (const auto& lane : state.lanes) {
        const PolylineProjection proj =
            project_to_polyline(lane.centerline, {state.ego.x, state.ego.y});
        best = std::min(best, proj.dist - lane.width / 2.0);
    }
    return best > 0.0;
}

bool ego_crossed_red(const WorldState& prev, const WorldState& cur) {
    for (size_t i = 0; i < cur.signals.size(); ++i) {
        if (cur.signals[i].state != SignalState::kRed) continue;
        const auto& sig = cur.signals[i];
        const double dirx = std::cos(sig.heading), diry = std::sin(sig.heading);
        auto front_along = [&](const WorldState& w) {
            const double fx = w.ego.x + std::cos(w.ego.heading) * w.ego.length / 2.0;
            const double fy = w.ego.y + std::sin(w.ego.heading) * w.ego.length / 2.0;
            return (fx - sig.position[0]) * dirx + (fy - sig.position[1]) * diry;
        };
        auto lateral = [&](const WorldState& w) {
            const double fx = w.ego.x - sig.position[0], fy = w.ego.y - sig.position[1];
            return std::abs(-diry * fx + dirx * fy);
        };
        if (front_along(prev) < 0.0 && front_along(cur) >= 0.0 && lateral(cur) < 2.5) return true;
    }
    return false;
}

std::vector<InfractionEvent> detect_infractions(const std::vector<WorldState>& history) {
    std::vector<InfractionEvent> events;
    bool saw_collision = false, saw_red = false, saw_off = false;
    for (size_t i = 0; i < history.size(); ++i) {
        const WorldState& w = history[i];
        if (!saw_collision && ego_collides(w)) {
            events.push_back({InfractionKind::kCollision, w.time});
            saw_collision = true;
        }
        if (!saw_off && ego_off_road(w)) {
            events.push_back({InfractionKind::kOffRoad, w.time});
            saw_off = true;
        }
        if (!saw_red && i > 0 && ego_crossed_red(history[i - 1], w)) {
            events.push_back({InfractionKind::kRedLight, w.time});
            saw_red = true;
        }
    }
    if (!history.empty()) {
        const WorldState& last = history.back();
        if (last.time >= last.time_limit && last.completion() < 1.0)
            events.push_back({InfractionKind::kTimeout, last.time});
    }
    return events;
}

// ---- observation / snapshots ----

SceneSnapshot snapshot_now(const WorldState& state) {
    SceneSnapshot s;
    s.ego = state.ego;
    s.lanes = state.lanes;
    s.signals = state.signals;
    for (const auto& n : state.npcs) s.agents.push_back(n.agent);
    s.command = derive_command(state);
    s.timestamp = state.time;
    return s;
}

Tensor render_observation(const WorldState& state, const Palette& palette,
                          const RasterGeometry& geometry) {
    return rasterize(snapshot_now(state), CanvasKind::kPerception, palette, geometry);
}

Command derive_command(const WorldState& state) {
    const PolylineProjection me = project_to_polyline(state.route, {state.ego.x, state.ego.y});
    const double h0 = polyline_heading(state.route, me.s + 2.0);
    const double h1 = polyline_heading(state.route, me.s + 20.0);
    const double dpsi = wrap_angle(h1 - h0);
    if (dpsi > 0.12) return Command::kLeft;
    if (dpsi < -0.12) return Command::kRight;
    return Command::kStraight;
}

// ---- episode runner ----

EpisodeLog run_episode(WorldState state, const PolicyFn& policy,
                       const std::function<void(const WorldState&, int)>& on_step) {
    EpisodeLog log;
    log.kind = state.kind;
    log.seed = state.seed;
    if (on_step) on_step(state, 0);
    int step = 0;
    while (true) {
        const EgoControl control = policy(state);
        const WorldState prev = state;
        step_world(state, control, state.params.dt);
        ++step;

        EpisodeStep row;
        row.time = state.time;
        row.ego = state.ego;
        row.control = control;
        row.completion = state.completion();

        TerminalStatus status = TerminalStatus::kRunning;
        if (ego_collides(state)) {
            row.events.push_back(InfractionKind::kCollision);
            log.events.push_back({InfractionKind::kCollision, state.time});
            status = TerminalStatus::kCollision;
        } else if (ego_crossed_red(prev, state)) {
            row.events.push_back(InfractionKind::kRedLight);
            log.events.push_back({InfractionKind::kRedLight, state.time});
            status = TerminalStatus::kRedLight;
        } else if (ego_off_road(state)) {
            row.events.push_back(InfractionKind::kOffRoad);
            log.events.push_back({InfractionKind::kOffRoad, state.time});
            status = TerminalStatus::kOffRoad;
        } else if (state.progress >= state.route_length - 0.3) {
            status = TerminalStatus::kSuccess;
        } else if (state.time >= state.time_limit) {
            row.events.push_back(InfractionKind::kTimeout);
            log.events.push_back({InfractionKind::kTimeout, state.time});
            status = TerminalStatus::kTimeout;
        }
        log.steps.push_back(std::move(row));
        if (on_step && status == TerminalStatus::kRunning) on_step(state, step);
        if (status != TerminalStatus::kRunning) {
            log.status = status;
            log.completion = status == TerminalStatus::kSuccess ? 1.0 : state.completion();
            log.duration = state.time;
            return log;
        }
    }
}

std::string EpisodeLog::to_text() const {
    std::ostringstream os;
    char buf[320];
    os << "# bevdiff episode log v1\n";
    std::snprintf(buf, sizeof(buf), "kind=%s seed=%llu steps=%zu\n", scenario_kind_name(kind),
                  static_cast<unsigned long long>(seed), steps.size());
    os << buf;
    for (size_t i = 0; i < steps.size(); ++i) {
        const EpisodeStep& s = steps[i];
        std::string ev;
        for (size_t j = 0; j < s.events.size(); ++j) {
            if (j) ev += "|";
            ev += infraction_kind_name(s.events[j]);
        }
        std::snprintf(buf, sizeof(buf),
                      "step=%zu t=%.6f x=%.6f y=%.6f heading=%.6f speed=%.6f accel=%.6f "
                      "steer=%.6f completion=%.6f events=%s\n",
                      i, s.time, s.ego.x, s.ego.y, s.ego.heading, s.ego.speed, s.control.accel,
                      s.control.steer, s.completion, ev.c_str());
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "terminal=%s completion=%.6f duration=%.6f\n",
                  terminal_status_name(status), completion, duration);
    os << buf;
    return os.str();
}

}  // namespace bevdiff
