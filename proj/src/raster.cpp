#include "bevdiff/raster.hpp"

#include <algorithm>
#include <cmath>

namespace bevdiff {

void RasterGeometry::validate() const {
    if (height < 16 || width < 16) throw ConfigError("raster geometry: H and W must be >= 16");
    if (!(resolution > 0.0)) throw ConfigError("raster geometry: resolution must be positive");
}

void validate_scene(const SceneSnapshot& scene, int expect_t, int expect_t_pred) {
    auto check_finite_pt = [](const Vec2& p) {
        if (!std::isfinite(p[0]) || !std::isfinite(p[1]))
            throw DomainError("scene: non-finite position");
    };
    auto check_agent = [&](const AgentState& a) {
        if (!std::isfinite(a.x) || !std::isfinite(a.y) || !std::isfinite(a.heading))
            throw DomainError("scene: non-finite agent state");
        if (a.heading < -M_PI || a.heading >= M_PI)
            throw DomainError("scene: heading out of [-pi, pi)");
        if (a.length <= 0.0 || a.width <= 0.0) throw DomainError("scene: non-positive agent size");
    };
    check_agent(scene.ego);
    for (const auto& a : scene.agents) check_agent(a);
    if (expect_t >= 0 && static_cast<int>(scene.ego_future.size()) != expect_t)
        throw DimensionError("scene: ego_future must have exactly " + std::to_string(expect_t) +
                             " waypoints");
    for (const auto& p : scene.ego_future) check_finite_pt(p);
    if (scene.agent_futures.size() != scene.agents.size() && !scene.agent_futures.empty())
        throw DimensionError("scene: agent_futures count mismatch");
    for (const auto& fut : scene.agent_futures) {
        if (expect_t_pred >= 0 && static_cast<int>(fut.size()) != expect_t_pred)
            throw DimensionError("scene: agent future length mismatch");
        for (const auto& p : fut) check_finite_pt(p);
    }
}

namespace {

double color_dist(const Rgb& a, const Rgb& b) {
    const double dr = a.r - b.r, dg = a.g - b.g, db = a.b - b.b;
    return std::sqrt(dr * dr + dg * dg + db * db);
}

Rgb lerp(const Rgb& a, const Rgb& b, float t) {
    return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

// Mutable view over one [3,H,W] canvas buffer.
struct Canvas {
    std::vector<float>& data;
    int h, w;

    void set(int row, int col, const Rgb& c) {
        if (row < 0 || row >= h || col < 0 || col >= w) return;
        const size_t plane = static_cast<size_t>(h) * w;
        const size_t at = static_cast<size_t>(row) * w + col;
        data[at] = c.r;
        data[plane + at] = c.g;
        data[2 * plane + at] = c.b;
    }
};

void draw_line(Canvas& cv, double r0, double c0, double r1, double c1, const Rgb& color) {
    int x0 = static_cast<int>(std::lround(c0)), y0 = static_cast<int>(std::lround(r0));
    int x1 = static_cast<int>(std::lround(c1)), y1 = static_cast<int>(std::lround(r1));
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        cv.set(y0, x0, color);
        if (x0 == x1 && y0 == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

struct PixelMapper {
    const AgentState& ego;
    const RasterGeometry& geo;

    std::array<double, 2> operator()(const Vec2& world) const {
        const Vec2 e = world_to_ego(ego, world);
        return {geo.height / 2.0 - e[0] / geo.resolution,
                geo.width / 2.0 - e[1] / geo.resolution};
    }
};

void draw_polyline(Canvas& cv, const PixelMapper& map, const std::vector<Vec2>& pts,
                   const Rgb& color) {
    if (pts.size() == 1) {
        auto p = map(pts[0]);
        cv.set(static_cast<int>(std::lround(p[0])), static_cast<int>(std::lround(p[1])), color);
        return;
    }
    for (size_t i = 0; i + 1 < pts.size(); ++i) {
        auto a = map(pts[i]), b = map(pts[i + 1]);
        draw_line(cv, a[0], a[1], b[0], b[1], color);
    }
}

// Stroke color walks from c0 to c1 with the waypoint index.
void draw_gradient_polyline(Canvas& cv, const PixelMapper& map, const std::vector<Vec2>& pts,
                            const Rgb& c0, const Rgb& c1) {
    if (pts.empty()) return;
    if (pts.size() == 1) {
        auto p = map(pts[0]);
        cv.set(static_cast<int>(std::lround(p[0])), static_cast<int>(std::lround(p[1])), c0);
        return;
    }
    const int nseg = static_cast<int>(pts.size()) - 1;
    for (int i = 0; i < nseg; ++i) {
        const float t = nseg > 1 ? static_cast<float>(i) / static_cast<float>(nseg - 1) : 1.0f;
        auto a = map(pts[static_cast<size_t>(i)]), b = map(pts[static_cast<size_t>(i) + 1]);
        draw_line(cv, a[0], a[1], b[0], b[1], lerp(c0, c1, t));
    }
}

void fill_box(Canvas& cv, const PixelMapper& map, const AgentState& box, const Rgb& color) {
    // corners in world frame
    const double c = std::cos(box.heading), s = std::sin(box.heading);
    const double hl = box.length / 2.0, hw = box.width / 2.0;
    std::array<Vec2, 4> corners;
    const std::array<std::array<double, 2>, 4> local{{{hl, hw}, {hl, -hw}, {-hl, -hw}, {-hl, hw}}};
    double rmin = 1e18, rmax = -1e18, cmin = 1e18, cmax = -1e18;
    std::array<std::array<double, 2>, 4> px;
    for (int i = 0; i < 4; ++i) {
        corners[static_cast<size_t>(i)] = {box.x + c * local[static_cast<size_t>(i)][0] -
                                               s * local[static_cast<size_t>(i)][1],
                                           box.y + s * local[static_cast<size_t>(i)][0] +
                                               c * local[static_cast<size_t>(i)][1]};
        px[static_cast<size_t>(i)] = map(corners[static_cast<size_t>(i)]);
        rmin = std::min(rmin, px[static_cast<size_t>(i)][0]);
        rmax = std::max(rmax, px[static_cast<size_t>(i)][0]);
        cmin = std::min(cmin, px[static_cast<size_t>(i)][1]);
        cmax = std::max(cmax, px[static_cast<size_t>(i)][1]);
    }
    const int r0 = std::max(0, static_cast<int>(std::floor(rmin)));
    const int r1 = std::min(cv.h - 1, static_cast<int>(std::ceil(rmax)));
    const int c0 = std::max(0, static_cast<int>(std::floor(cmin)));
    const int c1 = std::min(cv.w - 1, static_cast<int>(std::ceil(cmax)));
    // Inside test on the pixel-space quad (convex, consistent winding). Uses
    // signed distances with a small tolerance so pixels exactly on an edge
    // stay inside regardless of last-ulp noise in the corner coordinates.
    auto inside = [&](double r, double ccol) {
        constexpr double tol = 1e-6;  // pixels
        bool has_pos = false, has_neg = false;
        for (int i = 0; i < 4; ++i) {
            const auto& a = px[static_cast<size_t>(i)];
            const auto& b = px[static_cast<size_t>((i + 1) % 4)];
            const double elen = std::hypot(b[0] - a[0], b[1] - a[1]);
            if (elen < 1e-12) continue;
            const double cross =
                ((b[0] - a[0]) * (ccol - a[1]) - (b[1] - a[1]) * (r - a[0])) / elen;
            if (cross > tol) has_pos = true;
            if (cross < -tol) has_neg = true;
        }
        return !(has_pos && has_neg);
    };
    for (int r = r0; r <= r1; ++r)
        for (int col = c0; col <= c1; ++col)
            if (inside(r, col)) cv.set(r, col, color);
}

void draw_stop_bar(Canvas& cv, const PixelMapper& map, const TrafficSignal& sig, double lane_width,
                   const Rgb& color) {
    // bar perpendicular to the lane direction, spanning the lane width
    const double c = std::cos(sig.heading), s = std::sin(sig.heading);
    const double half = lane_width / 2.0;
    const Vec2 a{sig.position[0] - s * half, sig.position[1] + c * half};
    const Vec2 b{sig.position[0] + s * half, sig.position[1] - c * half};
    auto pa = map(a), pb = map(b);
    draw_line(cv, pa[0], pa[1], pb[0], pb[1], color);
}

}  // namespace

void Palette::validate(double min_dist) const {
    const std::array<std::pair<const char*, Rgb>, 6> classes{{{"background", Rgb{0, 0, 0}},
                                                              {"lane", lane},
                                                              {"vehicle", vehicle},
                                                              {"ego", ego},
                                                              {"signal_red", signal_red},
                                                              {"signal_green", signal_green}}};
    for (size_t i = 0; i < classes.size(); ++i)
        for (size_t j = i + 1; j < classes.size(); ++j)
            if (color_dist(classes[i].second, classes[j].second) < min_dist)
                throw ConfigError(std::string("palette: colors for ") + classes[i].first + " and " +
                                  classes[j].first + " are too close");
}

SemanticClass Palette::nearest_class(float r, float g, float b) const {
    const Rgb probe{r, g, b};
    const std::array<std::pair<SemanticClass, Rgb>, 6> classes{
        {{SemanticClass::kBackground, Rgb{0, 0, 0}},
         {SemanticClass::kLane, lane},
         {SemanticClass::kVehicle, vehicle},
         {SemanticClass::kEgo, ego},
         {SemanticClass::kSignalRed, signal_red},
         {SemanticClass::kSignalGreen, signal_green}}};
    SemanticClass best = SemanticClass::kBackground;
    double best_d = 1e18;
    for (const auto& [cls, col] : classes) {
        const double d = color_dist(probe, col);
        if (d < best_d) {
            best_d = d;
            best = cls;
        }
    }
    return best;
}

std::array<double, 2> world_to_pixel(const AgentState& ego, const Vec2& p,
                                     const RasterGeometry& geometry) {
    return PixelMapper{ego, geometry}(p);
}

const char* canvas_kind_name(CanvasKind kind) {
    switch (kind) {
        case CanvasKind::kPerception: return "perception";
        case CanvasKind::kPrediction: return "prediction";
        case CanvasKind::kPlanning: return "planning";
    }
    return "unknown";
}

Tensor rasterize(const SceneSnapshot& scene, CanvasKind kind, const Palette& palette,
                 const RasterGeometry& geometry) {
    geometry.validate();
    validate_scene(scene, -1, -1);
    const int h = geometry.height, w = geometry.width;
    std::vector<float> buf(static_cast<size_t>(3) * h * w, 0.0f);
    Canvas cv{buf, h, w};
    const PixelMapper map{scene.ego, geometry};

    switch (kind) {
        case CanvasKind::kPerception: {
            for (const auto& lane : scene.lanes) {
                // boundaries offset from the centerline
                if (lane.centerline.size() < 2) continue;
                std::vector<Vec2> left, right;
                left.reserve(lane.centerline.size());
                right.reserve(lane.centerline.size());
                for (size_t i = 0; i < lane.centerline.size(); ++i) {
                    const size_t j0 = i == 0 ? 0 : i - 1;
                    const size_t j1 = i + 1 < lane.centerline.size() ? i + 1 : i;
                    const double dx = lane.centerline[j1][0] - lane.centerline[j0][0];
                    const double dy = lane.centerline[j1][1] - lane.centerline[j0][1];
                    const double len = std::hypot(dx, dy);
                    if (len < 1e-9) continue;
                    const double nx = -dy / len, ny = dx / len;
                    const double half = lane.width / 2.0;
                    left.push_back({lane.centerline[i][0] + nx * half,
                                    lane.centerline[i][1] + ny * half});
                    right.push_back({lane.centerline[i][0] - nx * half,
                                     lane.centerline[i][1] - ny * half});
                }
                draw_polyline(cv, map, left, palette.lane);
                draw_polyline(cv, map, right, palette.lane);
            }
            for (const auto& sig : scene.signals) {
                const Rgb col = sig.state == SignalState::kRed ? palette.signal_red
                                                               : palette.signal_green;
                draw_stop_bar(cv, map, sig, scene.lanes.empty() ? 3.5 : scene.lanes[0].width, col);
            }
            for (const auto& agent : scene.agents) fill_box(cv, map, agent, palette.vehicle);
            if (scene.has_ego) fill_box(cv, map, scene.ego, palette.ego);
            break;
        }
        case CanvasKind::kPrediction: {
            for (const auto& fut : scene.agent_futures)
                draw_gradient_polyline(cv, map, fut, palette.prediction_start,
                                       palette.prediction_end);
            break;
        }
        case CanvasKind::kPlanning: {
            draw_gradient_polyline(cv, map, scene.ego_future, palette.planning_start,
                                   palette.planning_end);
            break;
        }
    }
    return Tensor::from_data({3, h, w}, std::move(buf));
}

CanvasTriplet rasterize_triplet(const SceneSnapshot& scene, const Palette& palette,
                                const RasterGeometry& geometry) {
    return {rasterize(scene, CanvasKind::kPerception, palette, geometry),
            rasterize(scene, CanvasKind::kPrediction, palette, geometry),
            rasterize(scene, CanvasKind::kPlanning, palette, geometry)};
}

}  // namespace bevdiff
