#include "doctest.h"

#include <cmath>

#include "bevdiff/raster.hpp"

using namespace bevdiff;

namespace {

// Straight lane along +x through the origin.
MapLane straight_lane(double length = 200.0, double width = 3.5) {
    MapLane lane;
    lane.width = width;
    for (double x = -20.0; x <= length; x += 5.0) lane.centerline.push_back({x, 0.0});
    return lane;
}

SceneSnapshot basic_scene() {
    SceneSnapshot s;
    s.ego = AgentState{0.0, 0.0, 0.0, 5.0, 4.5, 2.0};
    s.lanes.push_back(straight_lane());
    return s;
}

// Random scene generator for the decodability oracle: agents scattered in
// the ego frame, well separated.
SceneSnapshot random_scene(Rng& rng, std::vector<AgentState>* inside_boxes) {
    SceneSnapshot s;
    s.ego = AgentState{rng.uniform(-50, 50), rng.uniform(-50, 50),
                       static_cast<double>(rng.uniform(-3.1f, 3.1f)), 5.0, 4.5, 2.0};
    s.lanes.push_back(straight_lane());
    const int n = 2 + static_cast<int>(rng.next_index(4));
    for (int i = 0; i < n; ++i) {
        // spread in ego frame; keep centers at least 6 m apart
        for (int attempt = 0; attempt < 20; ++attempt) {
            const double fx = rng.uniform(-13, 13), fy = rng.uniform(-13, 13);
            if (std::hypot(fx, fy) < 5.0) continue;  // not on top of ego
            bool ok = true;
            for (const auto& a : s.agents) {
                const Vec2 rel = world_to_ego(s.ego, {a.x, a.y});
                if (std::hypot(rel[0] - fx, rel[1] - fy) < 6.0) ok = false;
            }
            if (!ok) continue;
            const Vec2 w = ego_to_world(s.ego, {fx, fy});
            s.agents.push_back(AgentState{w[0], w[1],
                                          wrap_angle(static_cast<double>(rng.uniform(-3.1f, 3.1f))),
                                          3.0, 4.5, 2.0});
            break;
        }
    }
    if (inside_boxes) *inside_boxes = s.agents;
    return s;
}

float pixel_at(const Tensor& canvas, int chan, int row, int col) {
    const int h = canvas.dim(1), w = canvas.dim(2);
    return canvas.data()[static_cast<size_t>(chan) * h * w + static_cast<size_t>(row) * w + col];
}

}  // namespace

TEST_SUITE_BEGIN("raster");

TEST_CASE("palette validates and decodes") {
    Palette p;
    p.validate();
    CHECK(p.nearest_class(0.0f, 0.0f, 1.0f) == SemanticClass::kVehicle);
    CHECK(p.nearest_class(0.45f, 0.55f, 0.5f) == SemanticClass::kLane);
    CHECK(p.nearest_class(0.05f, 0.05f, 0.05f) == SemanticClass::kBackground);
    CHECK(p.nearest_class(1.0f, 1.0f, 1.0f) == SemanticClass::kEgo);

    Palette bad;
    bad.vehicle = Rgb{0.1f, 0.1f, 0.1f};  // too close to background
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("empty scene rasterizes to zero") {
    SceneSnapshot s;
    s.ego = AgentState{10.0, -4.0, 1.0, 0.0, 4.5, 2.0};
    s.has_ego = false;
    Palette p;
    RasterGeometry g;
    for (CanvasKind kind :
         {CanvasKind::kPerception, CanvasKind::kPrediction, CanvasKind::kPlanning}) {
        Tensor canvas = rasterize(s, kind, p, g);
        for (float v : canvas.data()) CHECK(v == 0.0f);
    }
}

TEST_CASE("degenerate geometry rejected") {
    RasterGeometry g;
    g.height = 8;
    CHECK_THROWS_AS(rasterize(basic_scene(), CanvasKind::kPerception, Palette{}, g), ConfigError);
}

TEST_CASE("agent 10 m ahead lands 20 px above center") {
    SceneSnapshot s = basic_scene();
    s.lanes.clear();
    const Vec2 w = ego_to_world(s.ego, {10.0, 0.0});
    s.agents.push_back(AgentState{w[0], w[1], 0.0, 3.0, 4.5, 2.0});
    RasterGeometry g;  // 64x64 at 0.5 m/px
    const auto px = world_to_pixel(s.ego, w, g);
    CHECK(px[0] == doctest::Approx(32 - 20));
    CHECK(px[1] == doctest::Approx(32));
    Palette p;
    Tensor canvas = rasterize(s, CanvasKind::kPerception, p, g);
    CHECK(pixel_at(canvas, 2, 12, 32) == p.vehicle.b);  // blue channel set
    // ego box center is white at canvas center
    CHECK(pixel_at(canvas, 0, 32, 32) == 1.0f);
    CHECK(pixel_at(canvas, 1, 32, 32) == 1.0f);
    CHECK(pixel_at(canvas, 2, 32, 32) == 1.0f);
}

TEST_CASE("nearest-color class recovery on 50 random scenes") {
    Palette p;
    RasterGeometry g;
    Rng rng(2025);
    int total = 0, correct = 0;
    for (int sc = 0; sc < 50; ++sc) {
        std::vector<AgentState> boxes;
        SceneSnapshot s = random_scene(rng, &boxes);
        Tensor canvas = rasterize(s, CanvasKind::kPerception, p, g);
        for (const auto& box : boxes) {
            const auto px = world_to_pixel(s.ego, {box.x, box.y}, g);
            const int r = static_cast<int>(std::lround(px[0]));
            const int c = static_cast<int>(std::lround(px[1]));
            // only boxes fully inside the canvas (6 px margin > half diagonal)
            if (r < 6 || r >= g.height - 6 || c < 6 || c >= g.width - 6) continue;
            ++total;
            if (p.nearest_class(pixel_at(canvas, 0, r, c), pixel_at(canvas, 1, r, c),
                                pixel_at(canvas, 2, r, c)) == SemanticClass::kVehicle)
                ++correct;
        }
    }
    CHECK(total > 40);
    CHECK(static_cast<double>(correct) >= 0.99 * static_cast<double>(total));
}

TEST_CASE("frame invariance under rigid world translation") {
    Palette p;
    RasterGeometry g;
    Rng rng(7);
    std::vector<AgentState> boxes;
    SceneSnapshot s = random_scene(rng, &boxes);
    s.agent_futures.clear();
    for (const auto& a : s.agents) {
        std::vector<Vec2> fut;
        for (int k = 1; k <= 6; ++k)
            fut.push_back({a.x + k * std::cos(a.heading), a.y + k * std::sin(a.heading)});
        s.agent_futures.push_back(fut);
    }
    for (int k = 0; k < 8; ++k) s.ego_future.push_back({s.ego.x + 2.0 * k, s.ego.y});

    SceneSnapshot moved = s;
    const double tx = 137.25, ty = -54.5;
    auto shift = [&](double& x, double& y) {
        x += tx;
        y += ty;
    };
    shift(moved.ego.x, moved.ego.y);
    for (auto& a : moved.agents) shift(a.x, a.y);
    for (auto& lane : moved.lanes)
        for (auto& pt : lane.centerline) shift(pt[0], pt[1]);
    for (auto& fut : moved.agent_futures)
        for (auto& pt : fut) shift(pt[0], pt[1]);
    for (auto& pt : moved.ego_future) shift(pt[0], pt[1]);

    for (CanvasKind kind :
         {CanvasKind::kPerception, CanvasKind::kPrediction, CanvasKind::kPlanning}) {
        Tensor a = rasterize(s, kind, p, g);
        Tensor b = rasterize(moved, kind, p, g);
        CHECK(a.data() == b.data());
    }
}

TEST_CASE("trajectory gradient is monotone along a straight path") {
    Palette p;
    RasterGeometry g;
    SceneSnapshot s = basic_scene();
    s.lanes.clear();
    for (int k = 0; k < 8; ++k) s.ego_future.push_back({s.ego.x + 1.5 * (k + 1), s.ego.y});
    Tensor canvas = rasterize(s, CanvasKind::kPlanning, p, g);
    // walk up the column at the canvas center; red channel must not decrease
    // with the waypoint order (drawn upward from the ego row)
    float prev = -1.0f;
    bool seen = false;
    for (int r = 32; r >= 0; --r) {
        const float v = pixel_at(canvas, 0, r, 32);
        if (v == 0.0f) continue;  // off the stroke
        if (seen) CHECK(v >= prev);
        prev = v;
        seen = true;
    }
    CHECK(seen);
}

TEST_CASE("prediction canvas draws agent futures with the gradient colors") {
    Palette p;
    RasterGeometry g;
    SceneSnapshot s = basic_scene();
    s.lanes.clear();
    const Vec2 w0 = ego_to_world(s.ego, {5.0, 3.0});
    s.agents.push_back(AgentState{w0[0], w0[1], 0.0, 4.0, 4.5, 2.0});
    std::vector<Vec2> fut;
    for (int k = 0; k < 6; ++k) fut.push_back({w0[0] + 1.5 * k, w0[1]});
    s.agent_futures.push_back(fut);
    Tensor canvas = rasterize(s, CanvasKind::kPrediction, p, g);
    double sum = 0.0;
    for (float v : canvas.data()) sum += v;
    CHECK(sum > 0.0);
    // first segment color is the gradient start (pure green)
    const auto px = world_to_pixel(s.ego, w0, g);
    const int r = static_cast<int>(std::lround(px[0])), c = static_cast<int>(std::lround(px[1]));
    CHECK(pixel_at(canvas, 1, r, c) == 1.0f);
    CHECK(pixel_at(canvas, 0, r, c) == 0.0f);
}

TEST_CASE("scene validation rejects malformed snapshots") {
    SceneSnapshot s = basic_scene();
    s.ego.heading = 4.0;  // out of [-pi, pi)
    CHECK_THROWS_AS(validate_scene(s, -1, -1), DomainError);

    SceneSnapshot s2 = basic_scene();
    s2.ego_future = {{0.0, 0.0}};
    CHECK_THROWS_AS(validate_scene(s2, 8, -1), DimensionError);
}

TEST_SUITE_END();
