#pragma once

#include <string>

#include "bevdiff/scene.hpp"
#include "bevdiff/tensor.hpp"

namespace bevdiff {

enum class CanvasKind { kPerception = 0, kPrediction = 1, kPlanning = 2 };

struct RasterGeometry {
    int height = 64;
    int width = 64;
    double resolution = 0.5;  // meters per pixel

    void validate() const;
};

struct Rgb {
    float r = 0.0f, g = 0.0f, b = 0.0f;
};

enum class SemanticClass {
    kBackground = 0,
    kLane,
    kVehicle,
    kEgo,
    kSignalRed,
    kSignalGreen,
};

// Color assignments for the three canvases. Class colors must stay pairwise
// separated so nearest-color decoding is unambiguous.
struct Palette {
    Rgb lane{0.5f, 0.5f, 0.5f};
    Rgb vehicle{0.0f, 0.0f, 1.0f};
    Rgb ego{1.0f, 1.0f, 1.0f};
    Rgb signal_red{1.0f, 0.0f, 0.0f};
    Rgb signal_green{0.0f, 1.0f, 0.0f};
    Rgb prediction_start{0.0f, 1.0f, 0.0f};
    Rgb prediction_end{1.0f, 1.0f, 0.0f};
    Rgb planning_start{0.5f, 0.0f, 0.0f};
    Rgb planning_end{1.0f, 0.0f, 0.0f};

    // Throws ConfigError if any two class colors (background included) come
    // closer than min_dist in RGB space.
    void validate(double min_dist = 0.25) const;

    SemanticClass nearest_class(float r, float g, float b) const;
};

// Ego-centered rasterization of one target family onto a [3,H,W] canvas in
// [0,1]; background stays exactly 0. Ego sits at (H/2, W/2) heading up.
Tensor rasterize(const SceneSnapshot& scene, CanvasKind kind, const Palette& palette,
                 const RasterGeometry& geometry);

struct CanvasTriplet {
    Tensor perception;  // [3,H,W]
    Tensor prediction;
    Tensor planning;
};

CanvasTriplet rasterize_triplet(const SceneSnapshot& scene, const Palette& palette,
                                const RasterGeometry& geometry);

// (row, col) pixel coordinates of a world point; may be off-canvas.
std::array<double, 2> world_to_pixel(const AgentState& ego, const Vec2& p,
                                     const RasterGeometry& geometry);

const char* canvas_kind_name(CanvasKind kind);

}  // namespace bevdiff
