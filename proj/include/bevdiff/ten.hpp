#pragma once

#include "bevdiff/codec.hpp"
#include "bevdiff/tensor.hpp"
#include "bevdiff/trajectory.hpp"

namespace bevdiff {

struct TenConfig {
    int layers = 2;
    int hidden = 128;
    int heads = 4;
    int patch = 2;
    int waypoints = 8;
    double dt_plan = 0.5;
    int latent_channels = 12;
    int latent_hw = 16;
    double v_max = 15.0;  // kinematic clamp for emitted trajectories

    int grid() const { return latent_hw / patch; }
    int tokens() const { return grid() * grid(); }
    int token_dim() const { return latent_channels * patch * patch; }
    void validate() const;
};

// Query-based extractor: a learned bank of T ego queries cross-attends over
// the tokenized latent BEV image; an MLP head reads out (x, y) per query.
class TrajectoryExtractor {
public:
    explicit TrajectoryExtractor(TenConfig cfg);

    void init_params(Rng& rng);

    // [B,12,h',w'] -> [B*L, hidden] (patchify + embed + positional encoding)
    Tensor tokenize(const Tensor& z) const;
    // [B,12,h',w'] -> [B*T, 2] raw waypoint regression (taped; training path)
    Tensor forward_raw(const Tensor& z) const;
    // single-latent inference with kinematic clamping
    Trajectory extract(const LatentBev& latent) const;

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const TenConfig& config() const { return cfg_; }

private:
    TenConfig cfg_;
    ParamStore params_;
};

// MSE over all T x 2 entries; both trajectories in the ego frame.
Tensor l_extraction(const Tensor& pred, const Tensor& truth);
double l_extraction_value(const Trajectory& pred, const Trajectory& truth);

}  // namespace bevdiff
