#pragma once

#include <optional>
#include <vector>

#include "bevdiff/scene.hpp"
#include "bevdiff/tensor.hpp"

namespace bevdiff {

struct DenoiserConfig {
    int layers = 4;
    int hidden = 128;
    int heads = 4;
    int patch = 2;
    int latent_channels = 12;
    int latent_hw = 16;

    int grid() const { return latent_hw / patch; }
    int tokens() const { return grid() * grid(); }
    int token_dim() const { return latent_channels * patch * patch; }
    void validate() const;
};

struct ObsEncoderConfig {
    int in_hw = 64;
    int in_channels = 3;
    int c1 = 16;           // after first downsample
    int c2 = 32;           // after second downsample
    int lstm_channels = 16;
    int out_hw = 16;       // must equal DenoiserConfig::latent_hw

    void validate() const;
};

// ConvLSTM hidden/cell maps, [B, lstm_channels, out_hw, out_hw]. Reset at
// episode start via ObservationEncoder::initial_state.
struct RecurrentBevState {
    Tensor hidden;
    Tensor cell;
    bool initialized = false;
};

// Convolutional downsampler + ConvLSTM recurrence + patchify/projection to
// per-token features. Stands in for a camera-to-BEV backbone: it sees only
// the current true scene rendered as a perception raster.
class ObservationEncoder {
public:
    ObservationEncoder(ObsEncoderConfig cfg, int token_width, int patch);

    void init_params(Rng& rng);
    RecurrentBevState initial_state(int batch) const;
    // obs: [B,3,H,W]; returns tokens [B*n, token_width], updates state.
    Tensor forward(const Tensor& obs, RecurrentBevState& state) const;

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const ObsEncoderConfig& config() const { return cfg_; }

private:
    ObsEncoderConfig cfg_;
    int token_width_;
    int patch_;
    ParamStore params_;
};

// DiT-style conditioned noise predictor with AdaLN-Zero blocks, plus the
// condition assembly (timestep + observation tokens + command + gated
// previous-latent tokens).
class ConditionedDenoiser {
public:
    explicit ConditionedDenoiser(DenoiserConfig cfg);

    void init_params(Rng& rng);

    // [B, hidden] sinusoidal embedding passed through a 2-layer MLP.
    Tensor timestep_embedding(const std::vector<int>& ts) const;

    // Per-token condition sum. z_prev (optional) is [B,12,h',w'] with a
    // per-sample presence mask; one Bernoulli per frame decides the dropout
    // gate during training. rng must be supplied when training with
    // drop_rate > 0 and a present z_prev.
    Tensor build_condition(const std::vector<int>& ts, const Tensor& x_bev,
                           const std::vector<Command>& cmds, const Tensor* z_prev,
                           const std::vector<uint8_t>* z_prev_present, float drop_rate,
                           Rng* rng, bool training) const;

    // One AdaLN-Zero transformer block (exposed for gradient checks).
    Tensor adaln_block(int index, const Tensor& x, const Tensor& cond, int batch) const;

    // z_t: [B,12,h',w'], cond: [B*n, hidden] -> eps_pred [B,12,h',w'].
    Tensor denoise_eps(const Tensor& z_t, const Tensor& cond) const;

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const DenoiserConfig& config() const { return cfg_; }

private:
    DenoiserConfig cfg_;
    ParamStore params_;
};

}  // namespace bevdiff
