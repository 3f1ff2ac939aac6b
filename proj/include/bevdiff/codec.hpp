#pragma once

#include <memory>
#include <vector>

#include "bevdiff/raster.hpp"
#include "bevdiff/tensor.hpp"

namespace bevdiff {

// Channel-concatenated latent of the three canvases, blocks in
// (perception, prediction, planning) order: [12, h', w'].
struct LatentBev {
    Tensor z;
};

// Shared per-canvas codec: [3,H,W] <-> [4,h',w'] with h' = H/factor.
class LatentCodec {
public:
    virtual ~LatentCodec() = default;
    virtual int factor() const = 0;
    virtual bool trained() const = 0;
    virtual Tensor encode_canvas(const Tensor& canvas) const = 0;
    virtual Tensor decode_canvas(const Tensor& z) const = 0;
    // Batched forms, [B,3,H,W] <-> [B,4,h',w'].
    virtual Tensor encode_batch(const Tensor& canvases) const;
    virtual Tensor decode_batch(const Tensor& zs) const;
};

// f=1 passthrough: three channels kept, fourth latent channel zero. Lets the
// diffusion and extraction stacks run without a trained autoencoder.
class IdentityCodec : public LatentCodec {
public:
    int factor() const override { return 1; }
    bool trained() const override { return true; }
    Tensor encode_canvas(const Tensor& canvas) const override;
    Tensor decode_canvas(const Tensor& z) const override;
};

struct AutoencoderConfig {
    int num_down = 2;          // downsample factor = 2^num_down
    int base_channels = 16;
    float latent_reg = 1e-4f;  // activity regularizer weight on z^2
    int steps = 1500;
    int batch = 16;
    float lr = 1e-3f;
    uint64_t seed = 1;
    int eval_every = 50;
    double holdout_frac = 0.05;
};

// Small strided conv autoencoder with 4 latent channels regardless of the
// downsample factor. Latents are standardized by latent_scale after training.
class ConvAutoencoder : public LatentCodec {
public:
    explicit ConvAutoencoder(int num_down = 2, int base_channels = 16);

    void init_params(Rng& rng);

    int factor() const override { return 1 << num_down_; }
    bool trained() const override { return trained_; }
    Tensor encode_canvas(const Tensor& canvas) const override;
    Tensor decode_canvas(const Tensor& z) const override;
    Tensor encode_batch(const Tensor& canvases) const override;
    Tensor decode_batch(const Tensor& zs) const override;

    // Taped forwards without the latent_scale standardization (training path).
    Tensor encode_raw(const Tensor& canvases) const;
    Tensor decode_raw(const Tensor& zs) const;

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    float latent_scale() const { return latent_scale_; }
    void set_latent_scale(float s) { latent_scale_ = s; }
    void set_trained(bool t) { trained_ = t; }
    int num_down() const { return num_down_; }
    int base_channels() const { return base_channels_; }

private:
    int num_down_;
    int base_channels_;
    bool trained_ = false;
    float latent_scale_ = 1.0f;
    ParamStore params_;
};

struct AutoencoderReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> eval_losses;  // held-out reconstruction loss per checkpoint
};

// Trains in place; requires at least 1000 canvases. Deterministic per seed.
AutoencoderReport train_autoencoder(ConvAutoencoder& codec, const std::vector<Tensor>& canvases,
                                    const AutoencoderConfig& cfg);

// Per-canvas independent encode, channel-concatenated in
// perception/prediction/planning order.
LatentBev encode_latent(const CanvasTriplet& canvases, const LatentCodec& codec);
CanvasTriplet decode_latent(const LatentBev& latent, const LatentCodec& codec);

double psnr(const Tensor& a, const Tensor& b);

}  // namespace bevdiff
