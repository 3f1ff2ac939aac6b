#include "bevdiff/codec.hpp"

#include <cmath>
#include <numeric>

namespace bevdiff {

namespace {

// Pulls sample b out of a [B,c,h,w] stack as [c,h,w].
Tensor take_sample(const Tensor& x, int b) {
    const int c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const size_t block = static_cast<size_t>(c) * h * w;
    std::vector<float> data(x.data().begin() + static_cast<long>(b * block),
                            x.data().begin() + static_cast<long>((b + 1) * block));
    return Tensor::from_data({c, h, w}, std::move(data));
}

Tensor stack_samples(const std::vector<Tensor>& xs) {
    std::vector<float> data;
    data.reserve(xs.size() * xs[0].data().size());
    for (const auto& x : xs) data.insert(data.end(), x.data().begin(), x.data().end());
    return Tensor::from_data(
        {static_cast<int>(xs.size()), xs[0].dim(0), xs[0].dim(1), xs[0].dim(2)}, std::move(data));
}

}  // namespace

Tensor LatentCodec::encode_batch(const Tensor& canvases) const {
    std::vector<Tensor> zs;
    zs.reserve(static_cast<size_t>(canvases.dim(0)));
    for (int b = 0; b < canvases.dim(0); ++b) zs.push_back(encode_canvas(take_sample(canvases, b)));
    return stack_samples(zs);
}

Tensor LatentCodec::decode_batch(const Tensor& zs) const {
    std::vector<Tensor> cs;
    cs.reserve(static_cast<size_t>(zs.dim(0)));
    for (int b = 0; b < zs.dim(0); ++b) cs.push_back(decode_canvas(take_sample(zs, b)));
    return stack_samples(cs);
}

// ---- IdentityCodec ----

Tensor IdentityCodec::encode_canvas(const Tensor& canvas) const {
    if (canvas.rank() != 3 || canvas.dim(0) != 3)
        throw DimensionError("identity codec expects [3,H,W]");
    std::vector<float> out(canvas.data());
    out.resize(out.size() / 3 * 4, 0.0f);
    return Tensor::from_data({4, canvas.dim(1), canvas.dim(2)}, std::move(out));
}

Tensor IdentityCodec::decode_canvas(const Tensor& z) const {
    if (z.rank() != 3 || z.dim(0) != 4) throw DimensionError("identity codec expects [4,h,w]");
    NoGradGuard ng;
    return clamp01(chan_slice(z, 0, 3));
}

// ---- ConvAutoencoder ----

namespace {

Tensor he_conv(Rng& rng, int co, int ci, int k) {
    const float std = std::sqrt(2.0f / static_cast<float>(ci * k * k));
    return Tensor::randn({co, ci, k, k}, rng, std);
}

}  // namespace

ConvAutoencoder::ConvAutoencoder(int num_down, int base_channels)
    : num_down_(num_down), base_channels_(base_channels) {
    if (num_down < 1 || num_down > 3) throw ConfigError("autoencoder: num_down must be 1..3");
    if (base_channels < 4) throw ConfigError("autoencoder: base_channels too small");
}

void ConvAutoencoder::init_params(Rng& rng) {
    if (params_.size() > 0) throw StateError("autoencoder params already initialized");
    int ch = 3;
    for (int i = 0; i < num_down_; ++i) {
        // downsample = space_to_depth (exact) followed by a 3x3 conv
        const int co = base_channels_ << i;
        params_.add("enc/down" + std::to_string(i) + "/w", he_conv(rng, co, 4 * ch, 3));
        params_.add("enc/down" + std::to_string(i) + "/b", Tensor::zeros({co}));
        ch = co;
    }
    params_.add("enc/mid/w", he_conv(rng, ch, ch, 3));
    params_.add("enc/mid/b", Tensor::zeros({ch}));
    params_.add("enc/proj/w", he_conv(rng, 4, ch, 1));
    params_.add("enc/proj/b", Tensor::zeros({4}));

    params_.add("dec/proj/w", he_conv(rng, ch, 4, 1));
    params_.add("dec/proj/b", Tensor::zeros({ch}));
    params_.add("dec/mid/w", he_conv(rng, ch, ch, 3));
    params_.add("dec/mid/b", Tensor::zeros({ch}));
    for (int i = num_down_ - 1; i >= 1; --i) {
        const int ci = base_channels_ << i;
        const int co = base_channels_ << (i - 1);
        params_.add("dec/up" + std::to_string(i) + "/w", he_conv(rng, co, ci, 3));
        params_.add("dec/up" + std::to_string(i) + "/b", Tensor::zeros({co}));
    }
    // final stage stays at half resolution: conv to 12 channels then a
    // pixel-shuffle to [3,H,W]
    params_.add("dec/out/w", he_conv(rng, 12, base_channels_, 3));
    params_.add("dec/out/b", Tensor::zeros({12}));
}

Tensor ConvAutoencoder::encode_raw(const Tensor& x4) const {
    if (params_.size() == 0) throw StateError("autoencoder used before initialization");
    Tensor h = x4;
    for (int i = 0; i < num_down_; ++i) {
        const std::string p = "enc/down" + std::to_string(i);
        h = space_to_depth2(h);
        h = silu(add_chan_bias(conv2d(h, params_.at(p + "/w"), 1, 1), params_.at(p + "/b")));
    }
    h = silu(add_chan_bias(conv2d(h, params_.at("enc/mid/w"), 1, 1), params_.at("enc/mid/b")));
    return add_chan_bias(conv2d(h, params_.at("enc/proj/w"), 1, 0), params_.at("enc/proj/b"));
}

Tensor ConvAutoencoder::decode_raw(const Tensor& z4) const {
    if (params_.size() == 0) throw StateError("autoencoder used before initialization");
    Tensor h = silu(
        add_chan_bias(conv2d(z4, params_.at("dec/proj/w"), 1, 0), params_.at("dec/proj/b")));
    h = silu(add_chan_bias(conv2d(h, params_.at("dec/mid/w"), 1, 1), params_.at("dec/mid/b")));
    for (int i = num_down_ - 1; i >= 1; --i) {
        const std::string p = "dec/up" + std::to_string(i);
        h = upsample2x(h);
        h = silu(add_chan_bias(conv2d(h, params_.at(p + "/w"), 1, 1), params_.at(p + "/b")));
    }
    h = add_chan_bias(conv2d(h, params_.at("dec/out/w"), 1, 1), params_.at("dec/out/b"));
    return sigmoid(depth_to_space2(h));
}

Tensor ConvAutoencoder::encode_batch(const Tensor& canvases) const {
    if (!trained_) throw StateError("autoencoder codec is untrained; train it or use identity mode");
    NoGradGuard ng;
    Tensor z = encode_raw(canvases);
    return latent_scale_ == 1.0f ? z : mul_scalar(z, latent_scale_);
}

Tensor ConvAutoencoder::decode_batch(const Tensor& zs) const {
    if (!trained_) throw StateError("autoencoder codec is untrained; train it or use identity mode");
    NoGradGuard ng;
    Tensor z = latent_scale_ == 1.0f ? zs : mul_scalar(zs, 1.0f / latent_scale_);
    return clamp01(decode_raw(z));
}

Tensor ConvAutoencoder::encode_canvas(const Tensor& canvas) const {
    if (canvas.rank() != 3) throw DimensionError("encode_canvas expects [3,H,W]");
    Tensor z = encode_batch(reshape(canvas, {1, canvas.dim(0), canvas.dim(1), canvas.dim(2)}));
    return reshape(z, {z.dim(1), z.dim(2), z.dim(3)});
}

Tensor ConvAutoencoder::decode_canvas(const Tensor& z) const {
    if (z.rank() != 3) throw DimensionError("decode_canvas expects [4,h,w]");
    Tensor c = decode_batch(reshape(z, {1, z.dim(0), z.dim(1), z.dim(2)}));
    return reshape(c, {c.dim(1), c.dim(2), c.dim(3)});
}

namespace {

Tensor gather_batch(const std::vector<Tensor>& canvases, const std::vector<size_t>& idx) {
    const Tensor& first = canvases[idx[0]];
    std::vector<float> data;
    data.reserve(idx.size() * first.data().size());
    for (size_t i : idx) data.insert(data.end(), canvases[i].data().begin(),
                                     canvases[i].data().end());
    return Tensor::from_data(
        {static_cast<int>(idx.size()), first.dim(0), first.dim(1), first.dim(2)}, std::move(data));
}

}  // namespace

AutoencoderReport train_autoencoder(ConvAutoencoder& codec, const std::vector<Tensor>& canvases,
                                    const AutoencoderConfig& cfg) {
    if (canvases.size() < 1000)
        throw TrainingError("train_autoencoder: need at least 1000 canvases, got " +
                            std::to_string(canvases.size()));
    Rng rng(cfg.seed);
    Rng init_rng = rng.fork(0);
    Rng batch_rng = rng.fork(1);
    if (codec.params().size() == 0) codec.init_params(init_rng);

    // deterministic shuffled split
    std::vector<size_t> order(canvases.size());
    std::iota(order.begin(), order.end(), size_t{0});
    for (size_t i = order.size() - 1; i > 0; --i)
        std::swap(order[i], order[batch_rng.next_index(i + 1)]);
    const size_t n_hold = std::max<size_t>(cfg.batch, static_cast<size_t>(
                                                           cfg.holdout_frac * order.size()));
    std::vector<size_t> holdout(order.begin(), order.begin() + static_cast<long>(n_hold));
    std::vector<size_t> train(order.begin() + static_cast<long>(n_hold), order.end());

    auto eval_loss = [&]() {
        NoGradGuard ng;
        double total = 0.0;
        size_t count = 0;
        for (size_t off = 0; off + cfg.batch <= holdout.size() && count < 8;
             off += cfg.batch, ++count) {
            std::vector<size_t> idx(holdout.begin() + static_cast<long>(off),
                                    holdout.begin() + static_cast<long>(off + cfg.batch));
            Tensor x = gather_batch(canvases, idx);
            total += mse(codec.decode_raw(codec.encode_raw(x)), x).item();
        }
        return count ? total / static_cast<double>(count) : 0.0;
    };

    AutoencoderReport report;
    report.initial_loss = eval_loss();
    try {
        for (int step = 0; step < cfg.steps; ++step) {
            std::vector<size_t> idx(static_cast<size_t>(cfg.batch));
            for (auto& i : idx) i = train[batch_rng.next_index(train.size())];
            Tensor x = gather_batch(canvases, idx);
            Tensor z = codec.encode_raw(x);
            Tensor recon = codec.decode_raw(z);
            Tensor loss = add(mse(recon, x), mul_scalar(mean_all(square(z)), cfg.latent_reg));
            codec.params().zero_grads();
            backward(loss);
            codec.params().adam_step(cfg.lr);
            if ((step + 1) % cfg.eval_every == 0) report.eval_losses.push_back(eval_loss());
        }
    } catch (const NumericalError& e) {
        throw TrainingError(std::string("autoencoder training diverged: ") + e.what());
    }
    report.final_loss = eval_loss();

    // standardize latent scale over a sample of the training set
    {
        NoGradGuard ng;
        std::vector<size_t> idx;
        for (size_t i = 0; i < train.size() && idx.size() < 64; i += std::max<size_t>(1, train.size() / 64))
            idx.push_back(train[i]);
        Tensor z = codec.encode_raw(gather_batch(canvases, idx));
        double mean = 0.0;
        for (float v : z.data()) mean += v;
        mean /= static_cast<double>(z.numel());
        double var = 0.0;
        for (float v : z.data()) var += (v - mean) * (v - mean);
        var /= static_cast<double>(z.numel());
        codec.set_latent_scale(var > 1e-12 ? static_cast<float>(1.0 / std::sqrt(var)) : 1.0f);
    }
    codec.set_trained(true);
    return report;
}

LatentBev encode_latent(const CanvasTriplet& canvases, const LatentCodec& codec) {
    NoGradGuard ng;
    Tensor zp = codec.encode_canvas(canvases.perception);
    Tensor zr = codec.encode_canvas(canvases.prediction);
    Tensor zl = codec.encode_canvas(canvases.planning);
    return {chan_concat({zp, zr, zl})};
}

CanvasTriplet decode_latent(const LatentBev& latent, const LatentCodec& codec) {
    NoGradGuard ng;
    if (latent.z.rank() != 3 || latent.z.dim(0) != 12)
        throw DimensionError("decode_latent expects [12,h,w]");
    const int c = 4;
    return {codec.decode_canvas(chan_slice(latent.z, 0, c)),
            codec.decode_canvas(chan_slice(latent.z, c, 2 * c)),
            codec.decode_canvas(chan_slice(latent.z, 2 * c, 3 * c))};
}

double psnr(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimensionError("psnr: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.data().size(); ++i) {
        const double d = static_cast<double>(a.data()[i]) - b.data()[i];
        acc += d * d;
    }
    acc /= static_cast<double>(a.numel());
    if (acc <= 0.0) return 1e9;
    return 10.0 * std::log10(1.0 / acc);
}

}  // namespace bevdiff
