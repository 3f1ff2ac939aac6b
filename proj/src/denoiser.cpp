#include "bevdiff/denoiser.hpp"

#include <cmath>

namespace bevdiff {

void DenoiserConfig::validate() const {
    if (layers < 1 || hidden < 8 || heads < 1 || patch < 1) throw ConfigError("denoiser: bad sizes");
    if (hidden % heads != 0) throw ConfigError("denoiser: hidden must be divisible by heads");
    if (latent_hw % patch != 0) throw ConfigError("denoiser: patch must divide latent_hw");
}

void ObsEncoderConfig::validate() const {
    if (in_hw % 4 != 0) throw ConfigError("obs encoder: input size must be divisible by 4");
    if (in_hw / 4 != out_hw) throw ConfigError("obs encoder: out_hw must be in_hw/4");
    if (c1 < 1 || c2 < 1 || lstm_channels < 1) throw ConfigError("obs encoder: bad channels");
}

namespace {

Tensor he_conv(Rng& rng, int co, int ci, int k) {
    const float std = std::sqrt(2.0f / static_cast<float>(ci * k * k));
    return Tensor::randn({co, ci, k, k}, rng, std);
}

Tensor xavier_linear(Rng& rng, int in, int out) {
    const float bound = std::sqrt(6.0f / static_cast<float>(in + out));
    return Tensor::rand_uniform({in, out}, rng, -bound, bound);
}

Tensor linear(const ParamStore& p, const std::string& name, const Tensor& x) {
    Tensor y = matmul(x, p.at(name + "/w"));
    return p.has(name + "/b") ? add_bias(y, p.at(name + "/b")) : y;
}

}  // namespace

// ---- ObservationEncoder ----

ObservationEncoder::ObservationEncoder(ObsEncoderConfig cfg, int token_width, int patch)
    : cfg_(cfg), token_width_(token_width), patch_(patch) {
    cfg_.validate();
    if (cfg_.out_hw % patch != 0) throw ConfigError("obs encoder: patch must divide out_hw");
}

void ObservationEncoder::init_params(Rng& rng) {
    if (params_.size() > 0) throw StateError("obs encoder params already initialized");
    params_.add("down0/w", he_conv(rng, cfg_.c1, 4 * cfg_.in_channels, 3));
    params_.add("down0/b", Tensor::zeros({cfg_.c1}));
    params_.add("down1/w", he_conv(rng, cfg_.c2, 4 * cfg_.c1, 3));
    params_.add("down1/b", Tensor::zeros({cfg_.c2}));
    params_.add("pre/w", he_conv(rng, cfg_.lstm_channels, cfg_.c2, 1));
    params_.add("pre/b", Tensor::zeros({cfg_.lstm_channels}));
    // ConvLSTM gate conv: [x;h] -> 4 gates, forget-gate bias starts at 1
    params_.add("lstm/w", he_conv(rng, 4 * cfg_.lstm_channels,
                                  cfg_.lstm_channels + cfg_.lstm_channels, 3));
    std::vector<float> gate_bias(static_cast<size_t>(4 * cfg_.lstm_channels), 0.0f);
    for (int i = cfg_.lstm_channels; i < 2 * cfg_.lstm_channels; ++i)
        gate_bias[static_cast<size_t>(i)] = 1.0f;
    params_.add("lstm/b", Tensor::from_data({4 * cfg_.lstm_channels}, gate_bias));
    const int token_in = cfg_.lstm_channels * patch_ * patch_;
    params_.add("proj/w", xavier_linear(rng, token_in, token_width_));
    params_.add("proj/b", Tensor::zeros({token_width_}));
}

RecurrentBevState ObservationEncoder::initial_state(int batch) const {
    RecurrentBevState s;
    s.hidden = Tensor::zeros({batch, cfg_.lstm_channels, cfg_.out_hw, cfg_.out_hw});
    s.cell = Tensor::zeros({batch, cfg_.lstm_channels, cfg_.out_hw, cfg_.out_hw});
    s.initialized = true;
    return s;
}

Tensor ObservationEncoder::forward(const Tensor& obs, RecurrentBevState& state) const {
    if (params_.size() == 0) throw StateError("obs encoder used before initialization");
    if (!state.initialized) throw StateError("obs encoder state not initialized");
    if (obs.rank() != 4 || obs.dim(1) != cfg_.in_channels || obs.dim(2) != cfg_.in_hw)
        throw DimensionError("obs encoder expects [B,3,H,H]");
    if (state.hidden.dim(0) != obs.dim(0))
        throw DimensionError("obs encoder: state batch mismatch");

    Tensor h = space_to_depth2(obs);
    h = silu(add_chan_bias(conv2d(h, params_.at("down0/w"), 1, 1), params_.at("down0/b")));
    h = space_to_depth2(h);
    h = silu(add_chan_bias(conv2d(h, params_.at("down1/w"), 1, 1), params_.at("down1/b")));
    h = silu(add_chan_bias(conv2d(h, params_.at("pre/w"), 1, 0), params_.at("pre/b")));

    // ConvLSTM cell
    Tensor gates = add_chan_bias(conv2d(chan_concat({h, state.hidden}), params_.at("lstm/w"), 1, 1),
                                 params_.at("lstm/b"));
    const int ch = cfg_.lstm_channels;
    Tensor gi = sigmoid(chan_slice(gates, 0, ch));
    Tensor gf = sigmoid(chan_slice(gates, ch, 2 * ch));
    Tensor gg = tanh_op(chan_slice(gates, 2 * ch, 3 * ch));
    Tensor go = sigmoid(chan_slice(gates, 3 * ch, 4 * ch));
    Tensor cell = add(mul(gf, state.cell), mul(gi, gg));
    Tensor hidden = mul(go, tanh_op(cell));
    // recurrent state is carried across frames detached from the tape
    state.cell = cell.detached_copy();
    state.hidden = hidden.detached_copy();

    return linear(params_, "proj", patchify(hidden, patch_));
}

// ---- ConditionedDenoiser ----

ConditionedDenoiser::ConditionedDenoiser(DenoiserConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void ConditionedDenoiser::init_params(Rng& rng) {
    if (params_.size() > 0) throw StateError("denoiser params already initialized");
    const int d = cfg_.hidden;
    params_.add("temb/w1", xavier_linear(rng, d, d));
    params_.add("temb/b1", Tensor::zeros({d}));
    params_.add("temb/w2", xavier_linear(rng, d, d));
    params_.add("temb/b2", Tensor::zeros({d}));
    params_.add("cmd/table", Tensor::randn({3, d}, rng, 0.02f));
    // previous-latent embedding is bias-free so an all-zero z_prev
    // contributes exactly nothing
    params_.add("zprev/w", xavier_linear(rng, cfg_.token_dim(), d));

    params_.add("embed/w", xavier_linear(rng, cfg_.token_dim(), d));
    params_.add("embed/b", Tensor::zeros({d}));
    params_.add("pos", Tensor::randn({cfg_.tokens(), d}, rng, 0.02f));

    for (int i = 0; i < cfg_.layers; ++i) {
        const std::string p = "block" + std::to_string(i) + "/";
        for (const char* mod : {"mod_shift_a", "mod_scale_a", "mod_gate_a", "mod_shift_m",
                                "mod_scale_m", "mod_gate_m"}) {
            params_.add(p + mod + "/w", Tensor::zeros({d, d}));
            params_.add(p + mod + "/b", Tensor::zeros({d}));
        }
        for (const char* lin : {"wq", "wk", "wv", "wo"}) {
            params_.add(p + lin + "/w", xavier_linear(rng, d, d));
            params_.add(p + lin + "/b", Tensor::zeros({d}));
        }
        params_.add(p + "mlp1/w", xavier_linear(rng, d, 4 * d));
        params_.add(p + "mlp1/b", Tensor::zeros({4 * d}));
        params_.add(p + "mlp2/w", xavier_linear(rng, 4 * d, d));
        params_.add(p + "mlp2/b", Tensor::zeros({d}));
    }
    params_.add("final/mod_shift/w", Tensor::zeros({d, d}));
    params_.add("final/mod_shift/b", Tensor::zeros({d}));
    params_.add("final/mod_scale/w", Tensor::zeros({d, d}));
    params_.add("final/mod_scale/b", Tensor::zeros({d}));
    params_.add("final/out/w", Tensor::zeros({d, cfg_.token_dim()}));
    params_.add("final/out/b", Tensor::zeros({cfg_.token_dim()}));
}

Tensor ConditionedDenoiser::timestep_embedding(const std::vector<int>& ts) const {
    const int d = cfg_.hidden;
    const int half = d / 2;
    std::vector<float> emb(ts.size() * static_cast<size_t>(d));
    for (size_t b = 0; b < ts.size(); ++b) {
        for (int i = 0; i < half; ++i) {
            const double freq =
                std::exp(-std::log(10000.0) * static_cast<double>(i) / std::max(1, half - 1));
            const double arg = static_cast<double>(ts[b]) * freq;
            emb[b * static_cast<size_t>(d) + static_cast<size_t>(i)] =
                static_cast<float>(std::sin(arg));
            emb[b * static_cast<size_t>(d) + static_cast<size_t>(half + i)] =
                static_cast<float>(std::cos(arg));
        }
    }
    Tensor x = Tensor::from_data({static_cast<int>(ts.size()), d}, std::move(emb));
    Tensor h = silu(add_bias(matmul(x, params_.at("temb/w1")), params_.at("temb/b1")));
    return add_bias(matmul(h, params_.at("temb/w2")), params_.at("temb/b2"));
}

namespace {

Tensor linear2(const ParamStore& p, const std::string& w, const std::string& b, const Tensor& x) {
    return add_bias(matmul(x, p.at(w)), p.at(b));
}

}  // namespace

Tensor ConditionedDenoiser::build_condition(const std::vector<int>& ts, const Tensor& x_bev,
                                            const std::vector<Command>& cmds, const Tensor* z_prev,
                                            const std::vector<uint8_t>* z_prev_present,
                                            float drop_rate, Rng* rng, bool training) const {
    if (params_.size() == 0) throw StateError("denoiser used before initialization");
    const int B = static_cast<int>(ts.size());
    const int n = cfg_.tokens();
    if (static_cast<int>(cmds.size()) != B) throw DimensionError("build_condition: cmds size");
    if (x_bev.rank() != 2 || x_bev.dim(0) != B * n || x_bev.dim(1) != cfg_.hidden)
        throw DimensionError("build_condition: x_bev must be [B*n, hidden]");
    if (drop_rate < 0.0f || drop_rate > 1.0f) throw ConfigError("drop_rate out of [0,1]");

    Tensor temb = repeat_rows(timestep_embedding(ts), n);

    std::vector<Tensor> cmd_rows;
    cmd_rows.reserve(static_cast<size_t>(B));
    for (Command c : cmds) cmd_rows.push_back(select_row(params_.at("cmd/table"), static_cast<int>(c)));
    Tensor cmd = repeat_rows(concat_rows(cmd_rows), n);

    Tensor cond = add(add(temb, x_bev), cmd);

    // gated previous-latent tokens: one Bernoulli per frame
    if (z_prev != nullptr) {
        if (z_prev->dim(0) != B) throw DimensionError("build_condition: z_prev batch mismatch");
        std::vector<float> gate(static_cast<size_t>(B), 0.0f);
        bool any = false;
        for (int b = 0; b < B; ++b) {
            const bool present =
                z_prev_present == nullptr || (*z_prev_present)[static_cast<size_t>(b)] != 0;
            if (!present) continue;
            bool keep = true;
            if (training && drop_rate > 0.0f) {
                if (rng == nullptr)
                    throw StateError("build_condition: rng required for dropout during training");
                keep = !rng->bernoulli(drop_rate);
            }
            if (keep) {
                gate[static_cast<size_t>(b)] = 1.0f;
                any = true;
            }
        }
        if (any) {
            Tensor ztok = matmul(patchify(*z_prev, cfg_.patch), params_.at("zprev/w"));
            std::vector<float> mask(static_cast<size_t>(B) * n * cfg_.hidden);
            for (int b = 0; b < B; ++b)
                std::fill(mask.begin() + static_cast<size_t>(b) * n * cfg_.hidden,
                          mask.begin() + static_cast<size_t>(b + 1) * n * cfg_.hidden,
                          gate[static_cast<size_t>(b)]);
            cond = add(cond, mul(ztok, Tensor::from_data({B * n, cfg_.hidden}, std::move(mask))));
        }
    }
    return cond;
}

Tensor ConditionedDenoiser::adaln_block(int index, const Tensor& x, const Tensor& cond,
                                        int batch) const {
    const std::string p = "block" + std::to_string(index) + "/";
    Tensor c = silu(cond);
    Tensor shift_a = linear2(params_, p + "mod_shift_a/w", p + "mod_shift_a/b", c);
    Tensor scale_a = linear2(params_, p + "mod_scale_a/w", p + "mod_scale_a/b", c);
    Tensor gate_a = linear2(params_, p + "mod_gate_a/w", p + "mod_gate_a/b", c);
    Tensor shift_m = linear2(params_, p + "mod_shift_m/w", p + "mod_shift_m/b", c);
    Tensor scale_m = linear2(params_, p + "mod_scale_m/w", p + "mod_scale_m/b", c);
    Tensor gate_m = linear2(params_, p + "mod_gate_m/w", p + "mod_gate_m/b", c);

    Tensor h = add(mul(layer_norm(x), add_scalar(scale_a, 1.0f)), shift_a);
    Tensor q = linear2(params_, p + "wq/w", p + "wq/b", h);
    Tensor k = linear2(params_, p + "wk/w", p + "wk/b", h);
    Tensor v = linear2(params_, p + "wv/w", p + "wv/b", h);
    Tensor attn = linear2(params_, p + "wo/w", p + "wo/b",
                          attention(q, k, v, cfg_.heads, batch));
    Tensor out = add(x, mul(gate_a, attn));

    Tensor h2 = add(mul(layer_norm(out), add_scalar(scale_m, 1.0f)), shift_m);
    Tensor mlp = linear2(params_, p + "mlp2/w", p + "mlp2/b",
                         gelu(linear2(params_, p + "mlp1/w", p + "mlp1/b", h2)));
    return add(out, mul(gate_m, mlp));
}

Tensor ConditionedDenoiser::denoise_eps(const Tensor& z_t, const Tensor& cond) const {
    if (params_.size() == 0) throw StateError("denoiser used before initialization");
    if (z_t.rank() != 4 || z_t.dim(1) != cfg_.latent_channels || z_t.dim(2) != cfg_.latent_hw ||
        z_t.dim(3) != cfg_.latent_hw)
        throw DimensionError("denoise_eps expects [B,12,h',w'] latents");
    const int B = z_t.dim(0);
    const int n = cfg_.tokens();
    if (cond.dim(0) != B * n || cond.dim(1) != cfg_.hidden)
        throw DimensionError("denoise_eps: cond layout mismatch");

    Tensor x = add(linear2(params_, "embed/w", "embed/b", patchify(z_t, cfg_.patch)),
                   tile_rows(params_.at("pos"), B));
    for (int i = 0; i < cfg_.layers; ++i) x = adaln_block(i, x, cond, B);

    Tensor c = silu(cond);
    Tensor shift = linear2(params_, "final/mod_shift/w", "final/mod_shift/b", c);
    Tensor scale = linear2(params_, "final/mod_scale/w", "final/mod_scale/b", c);
    Tensor h = add(mul(layer_norm(x), add_scalar(scale, 1.0f)), shift);
    Tensor out = linear2(params_, "final/out/w", "final/out/b", h);
    return unpatchify(out, B, cfg_.latent_channels, cfg_.latent_hw, cfg_.latent_hw, cfg_.patch);
}

}  // namespace bevdiff
