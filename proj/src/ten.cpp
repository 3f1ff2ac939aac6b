#include "bevdiff/ten.hpp"

#include <cmath>

namespace bevdiff {

void TenConfig::validate() const {
    if (layers < 1 || hidden < 8 || heads < 1 || waypoints < 1)
        throw ConfigError("ten: bad sizes");
    if (hidden % heads != 0) throw ConfigError("ten: hidden must be divisible by heads");
    if (latent_hw % patch != 0) throw ConfigError("ten: patch must divide latent_hw");
    if (dt_plan <= 0.0) throw ConfigError("ten: dt_plan must be positive");
}

TrajectoryExtractor::TrajectoryExtractor(TenConfig cfg) : cfg_(cfg) { cfg_.validate(); }

namespace {

Tensor xavier_linear(Rng& rng, int in, int out) {
    const float bound = std::sqrt(6.0f / static_cast<float>(in + out));
    return Tensor::rand_uniform({in, out}, rng, -bound, bound);
}

Tensor linear2(const ParamStore& p, const std::string& name, const Tensor& x) {
    return add_bias(matmul(x, p.at(name + "/w")), p.at(name + "/b"));
}

}  // namespace

void TrajectoryExtractor::init_params(Rng& rng) {
    if (params_.size() > 0) throw StateError("ten params already initialized");
    const int d = cfg_.hidden;
    params_.add("embed/w", xavier_linear(rng, cfg_.token_dim(), d));
    params_.add("embed/b", Tensor::zeros({d}));
    params_.add("pos", Tensor::randn({cfg_.tokens(), d}, rng, 0.02f));
    params_.add("queries", Tensor::randn({cfg_.waypoints, d}, rng, 0.02f));
    for (int i = 0; i < cfg_.layers; ++i) {
        const std::string p = "layer" + std::to_string(i) + "/";
        for (const char* lin : {"wq", "wk", "wv", "wo"}) {
            params_.add(p + lin + "/w", xavier_linear(rng, d, d));
            params_.add(p + lin + "/b", Tensor::zeros({d}));
        }
        params_.add(p + "mlp1/w", xavier_linear(rng, d, 4 * d));
        params_.add(p + "mlp1/b", Tensor::zeros({4 * d}));
        params_.add(p + "mlp2/w", xavier_linear(rng, 4 * d, d));
        params_.add(p + "mlp2/b", Tensor::zeros({d}));
    }
    params_.add("head/w1", xavier_linear(rng, d, d));
    params_.add("head/b1", Tensor::zeros({d}));
    params_.add("head/w2", xavier_linear(rng, d, 2));
    params_.add("head/b2", Tensor::zeros({2}));
}

Tensor TrajectoryExtractor::tokenize(const Tensor& z) const {
    if (params_.size() == 0) throw StateError("ten used before initialization");
    if (z.rank() != 4 || z.dim(1) != cfg_.latent_channels || z.dim(2) != cfg_.latent_hw)
        throw DimensionError("ten tokenize expects [B,12,h',w']");
    const int B = z.dim(0);
    return add(linear2(params_, "embed", patchify(z, cfg_.patch)),
               tile_rows(params_.at("pos"), B));
}

Tensor TrajectoryExtractor::forward_raw(const Tensor& z) const {
    const int B = z.dim(0);
    Tensor tokens = tokenize(z);
    Tensor q = tile_rows(params_.at("queries"), B);
    for (int i = 0; i < cfg_.layers; ++i) {
        const std::string p = "layer" + std::to_string(i) + "/";
        Tensor hq = layer_norm(q);
        Tensor hk = layer_norm(tokens);
        Tensor attn = linear2(params_, p + "wo",
                              attention(linear2(params_, p + "wq", hq),
                                        linear2(params_, p + "wk", hk),
                                        linear2(params_, p + "wv", hk), cfg_.heads, B));
        q = add(q, attn);
        Tensor mlp = linear2(params_, p + "mlp2",
                             gelu(linear2(params_, p + "mlp1", layer_norm(q))));
        q = add(q, mlp);
    }
    Tensor h = gelu(add_bias(matmul(layer_norm(q), params_.at("head/w1")), params_.at("head/b1")));
    return add_bias(matmul(h, params_.at("head/w2")), params_.at("head/b2"));
}

Trajectory TrajectoryExtractor::extract(const LatentBev& latent) const {
    NoGradGuard ng;
    Tensor z = reshape(latent.z, {1, latent.z.dim(0), latent.z.dim(1), latent.z.dim(2)});
    Tensor out = forward_raw(z);
    std::vector<std::array<double, 2>> pts;
    pts.reserve(static_cast<size_t>(cfg_.waypoints));
    for (int k = 0; k < cfg_.waypoints; ++k)
        pts.push_back({static_cast<double>(out.data()[static_cast<size_t>(k) * 2]),
                       static_cast<double>(out.data()[static_cast<size_t>(k) * 2 + 1])});
    return Trajectory::clamped(std::move(pts), cfg_.dt_plan, cfg_.v_max);
}

Tensor l_extraction(const Tensor& pred, const Tensor& truth) {
    if (pred.shape() != truth.shape()) throw DimensionError("l_extraction: length mismatch");
    return mse(pred, truth);
}

double l_extraction_value(const Trajectory& pred, const Trajectory& truth) {
    if (pred.waypoints.size() != truth.waypoints.size())
        throw DimensionError("l_extraction: length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < pred.waypoints.size(); ++i) {
        const double dx = pred.waypoints[i][0] - truth.waypoints[i][0];
        const double dy = pred.waypoints[i][1] - truth.waypoints[i][1];
        acc += dx * dx + dy * dy;
    }
    return acc / (2.0 * static_cast<double>(pred.waypoints.size()));
}

}  // namespace bevdiff
