#include "doctest.h"

#include <cmath>

#include "bevdiff/codec.hpp"
#include "bevdiff/world.hpp"

using namespace bevdiff;

namespace {

// canvases from expert rollouts, constant-velocity agent futures
std::vector<Tensor> sim_canvases(size_t want, const RasterGeometry& geo) {
    Palette pal;
    std::vector<Tensor> out;
    uint64_t seed = 100;
    while (out.size() < want) {
        for (ScenarioKind kind : {ScenarioKind::kLaneFollow, ScenarioKind::kLeadBrake,
                                  ScenarioKind::kMerge, ScenarioKind::kSignalizedStop}) {
            WorldState w = spawn_scenario({kind, seed, -1, 40.0});
            run_episode(w, [&](const WorldState& s) {
                ExpertOutput ex = expert_policy(s);
                if (static_cast<int>(std::lround(s.time * 10)) % 4 == 0) {
                    SceneSnapshot snap = snapshot_now(s);
                    snap.ego_future = ex.future_world;
                    for (const auto& n : s.npcs) {
                        std::vector<Vec2> fut;
                        for (int k = 1; k <= 8; ++k)
                            fut.push_back({n.agent.x +
                                               std::cos(n.agent.heading) * n.agent.speed * 0.5 * k,
                                           n.agent.y +
                                               std::sin(n.agent.heading) * n.agent.speed * 0.5 * k});
                        snap.agent_futures.push_back(fut);
                    }
                    auto t = rasterize_triplet(snap, pal, geo);
                    out.push_back(t.perception);
                    out.push_back(t.prediction);
                    out.push_back(t.planning);
                }
                return ex.control;
            });
        }
        ++seed;
    }
    return out;
}

}  // namespace

TEST_SUITE_BEGIN("codec");

TEST_CASE("identity codec round trip is exact") {
    IdentityCodec codec;
    Rng rng(1);
    Tensor canvas = Tensor::rand_uniform({3, 16, 16}, rng, 0.0f, 1.0f);
    Tensor z = codec.encode_canvas(canvas);
    CHECK(z.shape() == Shape{4, 16, 16});
    // 4th channel zero
    for (size_t i = 3 * 256; i < 4 * 256; ++i) CHECK(z.data()[i] == 0.0f);
    Tensor back = codec.decode_canvas(z);
    CHECK(back.data() == canvas.data());
}

TEST_CASE("latent triplet layout and block separability (identity mode)") {
    IdentityCodec codec;
    Rng rng(2);
    CanvasTriplet t{Tensor::rand_uniform({3, 16, 16}, rng, 0.0f, 1.0f),
                    Tensor::rand_uniform({3, 16, 16}, rng, 0.0f, 1.0f),
                    Tensor::rand_uniform({3, 16, 16}, rng, 0.0f, 1.0f)};
    LatentBev lat = encode_latent(t, codec);
    CHECK(lat.z.shape() == Shape{12, 16, 16});

    // zero the planning block; perception must decode unchanged
    std::vector<float> zeroed = lat.z.data();
    std::fill(zeroed.begin() + 8 * 256, zeroed.end(), 0.0f);
    CanvasTriplet back = decode_latent({Tensor::from_data({12, 16, 16}, zeroed)}, codec);
    CHECK(back.perception.data() == t.perception.data());
    CHECK(back.prediction.data() == t.prediction.data());
    for (float v : back.planning.data()) CHECK(v == 0.0f);
}

TEST_CASE("untrained learned codec refuses to run") {
    ConvAutoencoder codec;
    Rng rng(3);
    Tensor canvas = Tensor::rand_uniform({3, 64, 64}, rng, 0.0f, 1.0f);
    CHECK_THROWS_AS(codec.encode_canvas(canvas), StateError);
    CHECK_THROWS_AS(codec.decode_canvas(Tensor::zeros({4, 16, 16})), StateError);
}

TEST_CASE("latent channel count is 4 for every downsample factor") {
    for (int nd : {1, 2}) {
        ConvAutoencoder codec(nd, 8);
        Rng rng(4);
        codec.init_params(rng);
        codec.set_trained(true);
        const int hw = 32;
        Tensor canvas = Tensor::rand_uniform({3, hw, hw}, rng, 0.0f, 1.0f);
        Tensor z = codec.encode_canvas(canvas);
        CHECK(z.dim(0) == 4);
        CHECK(z.dim(1) == hw / codec.factor());
        Tensor back = codec.decode_canvas(z);
        CHECK(back.shape() == canvas.shape());
        for (float v : back.data()) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
}

TEST_CASE("training requires at least 1000 canvases") {
    ConvAutoencoder codec;
    std::vector<Tensor> few(10, Tensor::zeros({3, 32, 32}));
    AutoencoderConfig cfg;
    CHECK_THROWS_AS(train_autoencoder(codec, few, cfg), TrainingError);
}

TEST_CASE("smoke training: quality, trend, scaling, zero-latent decode") {
    RasterGeometry geo;
    geo.height = geo.width = 32;
    geo.resolution = 1.0;
    std::vector<Tensor> canvases = sim_canvases(1100, geo);
    std::vector<Tensor> held(canvases.end() - 60, canvases.end());
    canvases.resize(canvases.size() - 60);

    ConvAutoencoder codec;
    AutoencoderConfig cfg;
    cfg.steps = 250;
    cfg.eval_every = 25;
    cfg.seed = 9;
    AutoencoderReport rep = train_autoencoder(codec, canvases, cfg);

    CHECK(codec.trained());
    CHECK(rep.final_loss < 0.25 * rep.initial_loss);

    // held-out loss decreases on average over the checkpoints
    REQUIRE(rep.eval_losses.size() == 10);
    double early = 0.0, late = 0.0;
    for (int i = 0; i < 5; ++i) {
        early += rep.eval_losses[static_cast<size_t>(i)];
        late += rep.eval_losses[static_cast<size_t>(i + 5)];
    }
    CHECK(late < early);

    double ps = 0.0, mae = 0.0;
    for (const auto& c : held) {
        Tensor r = codec.decode_canvas(codec.encode_canvas(c));
        ps += psnr(r, c);
        double m = 0.0;
        for (size_t j = 0; j < r.data().size(); ++j) m += std::abs(r.data()[j] - c.data()[j]);
        mae += m / static_cast<double>(r.numel());
    }
    ps /= static_cast<double>(held.size());
    mae /= static_cast<double>(held.size());
    CHECK(ps > 25.0);
    CHECK(mae < 0.05);

    // standardized latents: unit-ish std over a sample
    {
        std::vector<float> all;
        for (size_t i = 0; i < 32; ++i) {
            Tensor z = codec.encode_canvas(canvases[i * 7]);
            all.insert(all.end(), z.data().begin(), z.data().end());
        }
        double mean = 0.0;
        for (float v : all) mean += v;
        mean /= static_cast<double>(all.size());
        double var = 0.0;
        for (float v : all) var += (v - mean) * (v - mean);
        var /= static_cast<double>(all.size());
        CHECK(std::sqrt(var) == doctest::Approx(1.0).epsilon(0.25));
    }

    // all-zero latent decodes to a valid canvas
    Tensor dec = codec.decode_canvas(Tensor::zeros({4, 8, 8}));
    for (float v : dec.data()) {
        CHECK(std::isfinite(v));
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("training is deterministic under a fixed seed") {
    RasterGeometry geo;
    geo.height = geo.width = 32;
    geo.resolution = 1.0;
    std::vector<Tensor> canvases = sim_canvases(1000, geo);
    AutoencoderConfig cfg;
    cfg.steps = 30;
    cfg.eval_every = 30;
    cfg.seed = 5;

    ConvAutoencoder a, b;
    AutoencoderReport ra = train_autoencoder(a, canvases, cfg);
    AutoencoderReport rb = train_autoencoder(b, canvases, cfg);
    CHECK(ra.final_loss == rb.final_loss);
    CHECK(a.latent_scale() == b.latent_scale());
    for (const auto& name : a.params().names())
        CHECK(a.params().at(name).data() == b.params().at(name).data());
}

TEST_CASE("divergence raises a training error") {
    RasterGeometry geo;
    geo.height = geo.width = 32;
    geo.resolution = 1.0;
    std::vector<Tensor> canvases = sim_canvases(1000, geo);
    ConvAutoencoder codec;
    AutoencoderConfig cfg;
    cfg.steps = 60;
    cfg.lr = 1e18f;
    CHECK_THROWS_AS(train_autoencoder(codec, canvases, cfg), TrainingError);
}

TEST_SUITE_END();
