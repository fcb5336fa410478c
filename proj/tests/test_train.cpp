#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "odt/io.hpp"
#include "odt/train.hpp"

using namespace odt;

namespace {

// Direct per-window SSIM with the same 11x11 Gaussian, independent of the
// separable production implementation.
double ssim_reference(const std::vector<double>& a, const std::vector<double>& b, int width,
                      int height) {
    std::vector<double> g(11);
    double gs = 0.0;
    for (int i = 0; i < 11; ++i) {
        g[i] = std::exp(-(i - 5.0) * (i - 5.0) / (2.0 * 1.5 * 1.5));
        gs += g[i];
    }
    for (auto& v : g) v /= gs;
    const double c1 = 1e-4, c2 = 9e-4;
    double total = 0.0;
    int count = 0;
    for (int y = 0; y + 11 <= height; ++y)
        for (int x = 0; x + 11 <= width; ++x) {
            double ma = 0, mb = 0, maa = 0, mbb = 0, mab = 0;
            for (int i = 0; i < 11; ++i)
                for (int j = 0; j < 11; ++j) {
                    const double w = g[i] * g[j];
                    const double va = a[static_cast<std::size_t>(y + i) * width + x + j];
                    const double vb = b[static_cast<std::size_t>(y + i) * width + x + j];
                    ma += w * va;
                    mb += w * vb;
                    maa += w * va * va;
                    mbb += w * vb * vb;
                    mab += w * va * vb;
                }
            const double sa = maa - ma * ma, sb = mbb - mb * mb, sab = mab - ma * mb;
            total += (2 * ma * mb + c1) * (2 * sab + c2) / ((ma * ma + mb * mb + c1) * (sa + sb + c2));
            ++count;
        }
    return total / count;
}

ScanPair make_indexed_pair(int depth, int width, int delta) {
    ScanPair p;
    p.id = "idx";
    p.input = Tensor::zeros({2, depth, width});
    for (int c = 0; c < 2; ++c)
        for (int d = 0; d < depth; ++d)
            for (int w = 0; w < width; ++w)
                p.input->data[(static_cast<std::size_t>(c) * depth + d) * width + w] =
                    static_cast<float>(w);
    p.target = Tensor::zeros({1, depth, width * delta});
    for (int d = 0; d < depth; ++d)
        for (int w = 0; w < width * delta; ++w)
            p.target->data[static_cast<std::size_t>(d) * width * delta + w] = static_cast<float>(w);
    return p;
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.groups = 1;
    c.layers_per_group = 1;
    c.embed_dim = 4;
    c.delta = 2;
    c.ssm_state_dim = 2;
    c.ssm_expand = 2;
    c.attention_heads = 2;
    c.lefn_kernel = 3;
    return c;
}

std::vector<ScanPair> toy_train_set(int n, int depth, int width, int delta, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<ScanPair> out;
    for (int i = 0; i < n; ++i) {
        ScanPair p;
        p.id = "toy" + std::to_string(i);
        p.input = Tensor::zeros({2, depth, width});
        for (auto& v : p.input->data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
        p.target = Tensor::zeros({1, depth, width * delta});
        for (auto& v : p.target->data) v = static_cast<float>(0.3 * rng.normal());
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace

TEST_CASE("cosine schedule hits endpoints and decreases monotonically") {
    TrainConfig cfg;
    cfg.iterations = 400;
    cfg.lr_max = 2e-4;
    cfg.lr_min = 1e-6;
    CHECK(cosine_lr(0, cfg) == doctest::Approx(2e-4).epsilon(1e-15));
    CHECK(cosine_lr(400, cfg) == doctest::Approx(1e-6).epsilon(1e-15));
    CHECK(cosine_lr(200, cfg) == doctest::Approx((2e-4 + 1e-6) / 2).epsilon(1e-12));
    CHECK(cosine_lr(10000, cfg) == cfg.lr_min);  // clamps past T
    double prev = cosine_lr(0, cfg);
    for (int t = 1; t <= 400; ++t) {
        const double lr = cosine_lr(t, cfg);
        CHECK(lr <= prev);
        prev = lr;
    }
    CHECK_THROWS_AS(cosine_lr(-1, cfg), UsageError);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    auto w = Tensor::from_data({3}, {1.0f, -2.0f, 0.5f}, true);
    w->ensure_grad();
    TrainConfig cfg;
    Adam opt({w}, cfg);
    opt.step(0.1);
    CHECK(w->data[0] == 1.0f);
    CHECK(w->data[1] == -2.0f);
    CHECK(w->data[2] == 0.5f);
}

TEST_CASE("adam: first step moves by about lr in the gradient sign direction") {
    auto w = Tensor::from_data({2}, {0.0f, 0.0f}, true);
    w->ensure_grad();
    w->grad[0] = 3.0f;    // |g| >> eps
    w->grad[1] = -0.7f;
    TrainConfig cfg;
    Adam opt({w}, cfg);
    opt.step(1e-3);
    CHECK(w->data[0] == doctest::Approx(-1e-3).epsilon(1e-6));
    CHECK(w->data[1] == doctest::Approx(1e-3).epsilon(1e-6));
}

TEST_CASE("adam: 200 steps solve a quadratic to 1e-3") {
    auto w = Tensor::from_data({4}, {2.0f, -1.5f, 0.8f, -0.3f}, true);
    auto target = Tensor::from_data({4}, {-0.4f, 0.9f, -1.2f, 0.6f});
    TrainConfig cfg;
    Adam opt({w}, cfg);
    for (int t = 0; t < 200; ++t) {
        w->zero_grad();
        auto loss = mse_loss(w, target);
        backward(loss);
        opt.step(0.1);
    }
    for (int i = 0; i < 4; ++i)
        CHECK(std::abs(w->data[i] - target->data[i]) < 1e-3);
}

TEST_CASE("sample_patch: identity crop, alignment, determinism, errors") {
    const int D = 12, W = 6, delta = 2;
    auto pair = make_indexed_pair(D, W, delta);
    Rng rng(3);
    auto full = sample_patch(pair, D, W, delta, rng);
    for (std::size_t i = 0; i < pair.input->data.size(); ++i)
        CHECK(full.input->data[i] == pair.input->data[i]);
    for (std::size_t i = 0; i < pair.target->data.size(); ++i)
        CHECK(full.target->data[i] == pair.target->data[i]);

    for (int rep = 0; rep < 20; ++rep) {
        auto p = sample_patch(pair, 4, 3, delta, rng);
        CHECK(p.input->shape == std::vector<int>{2, 4, 3});
        CHECK(p.target->shape == std::vector<int>{1, 4, 6});
        // values encode global column indices: target starts at delta * input start
        const float w0 = p.input->data[0];
        CHECK(p.target->data[0] == doctest::Approx(delta * w0));
        for (int j = 0; j < 6; ++j) CHECK(p.target->data[j] == doctest::Approx(delta * w0 + j));
    }

    Rng r1(77), r2(77);
    auto a = sample_patch(pair, 4, 3, delta, r1);
    auto b = sample_patch(pair, 4, 3, delta, r2);
    CHECK(a.input->data == b.input->data);
    CHECK(a.target->data == b.target->data);

    Rng r3(1);
    CHECK_THROWS_AS(sample_patch(pair, D + 1, W, delta, r3), UsageError);
    CHECK_THROWS_AS(sample_patch(pair, D, W + 1, delta, r3), UsageError);
}

TEST_CASE("training is deterministic, logs the cosine schedule and writes artifacts") {
    const std::string dir = "tt_train_out";
    std::filesystem::remove_all(dir);
    auto train_set = toy_train_set(4, 24, 8, 2, 5);
    TrainConfig cfg;
    cfg.iterations = 30;
    cfg.batch = 2;
    cfg.patch_depth = 12;
    cfg.patch_width = 4;
    cfg.log_every = 5;
    cfg.seed = 9;

    AssanModel<float> m1(tiny_config(), 21);
    auto r1 = train_model(m1, train_set, cfg, dir, "run_a");
    AssanModel<float> m2(tiny_config(), 21);
    auto r2 = train_model(m2, train_set, cfg, dir, "run_b");

    REQUIRE(r1.log.size() == r2.log.size());
    for (std::size_t i = 0; i < r1.log.size(); ++i) {
        CHECK(r1.log[i].step == r2.log[i].step);
        CHECK(r1.log[i].loss == r2.log[i].loss);  // bitwise reproducible
        CHECK(r1.log[i].lr == cosine_lr(r1.log[i].step, cfg));
    }
    for (std::size_t i = 0; i < m1.params.items().size(); ++i) {
        const auto& ta = m1.params.items()[i].second;
        const auto& tb = m2.params.items()[i].second;
        for (std::size_t j = 0; j < ta->data.size(); ++j) CHECK(ta->data[j] == tb->data[j]);
    }
    CHECK(r1.log.front().step == 0);
    CHECK(r1.log.back().step == cfg.iterations - 1);
    for (double v : {r1.initial_smoothed, r1.final_smoothed, r1.best_probe_loss})
        CHECK(std::isfinite(v));
    CHECK(std::filesystem::exists(r1.final_path));
    CHECK(std::filesystem::exists(r1.best_path));
    CHECK(std::filesystem::exists(r1.csv_path));
    const std::string csv = read_file(r1.csv_path);
    CHECK(csv.rfind("step,lr,loss\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(r1.log.size()) + 1);

    // the saved final checkpoint reproduces the live model bit for bit
    auto reloaded = load_model<float>(r1.final_path);
    auto x = train_set[0].input;
    NoGradGuard ng;
    auto y0 = m1.forward(x);
    auto y1 = reloaded.forward(x);
    for (std::size_t i = 0; i < y0->data.size(); ++i) CHECK(y0->data[i] == y1->data[i]);
    std::filesystem::remove_all(dir);
}

TEST_CASE("non-finite loss aborts with a snapshot") {
    const std::string dir = "tt_train_nan";
    std::filesystem::remove_all(dir);
    auto train_set = toy_train_set(2, 16, 8, 2, 6);
    TrainConfig cfg;
    cfg.iterations = 5;
    cfg.batch = 1;
    cfg.patch_depth = 8;
    cfg.patch_width = 4;
    AssanModel<float> m(tiny_config(), 33);
    m.params.find("conv_in.weight")->data[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(train_model(m, train_set, cfg, dir, "bad"), NumericError);
    CHECK(std::filesystem::exists(std::filesystem::path(dir) / "bad.nan.assn"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("psnr values, symmetry and noise monotonicity") {
    std::vector<double> a(256, 0.5), b(256, 0.6);
    CHECK(std::isinf(psnr(a, a, 1.0)));
    CHECK(psnr(a, b, 1.0) == doctest::Approx(20.0).epsilon(1e-12));
    Rng rng(4);
    std::vector<double> img(256), n1(256), n2(256);
    for (std::size_t i = 0; i < img.size(); ++i) {
        img[i] = rng.uniform();
        const double e = rng.normal();
        n1[i] = img[i] + 0.01 * e;
        n2[i] = img[i] + 0.05 * e;
    }
    CHECK(psnr(img, n1) > psnr(img, n2));
    CHECK(psnr(img, n1) == psnr(n1, img));
    CHECK_THROWS_AS(psnr(a, std::vector<double>(10, 0.0), 1.0), UsageError);
    CHECK_THROWS_AS(psnr(a, b, 0.0), UsageError);
}

TEST_CASE("ssim matches the brute-force reference and basic properties") {
    const int W = 20, H = 16;
    Rng rng(8);
    std::vector<double> a(static_cast<std::size_t>(W) * H), b(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = rng.uniform();
        b[i] = std::min(1.0, std::max(0.0, a[i] + 0.1 * rng.normal()));
    }
    CHECK(ssim(a, a, W, H) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(ssim(a, b, W, H) == doctest::Approx(ssim_reference(a, b, W, H)).epsilon(1e-6));
    CHECK(ssim(a, b, W, H) == ssim(b, a, W, H));
    std::vector<double> inv(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) inv[i] = 1.0 - a[i];
    CHECK(ssim(a, inv, W, H) < 1.0);
    CHECK_THROWS_AS(ssim(std::vector<double>(100, 0.0), std::vector<double>(100, 0.0), 10, 10),
                    UsageError);
}

TEST_CASE("width upsampling: identity, constants and ramps") {
    FlowMap v;
    v.depth = 2;
    v.width = 4;
    v.values = {0, 1, 2, 3, 5, 5, 5, 5};
    CHECK(width_upsample(v, 1, InterpKind::kLinear).values == v.values);

    auto up = width_upsample(v, 2, InterpKind::kLinear);
    CHECK(up.width == 8);
    // linear ramp interpolates exactly; beyond the last sample it clamps
    const std::vector<double> want_row0 = {0, 0.5, 1, 1.5, 2, 2.5, 3, 3};
    for (int x = 0; x < 8; ++x) CHECK(up.at(0, x) == doctest::Approx(want_row0[x]).epsilon(1e-12));
    for (int x = 0; x < 8; ++x) CHECK(up.at(1, x) == doctest::Approx(5.0).epsilon(1e-12));

    auto nn = width_upsample(v, 2, InterpKind::kNearest);
    const std::vector<double> want_nn = {0, 1, 1, 2, 2, 3, 3, 3};
    for (int x = 0; x < 8; ++x) CHECK(nn.at(0, x) == doctest::Approx(want_nn[x]).epsilon(1e-12));
}

TEST_CASE("mip projection") {
    std::vector<FlowMap> vol(3);
    for (auto& s : vol) {
        s.depth = 4;
        s.width = 5;
        s.values.assign(20, 0.0);
    }
    auto z = mip_project(vol);
    CHECK(z.depth == 3);
    CHECK(z.width == 5);
    for (double v : z.values) CHECK(v == 0.0);

    vol[1].at(2, 3) = -0.7;  // magnitude wins regardless of sign
    auto m = mip_project(vol);
    for (int s = 0; s < 3; ++s)
        for (int w = 0; w < 5; ++w)
            CHECK(m.at(s, w) == ((s == 1 && w == 3) ? doctest::Approx(0.7) : doctest::Approx(0.0)));

    CHECK_THROWS_AS(mip_project({}), UsageError);
    vol[2].width = 4;
    vol[2].values.resize(16);
    CHECK_THROWS_AS(mip_project(vol), UsageError);
}

TEST_CASE("evaluate pins normalization, crop and the identity upper bound") {
    // hand-built scan with an all-bright magnitude plane so masking is inert
    const int D = 20, W = 16;
    EvalScan scan;
    scan.id = "manual";
    scan.input = Tensor::zeros({2, D, W / 2});
    scan.target.depth = D;
    scan.target.width = W;
    scan.target.values.resize(static_cast<std::size_t>(D) * W);
    Rng rng(12);
    for (auto& v : scan.target.values) v = rng.uniform(-2.0, 2.0);
    scan.dense_mag.depth = D;
    scan.dense_mag.width = W;
    scan.dense_mag.magnitude.assign(static_cast<std::size_t>(D) * W, 1.0);
    scan.dense_mag.phase.assign(static_cast<std::size_t>(D) * W, 0.0);

    EvalConfig cfg;
    cfg.crop_keep = 1.0;
    cfg.mask_k = -std::numeric_limits<double>::infinity();  // keep everything

    auto rep_id = evaluate(identity_reconstructor(), {scan}, cfg, "identity");
    REQUIRE(rep_id.per_scan.size() == 1);
    CHECK(std::isinf(rep_id.per_scan[0].psnr_i));
    CHECK(rep_id.per_scan[0].ssim_i == doctest::Approx(1.0).epsilon(1e-12));

    // a fixed perturbation must reproduce a hand-computed PSNR after the
    // documented normalization: divide by target peak, then (x + 1) / 2
    FlowMap pred = scan.target;
    for (auto& v : pred.values) v += 0.25;
    Reconstructor fixed = [&pred](const EvalScan&) { return pred; };
    auto rep = evaluate(fixed, {scan}, cfg, "fixed");
    double peak = 0.0;
    for (double v : scan.target.values) peak = std::max(peak, std::abs(v));
    const double err = 0.25 / peak * 0.5;
    const double want_psnr = 10.0 * std::log10(1.0 / (err * err));
    CHECK(rep.per_scan[0].psnr_i == doctest::Approx(want_psnr).epsilon(1e-9));
    CHECK(rep.per_scan[0].psnr_v == doctest::Approx(want_psnr).epsilon(1e-9));
    CHECK(rep.mean_psnr == doctest::Approx(want_psnr).epsilon(1e-9));
    CHECK(rep.std_psnr == doctest::Approx(0.0));

    // crop keeps the top rows: corrupt only the bottom 20% and crop it away
    FlowMap bottom = scan.target;
    for (int d = 16; d < D; ++d)
        for (int w = 0; w < W; ++w) bottom.at(d, w) += 10.0;
    Reconstructor bottom_fix = [&bottom](const EvalScan&) { return bottom; };
    EvalConfig crop_cfg = cfg;
    crop_cfg.crop_keep = 0.8;
    auto rep_crop = evaluate(bottom_fix, {scan}, crop_cfg, "crop");
    CHECK(std::isinf(rep_crop.per_scan[0].psnr_i));
    auto rep_nocrop = evaluate(bottom_fix, {scan}, cfg, "nocrop");
    CHECK(std::isfinite(rep_nocrop.per_scan[0].psnr_i));

    // json report carries the crop spec and aggregates
    auto j = rep_crop.to_json();
    CHECK(j["crop_keep"] == doctest::Approx(0.8));
    CHECK(j["scans"].size() == 1);
}

TEST_CASE("dataset roundtrip through loaders, baselines and a fresh model") {
    const std::string dir = "tt_eval_ds";
    std::filesystem::remove_all(dir);
    DatasetConfig dc;
    dc.n_scans = 4;
    dc.delta = 2;
    dc.seed = 77;
    dc.train_fraction = 0.5;
    dc.out_dir = dir;
    dc.sampler.depth = 48;
    dc.sampler.width = 64;
    dc.sampler.max_radius_w = 12.0;
    dc.sampler.noise_sigma = 0.0;
    make_dataset(dc);
    const auto idx = load_dataset_index(dir);

    auto train_pairs = load_pairs(idx, "train");
    auto eval_scans = load_eval_scans(idx, "test");
    REQUIRE(train_pairs.size() == 2);
    REQUIRE(eval_scans.size() == 2);
    // depth of the reconstruction is the analytic half of the 128-point FFT
    CHECK(train_pairs[0].input->shape == std::vector<int>{2, 64, 32});
    CHECK(train_pairs[0].target->shape == std::vector<int>{1, 64, 64});

    EvalConfig ecfg;
    auto rep_id = evaluate(identity_reconstructor(), eval_scans, ecfg, "identity");
    auto rep_lin = evaluate(baseline_reconstructor(InterpKind::kLinear), eval_scans, ecfg, "linear");
    auto rep_nn = evaluate(baseline_reconstructor(InterpKind::kNearest), eval_scans, ecfg, "nearest");
    CHECK(std::isinf(rep_id.mean_psnr));
    CHECK(rep_id.mean_ssim == doctest::Approx(1.0).epsilon(1e-12));
    for (const auto& r : {rep_lin, rep_nn}) {
        for (const auto& m : r.per_scan) {
            CHECK(std::isfinite(m.psnr_i));
            CHECK(m.ssim_i > -1.0);
            CHECK(m.ssim_i <= 1.0);
        }
    }

    AssanModel<float> fresh(tiny_config(), 5);
    auto rep_model = evaluate(model_reconstructor(fresh), eval_scans, ecfg, "untrained");
    for (const auto& m : rep_model.per_scan) CHECK(std::isfinite(m.psnr_i));
    std::filesystem::remove_all(dir);
}
