// Acceptance gate: one PASS/FAIL line per criterion, tolerances pinned below.
//
//   C1 production scan kernel vs sequential oracle
//   C2 finite-difference gradient suite over every block
//   C3 noise-free signal-chain closure
//   C4 exact structural invariants (shuffle bijection, FFT, file round trips)
//   C5 desk-scale learning smoke test
//   C6 trained model vs interpolation baselines (median of three seeds)
//   C7 ablation ordering (gating, LEFN) on the median seed
//   C8 byte-exact determinism of criteria 5-7
//
// Usage: odt_acceptance [--criterion N] [--work-dir PATH]
//
// Heavy artifacts (datasets, checkpoints, reports) are cached under the work
// directory keyed by name, so single-criterion runs and reruns reuse earlier
// training; criterion 8 always recomputes into work/rerun and compares bytes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "odt/common.hpp"
#include "odt/gradcheck.hpp"
#include "odt/io.hpp"
#include "odt/model.hpp"
#include "odt/ops.hpp"
#include "odt/phantom.hpp"
#include "odt/signal.hpp"
#include "odt/tensor.hpp"
#include "odt/train.hpp"

using namespace odt;
namespace fs = std::filesystem;

namespace {

// --- pinned tolerances -------------------------------------------------------

constexpr double kScanOracleTol = 1e-10;  // C1: |fused - sequential| (64-bit)
constexpr double kGradRelTol = 1e-3;      // C2: finite differences, h = 1e-5
constexpr double kClosureTol = 1e-3;      // C3: rad, inside and outside vessels
constexpr double kFftRoundTripTol = 1e-6; // C4: FFT forward->inverse
constexpr double kSmokeLossRatio = 0.2;   // C5: final smoothed / initial smoothed
constexpr double kPsnrMarginD4 = 1.0;     // C6: dB over linear baseline, delta=4
constexpr double kPsnrMarginD2 = 0.5;     // C6: dB over linear baseline, delta=2
constexpr double kAblationBand = 0.05;    // C7: |margin| below this is inconclusive

// --- shared experiment protocol ----------------------------------------------

constexpr int kScans = 40;  // 32 train / 8 test at the 0.8 default split
constexpr std::uint64_t kDataSeed = 100;
constexpr int kSceneDepth = 128;
constexpr int kSceneWidth = 256;
constexpr double kNoiseSigma = 0.01;
const std::vector<std::uint64_t> kSeeds = {0, 1, 2};

struct Line {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
    va_list ap;
    va_start(ap, f);
    char buf[512];
    std::vsnprintf(buf, sizeof(buf), f, ap);
    va_end(ap);
    return buf;
}

// ==============================================================================
// C1: fused bidirectional scan vs the plain sequential recurrence.

ScanDir<double> random_scan_dir(int C, int N, Rng& rng) {
    auto filled = [&](std::vector<int> shape, auto gen) {
        auto t = TensorD::zeros(std::move(shape));
        for (auto& v : t->data) v = gen();
        return t;
    };
    ScanDir<double> d;
    d.a_log = filled({C, N}, [&] { return rng.uniform(std::log(0.5), std::log(8.0)); });
    d.delta_w = filled({C, C}, [&] { return rng.normal() * 0.2; });
    d.delta_b = filled({C}, [&] { return rng.uniform(-2.0, 1.0); });
    d.b_w = filled({N, C}, [&] { return rng.normal() * 0.3; });
    d.c_w = filled({N, C}, [&] { return rng.normal() * 0.3; });
    d.skip = filled({C}, [&] { return rng.uniform(-1.0, 1.0); });
    return d;
}

// Runs the sequential recurrence over column w of [T, W, C] data, optionally
// with the scan direction reversed; output keeps the original t order.
std::vector<double> oracle_column(const TensorPtrD& x, int w, const SsmSeqParams& p,
                                  bool reverse) {
    const int T = x->shape[0], W = x->shape[1], C = x->shape[2];
    std::vector<double> col(static_cast<std::size_t>(T) * C);
    for (int t = 0; t < T; ++t) {
        const int src = reverse ? T - 1 - t : t;
        for (int c = 0; c < C; ++c)
            col[static_cast<std::size_t>(t) * C + c] =
                x->data[(static_cast<std::size_t>(src) * W + w) * C + c];
    }
    const std::vector<double> y = selective_scan_sequential(col, T, p);
    std::vector<double> out(col.size());
    for (int t = 0; t < T; ++t) {
        const int dst = reverse ? T - 1 - t : t;
        for (int c = 0; c < C; ++c)
            out[static_cast<std::size_t>(dst) * C + c] = y[static_cast<std::size_t>(t) * C + c];
    }
    return out;
}

Line criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(20260101);
    double worst = 0.0;
    const int cases = 100;
    for (int i = 0; i < cases; ++i) {
        const int T = static_cast<int>(rng.uniform_int(1, 512));
        const int C = static_cast<int>(rng.uniform_int(1, 16));
        const int N = static_cast<int>(rng.uniform_int(1, 16));
        const int W = static_cast<int>(rng.uniform_int(1, 2));
        const ScanDir<double> fwd = random_scan_dir(C, N, rng);
        const ScanDir<double> bwd = random_scan_dir(C, N, rng);
        auto x = TensorD::zeros({T, W, C});
        for (auto& v : x->data) v = rng.normal();

        NoGradGuard ng;
        const auto y = a_ss_scan(x, fwd, bwd);
        const SsmSeqParams pf = scan_dir_to_seq(fwd);
        const SsmSeqParams pb = scan_dir_to_seq(bwd);
        for (int w = 0; w < W; ++w) {
            const std::vector<double> yf = oracle_column(x, w, pf, false);
            const std::vector<double> yb = oracle_column(x, w, pb, true);
            for (int t = 0; t < T; ++t)
                for (int c = 0; c < C; ++c) {
                    const double expect = yf[static_cast<std::size_t>(t) * C + c] +
                                          yb[static_cast<std::size_t>(t) * C + c];
                    const double got = y->data[(static_cast<std::size_t>(t) * W + w) * C + c];
                    worst = std::max(worst, std::abs(got - expect));
                }
        }
    }
    return {worst <= kScanOracleTol,
            fmt("max abs err %.3g over %d cases (tol %.0e), %.1fs", worst, cases, kScanOracleTol,
                seconds_since(t0))};
}

// ==============================================================================
// C2: gradient suite. Each item rebuilds its loss from current parameter data.

template <class S>
void randomize_params(AssanModel<S>& m, Rng& rng) {
    for (const auto& [name, t] : m.params.items())
        for (auto& v : t->data) v = static_cast<S>(rng.normal() * 0.2);
}

std::vector<TensorPtrD> filter_params(AssanModel<double>& m, const std::string& needle) {
    std::vector<TensorPtrD> out;
    for (const auto& [name, t] : m.params.items())
        if (name.find(needle) != std::string::npos) out.push_back(t);
    return out;
}

TensorPtrD randn_d(std::vector<int> shape, Rng& rng, bool requires_grad = false) {
    auto t = TensorD::zeros(std::move(shape), requires_grad);
    for (auto& v : t->data) v = rng.normal();
    return t;
}

Line criterion2() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(20260202);
    std::vector<std::pair<std::string, double>> items;

    {
        auto x = randn_d({3, 4, 6}, rng, true);
        auto w = randn_d({5, 6}, rng, true);
        auto b = randn_d({5}, rng, true);
        auto target = randn_d({3, 4, 5}, rng);
        auto res = gradient_check([&] { return mse_loss(linear(x, w, b), target); }, {x, w, b},
                                  rng);
        items.emplace_back("linear", res.max_rel_err);
    }
    {
        auto x = randn_d({6, 5, 4}, rng, true);
        auto kd = randn_d({4, 1, 3}, rng, true);
        auto kw = randn_d({4, 1, 3}, rng, true);
        auto target = randn_d({6, 5, 4}, rng);
        auto res = gradient_check(
            [&] {
                auto y = conv1d_axis(x, kd, ConvAxis::kDepth, true);
                return mse_loss(conv1d_axis(y, kw, ConvAxis::kWidth, true), target);
            },
            {x, kd, kw}, rng);
        items.emplace_back("conv1d both axes", res.max_rel_err);
    }
    {
        auto x = randn_d({4, 5, 6}, rng, true);
        auto g = randn_d({6}, rng, true);
        auto b = randn_d({6}, rng, true);
        auto target = randn_d({4, 5, 6}, rng);
        auto res = gradient_check(
            [&] { return mse_loss(layer_norm(x, g, b, 1e-5), target); }, {x, g, b}, rng);
        items.emplace_back("layer_norm", res.max_rel_err);
    }
    {
        auto x = randn_d({5, 7}, rng, true);
        auto target = randn_d({5, 7}, rng);
        auto res = gradient_check(
            [&] {
                auto y = add(add(silu(x), gelu(x)), activation(x, Act::kSigmoid));
                return mse_loss(y, target);
            },
            {x}, rng);
        items.emplace_back("activations", res.max_rel_err);
    }
    {
        auto x = randn_d({3, 4, 7}, rng, true);
        auto target = randn_d({3, 4, 7}, rng);
        auto res = gradient_check([&] { return mse_loss(softmax_lastdim(x), target); }, {x}, rng);
        items.emplace_back("softmax", res.max_rel_err);
    }
    {
        const int C = 3, N = 2;
        ScanDir<double> fwd = random_scan_dir(C, N, rng);
        ScanDir<double> bwd = random_scan_dir(C, N, rng);
        std::vector<TensorPtrD> params;
        for (auto* dir : {&fwd, &bwd})
            for (auto& t : {dir->a_log, dir->delta_w, dir->delta_b, dir->b_w, dir->c_w, dir->skip}) {
                t->requires_grad = true;
                params.push_back(t);
            }
        auto x = randn_d({10, 2, C}, rng, true);
        params.push_back(x);
        auto target = randn_d({10, 2, C}, rng);
        auto res = gradient_check([&] { return mse_loss(a_ss_scan(x, fwd, bwd), target); },
                                  params, rng);
        items.emplace_back("a_ss_scan", res.max_rel_err);
    }
    {
        const int C = 8, heads = 2;
        auto x = randn_d({3, 5, C}, rng, true);
        auto wq = randn_d({C, C}, rng, true), bq = randn_d({C}, rng, true);
        auto wk = randn_d({C, C}, rng, true), bk = randn_d({C}, rng, true);
        auto wv = randn_d({C, C}, rng, true), bv = randn_d({C}, rng, true);
        auto target = randn_d({3, 5, C}, rng);
        auto res = gradient_check(
            [&] {
                auto y = row_attention(linear(x, wq, bq), linear(x, wk, bk), linear(x, wv, bv),
                                       heads);
                return mse_loss(y, target);
            },
            {x, wq, bq, wk, bk, wv, bv}, rng);
        items.emplace_back("b_sa attention", res.max_rel_err);
    }

    // block items through the production wiring: one tiny double model,
    // randomized so zero-initialized projections do not mute the gradients
    ModelConfig tiny;
    tiny.groups = 1;
    tiny.layers_per_group = 1;
    tiny.embed_dim = 4;
    tiny.delta = 2;
    tiny.ssm_state_dim = 2;
    tiny.ssm_expand = 2;
    tiny.dconv_kernel = 3;
    tiny.attention_heads = 2;
    tiny.lefn_kernel = 3;
    tiny.lefn_expand = 2;
    AssanModel<double> model(tiny, 1);
    randomize_params(model, rng);
    auto x = randn_d({2, 8, 6}, rng, true);
    auto target = randn_d({1, 8, 12}, rng);
    const auto model_loss = [&] { return mse_loss(model.forward(x), target); };
    {
        auto res = gradient_check(model_loss, filter_params(model, ".bga."), rng);
        items.emplace_back("b_ga block", res.max_rel_err);
    }
    {
        auto res = gradient_check(model_loss, filter_params(model, ".ffn."), rng);
        items.emplace_back("lefn", res.max_rel_err);
    }
    {
        std::vector<TensorPtrD> all;
        for (const auto& [name, t] : model.params.items()) all.push_back(t);
        all.push_back(x);
        auto res = gradient_check(model_loss, all, rng);
        items.emplace_back("full tiny model + L2", res.max_rel_err);
    }

    double worst = 0.0;
    std::string worst_name;
    for (const auto& [name, err] : items)
        if (err >= worst) {
            worst = err;
            worst_name = name;
        }
    return {worst < kGradRelTol,
            fmt("%zu items, worst rel err %.3g (%s, tol %.0e), %.1fs", items.size(), worst,
                worst_name.c_str(), kGradRelTol, seconds_since(t0))};
}

// ==============================================================================
// C3: classical chain inverts the noise-free forward model.

Line criterion3() {
    const auto t0 = std::chrono::steady_clock::now();
    SceneSamplerConfig sampler;
    sampler.depth = kSceneDepth;
    sampler.width = kSceneWidth;
    sampler.noise_sigma = 0.0;
    double inside = 0.0, outside = 0.0;
    const int scenes = 20;
    for (int i = 0; i < scenes; ++i) {
        const PhantomScene scene = sample_scene(sampler, derive_seed(2026, i));
        const FlowMap truth = render_flow_field(scene);
        const ClassicalResult res = classical_dense_pipeline(synthesize_raw_bscan(scene));
        if (res.v.depth != truth.depth || res.v.width != truth.width)
            return {false, "recovered flow shape mismatch"};
        // the last output column replicates its neighbor; skip it
        for (int d = 0; d < truth.depth; ++d)
            for (int w = 0; w + 1 < truth.width; ++w) {
                const double t = truth.at(d, w);
                const double r = res.v.at(d, w);
                if (t != 0.0)
                    inside = std::max(inside, std::abs(r - t));
                else
                    outside = std::max(outside, std::abs(r));
            }
    }
    return {inside < kClosureTol && outside < kClosureTol,
            fmt("%d scenes, max err inside %.3g / outside %.3g rad (tol %.0e), %.1fs", scenes,
                inside, outside, kClosureTol, seconds_since(t0))};
}

// ==============================================================================
// C4: exact structural invariants.

bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

Line criterion4() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(20260404);
    std::vector<std::string> fails;

    // pixel shuffle is a bijection: unshuffle(shuffle(x)) == x bit for bit
    for (int delta : {2, 3}) {
        auto x = Tensor::zeros({5, 4, 6 * delta});
        for (auto& v : x->data) v = static_cast<float>(rng.normal());
        NoGradGuard ng;
        const auto round = pixel_unshuffle_width(pixel_shuffle_width(x, delta), delta);
        if (round->shape != x->shape || !bitwise_equal(round->data, x->data))
            fails.push_back("pixel shuffle bijection (delta " + std::to_string(delta) + ")");
        auto mult_a = x->data, mult_b = pixel_shuffle_width(x, delta)->data;
        std::sort(mult_a.begin(), mult_a.end());
        std::sort(mult_b.begin(), mult_b.end());
        if (mult_a != mult_b)
            fails.push_back("pixel shuffle permutation (delta " + std::to_string(delta) + ")");
    }

    // FFT round trip
    {
        std::vector<std::complex<double>> a(1024);
        for (auto& v : a) v = {rng.normal(), rng.normal()};
        const auto orig = a;
        fft_radix2(a, false);
        fft_radix2(a, true);
        double err = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) err = std::max(err, std::abs(a[i] - orig[i]));
        if (err >= kFftRoundTripTol) fails.push_back(fmt("fft round trip err %.3g", err));
    }

    const fs::path tmp = fs::temp_directory_path() / "odt_acceptance_c4";
    fs::create_directories(tmp);

    // ODTR round trips are bit-exact and rewrites are byte-identical
    {
        RawBScan raw;
        raw.k_freq = 64;
        raw.width = 32;
        raw.delta = 2;
        raw.scan_id = "c4";
        raw.data.resize(static_cast<std::size_t>(raw.k_freq) * raw.width);
        for (auto& v : raw.data) v = {rng.normal(), rng.normal()};
        const OdtrArray arr = raw_to_odtr(raw);
        const std::string p = (tmp / "raw.odtr").string();
        odtr_write(p, arr);
        const OdtrArray back = odtr_read(p);
        if (back.dims != arr.dims || !bitwise_equal(back.data, arr.data))
            fails.push_back("raw ODTR round trip");
        const std::string bytes1 = read_file(p);
        odtr_write(p, back);
        if (read_file(p) != bytes1) fails.push_back("ODTR rewrite bytes");

        FlowMap flow;
        flow.depth = 48;
        flow.width = 64;
        flow.values.resize(static_cast<std::size_t>(flow.depth) * flow.width);
        for (auto& v : flow.values) v = rng.normal();
        const OdtrArray farr = flow_to_odtr(flow);
        const std::string fp = (tmp / "flow.odtr").string();
        odtr_write(fp, farr);
        if (!bitwise_equal(odtr_read(fp).data, farr.data)) fails.push_back("flow ODTR round trip");
    }

    // checkpoint round trip: params bitwise equal, reloaded forward identical
    {
        ModelConfig tiny;
        tiny.groups = 1;
        tiny.layers_per_group = 1;
        tiny.embed_dim = 8;
        tiny.delta = 2;
        tiny.ssm_state_dim = 2;
        tiny.attention_heads = 2;
        tiny.lefn_kernel = 3;
        AssanModel<float> m(tiny, 5);
        Rng prng(99);
        for (const auto& [name, t] : m.params.items())
            for (auto& v : t->data) v = static_cast<float>(prng.normal() * 0.2);
        const std::string cp = (tmp / "model.assn").string();
        save_model(cp, m, {});
        AssanModel<float> re = load_model<float>(cp);
        for (const auto& [name, t] : m.params.items()) {
            const auto other = re.params.find(name);
            if (!other || !bitwise_equal(other->data, t->data)) {
                fails.push_back("checkpoint tensor " + name);
                break;
            }
        }
        auto x = Tensor::zeros({2, 12, 10});
        for (auto& v : x->data) v = static_cast<float>(prng.normal());
        NoGradGuard ng;
        if (!bitwise_equal(m.forward(x)->data, re.forward(x)->data))
            fails.push_back("reloaded forward output");
    }

    if (!fails.empty()) return {false, "failed: " + fails.front()};
    return {true, fmt("shuffle bijection, FFT, ODTR and checkpoint round trips, %.1fs",
                      seconds_since(t0))};
}

// ==============================================================================
// Shared training/evaluation driver for C5-C8.

struct RunSpec {
    std::string name;
    int delta = 2;
    std::uint64_t seed = 0;
    bool gate_enabled = true;
    FfnKind ffn_kind = FfnKind::kLefn;
};

struct RunInfo {
    double initial_smoothed = 0.0;
    double final_smoothed = 0.0;
    int best_step = 0;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
};

struct Ctx {
    fs::path work;
    std::map<int, DatasetIndex> datasets;
    std::map<int, std::vector<ScanPair>> train_pairs;
    std::map<int, std::vector<EvalScan>> eval_scans;
    std::map<int, MetricReport> baselines;
    std::map<std::string, RunInfo> runs;
    int median_d4_seed = -1;
};

fs::path dataset_path(const Ctx& c, int delta) {
    return c.work / ("data_d" + std::to_string(delta));
}

DatasetIndex generate_dataset(int delta, const fs::path& dir) {
    DatasetConfig cfg;
    cfg.n_scans = kScans;
    cfg.delta = delta;
    cfg.seed = kDataSeed;
    cfg.out_dir = dir.string();
    cfg.sampler.depth = kSceneDepth;
    cfg.sampler.width = kSceneWidth;
    cfg.sampler.noise_sigma = kNoiseSigma;
    return make_dataset(cfg);
}

const DatasetIndex& ensure_dataset(Ctx& c, int delta) {
    auto it = c.datasets.find(delta);
    if (it != c.datasets.end()) return it->second;
    const fs::path dir = dataset_path(c, delta);
    DatasetIndex index;
    if (fs::exists(dir / "manifest.json"))
        index = load_dataset_index(dir.string());
    else
        index = generate_dataset(delta, dir);
    return c.datasets.emplace(delta, std::move(index)).first->second;
}

const std::vector<ScanPair>& ensure_train_pairs(Ctx& c, int delta) {
    auto it = c.train_pairs.find(delta);
    if (it != c.train_pairs.end()) return it->second;
    return c.train_pairs.emplace(delta, load_pairs(ensure_dataset(c, delta), "train"))
        .first->second;
}

const std::vector<EvalScan>& ensure_eval_scans(Ctx& c, int delta) {
    auto it = c.eval_scans.find(delta);
    if (it != c.eval_scans.end()) return it->second;
    return c.eval_scans.emplace(delta, load_eval_scans(ensure_dataset(c, delta), "test"))
        .first->second;
}

const MetricReport& ensure_baseline(Ctx& c, int delta) {
    auto it = c.baselines.find(delta);
    if (it != c.baselines.end()) return it->second;
    const MetricReport rep = evaluate(baseline_reconstructor(InterpKind::kLinear),
                                      ensure_eval_scans(c, delta), {}, "baseline_linear");
    write_json_file((c.work / ("baseline_d" + std::to_string(delta) + ".json")).string(),
                    rep.to_json());
    return c.baselines.emplace(delta, rep).first->second;
}

ModelConfig spec_model_config(const RunSpec& spec) {
    ModelConfig mc;  // desk defaults: G=2, L=2, C=16
    mc.delta = spec.delta;
    mc.gate_enabled = spec.gate_enabled;
    mc.ffn_kind = spec.ffn_kind;
    return mc;
}

// Trains (or reloads) one run and its evaluation report under root/<name>.
RunInfo execute_run(Ctx& c, const RunSpec& spec, const fs::path& root, bool use_cache) {
    const fs::path dir = root / spec.name;
    const fs::path result_path = dir / "result.json";
    const bool complete = fs::exists(result_path) && fs::exists(dir / "m.best.assn") &&
                          fs::exists(dir / "m.final.assn") && fs::exists(dir / "m.loss.csv") &&
                          fs::exists(dir / "report.json");
    if (use_cache && complete) {
        const nlohmann::json j = read_json_file(result_path.string());
        return {j.at("initial_smoothed").get<double>(), j.at("final_smoothed").get<double>(),
                j.at("best_step").get<int>(), j.at("mean_psnr").get<double>(),
                j.at("mean_ssim").get<double>()};
    }
    fs::remove_all(dir);
    fs::create_directories(dir);
    AssanModel<float> model(spec_model_config(spec), spec.seed);
    TrainConfig tc;  // desk defaults: 2000 iterations, batch 4, 64x16 patches
    tc.seed = spec.seed;
    const TrainResult tr =
        train_model(model, ensure_train_pairs(c, spec.delta), tc, dir.string(), "m");

    const AssanModel<float> best = load_model<float>(tr.best_path);
    const MetricReport rep = evaluate(model_reconstructor(best), ensure_eval_scans(c, spec.delta),
                                      {}, "model");
    write_json_file((dir / "report.json").string(), rep.to_json());

    RunInfo info{tr.initial_smoothed, tr.final_smoothed, tr.best_step, rep.mean_psnr,
                 rep.mean_ssim};
    write_json_file(result_path.string(), {{"initial_smoothed", info.initial_smoothed},
                                           {"final_smoothed", info.final_smoothed},
                                           {"best_step", info.best_step},
                                           {"mean_psnr", info.mean_psnr},
                                           {"mean_ssim", info.mean_ssim}});
    return info;
}

const RunInfo& ensure_run(Ctx& c, const RunSpec& spec) {
    auto it = c.runs.find(spec.name);
    if (it != c.runs.end()) return it->second;
    std::printf("  [run %s]\n", spec.name.c_str());
    std::fflush(stdout);
    RunInfo info = execute_run(c, spec, c.work / "runs", true);
    return c.runs.emplace(spec.name, info).first->second;
}

std::vector<RunSpec> seed_sweep(int delta) {
    std::vector<RunSpec> out;
    for (std::uint64_t s : kSeeds)
        out.push_back({"d" + std::to_string(delta) + "_s" + std::to_string(s), delta, s});
    return out;
}

// Index of the median element (by value) among exactly three.
int median_index(const std::vector<double>& v) {
    const double lo = std::min({v[0], v[1], v[2]});
    const double hi = std::max({v[0], v[1], v[2]});
    for (int i = 0; i < 3; ++i)
        if (v[static_cast<std::size_t>(i)] >= lo && v[static_cast<std::size_t>(i)] <= hi &&
            v[static_cast<std::size_t>(i)] != lo && v[static_cast<std::size_t>(i)] != hi)
            return i;
    // two or more equal values: the middle of the sorted order is that value
    std::vector<double> s = v;
    std::sort(s.begin(), s.end());
    for (int i = 0; i < 3; ++i)
        if (v[static_cast<std::size_t>(i)] == s[1]) return i;
    return 0;
}

int ensure_median_d4_seed(Ctx& c) {
    if (c.median_d4_seed >= 0) return c.median_d4_seed;
    const MetricReport& base = ensure_baseline(c, 4);
    std::vector<double> margins;
    for (const RunSpec& spec : seed_sweep(4))
        margins.push_back(ensure_run(c, spec).mean_psnr - base.mean_psnr);
    c.median_d4_seed = static_cast<int>(kSeeds[static_cast<std::size_t>(median_index(margins))]);
    return c.median_d4_seed;
}

// ==============================================================================
// C5: desk-scale learning smoke test (delta = 2, seed 0).

Line criterion5(Ctx& c) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
        const RunInfo info = ensure_run(c, seed_sweep(2)[0]);
        const double ratio = info.final_smoothed / info.initial_smoothed;
        return {ratio < kSmokeLossRatio && std::isfinite(ratio),
                fmt("smoothed loss %.5f -> %.5f, ratio %.3f (< %.2f), %.0fs",
                    info.initial_smoothed, info.final_smoothed, ratio, kSmokeLossRatio,
                    seconds_since(t0))};
    } catch (const NumericError& e) {
        return {false, fmt("numeric failure during training: %s", e.what())};
    }
}

// ==============================================================================
// C6: trained model vs linear interpolation baseline, median of three seeds.

Line criterion6(Ctx& c) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string detail;
    bool pass = true;
    for (const auto& [delta, need_psnr] :
         std::vector<std::pair<int, double>>{{4, kPsnrMarginD4}, {2, kPsnrMarginD2}}) {
        const MetricReport& base = ensure_baseline(c, delta);
        std::vector<double> psnr_margin, ssim_margin;
        for (const RunSpec& spec : seed_sweep(delta)) {
            const RunInfo& info = ensure_run(c, spec);
            psnr_margin.push_back(info.mean_psnr - base.mean_psnr);
            ssim_margin.push_back(info.mean_ssim - base.mean_ssim);
        }
        std::vector<double> ps = psnr_margin, ss = ssim_margin;
        std::sort(ps.begin(), ps.end());
        std::sort(ss.begin(), ss.end());
        const double med_psnr = ps[1], med_ssim = ss[1];
        const bool ok = med_psnr >= need_psnr && med_ssim > 0.0;
        pass = pass && ok;
        detail += fmt("d%d: median +%.2f dB (need %.1f), median SSIM %+.4f (need > 0); ", delta,
                      med_psnr, need_psnr, med_ssim);
    }
    detail += fmt("%.0fs", seconds_since(t0));
    return {pass, detail};
}

// ==============================================================================
// C7: ablation ordering on the median delta=4 seed.

Line criterion7(Ctx& c) {
    const auto t0 = std::chrono::steady_clock::now();
    const int seed = ensure_median_d4_seed(c);
    const RunInfo& full =
        ensure_run(c, {"d4_s" + std::to_string(seed), 4, static_cast<std::uint64_t>(seed)});
    RunSpec gate_off{"d4_gateoff_s" + std::to_string(seed), 4, static_cast<std::uint64_t>(seed)};
    gate_off.gate_enabled = false;
    RunSpec mlp{"d4_mlp_s" + std::to_string(seed), 4, static_cast<std::uint64_t>(seed)};
    mlp.ffn_kind = FfnKind::kMlp;
    const double gate_margin = full.mean_psnr - ensure_run(c, gate_off).mean_psnr;
    const double lefn_margin = full.mean_psnr - ensure_run(c, mlp).mean_psnr;

    auto verdict = [](double m) {
        return std::abs(m) <= kAblationBand ? std::string("inconclusive")
                                            : (m > 0 ? std::string("ordered") : std::string("violated"));
    };
    const bool pass = gate_margin >= -kAblationBand && lefn_margin >= -kAblationBand;
    return {pass, fmt("seed %d: gate %+.3f dB (%s), lefn %+.3f dB (%s), band %.2f, %.0fs", seed,
                      gate_margin, verdict(gate_margin).c_str(), lefn_margin,
                      verdict(lefn_margin).c_str(), kAblationBand, seconds_since(t0))};
}

// ==============================================================================
// C8: determinism. Regenerate the datasets and every C5-C7 run from scratch
// and require byte-identical loss curves, checkpoints and reports.

std::vector<RunSpec> all_specs(Ctx& c) {
    std::vector<RunSpec> specs = seed_sweep(2);
    for (const RunSpec& s : seed_sweep(4)) specs.push_back(s);
    const int seed = ensure_median_d4_seed(c);
    RunSpec gate_off{"d4_gateoff_s" + std::to_string(seed), 4, static_cast<std::uint64_t>(seed)};
    gate_off.gate_enabled = false;
    specs.push_back(gate_off);
    RunSpec mlp{"d4_mlp_s" + std::to_string(seed), 4, static_cast<std::uint64_t>(seed)};
    mlp.ffn_kind = FfnKind::kMlp;
    specs.push_back(mlp);
    return specs;
}

Line criterion8(Ctx& c) {
    const auto t0 = std::chrono::steady_clock::now();
    // reference artifacts (cached if criteria 5-7 already ran)
    for (int delta : {2, 4}) ensure_baseline(c, delta);
    const std::vector<RunSpec> specs = all_specs(c);
    for (const RunSpec& spec : specs) ensure_run(c, spec);

    const fs::path rr = c.work / "rerun";
    fs::remove_all(rr);
    fs::create_directories(rr);
    std::vector<std::string> mismatches;
    int compared = 0;
    auto compare = [&](const fs::path& a, const fs::path& b, const std::string& label) {
        ++compared;
        if (!fs::exists(a) || !fs::exists(b) || read_file(a.string()) != read_file(b.string()))
            mismatches.push_back(label);
    };

    Ctx fresh;  // independent caches on the regenerated artifacts
    fresh.work = rr;
    for (int delta : {2, 4}) {
        const fs::path dir = dataset_path(fresh, delta);
        generate_dataset(delta, dir);
        const fs::path ref = dataset_path(c, delta);
        std::vector<std::string> names;
        for (const auto& e : fs::directory_iterator(ref)) names.push_back(e.path().filename().string());
        std::sort(names.begin(), names.end());
        for (const std::string& n : names)
            compare(ref / n, dir / n, "dataset d" + std::to_string(delta) + "/" + n);
    }

    for (const RunSpec& spec : specs) {
        std::printf("  [rerun %s]\n", spec.name.c_str());
        std::fflush(stdout);
        execute_run(fresh, spec, rr / "runs", false);
        const fs::path ref = c.work / "runs" / spec.name;
        const fs::path got = rr / "runs" / spec.name;
        for (const char* f : {"m.loss.csv", "m.final.assn", "m.best.assn", "report.json"})
            compare(ref / f, got / f, spec.name + "/" + f);
    }
    for (int delta : {2, 4}) {
        ensure_baseline(fresh, delta);
        const std::string f = "baseline_d" + std::to_string(delta) + ".json";
        compare(c.work / f, rr / f, f);
    }

    if (!mismatches.empty())
        return {false, fmt("%zu of %d artifacts differ, first: %s", mismatches.size(), compared,
                           mismatches.front().c_str())};
    return {true, fmt("%d artifacts byte-identical across full rerun, %.0fs", compared,
                      seconds_since(t0))};
}

}  // namespace

int main(int argc, char** argv) {
    int only = 0;
    fs::path work = "acceptance_work";
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--criterion" && i + 1 < argc) {
            only = std::atoi(argv[++i]);
        } else if (a == "--work-dir" && i + 1 < argc) {
            work = argv[++i];
        } else {
            std::fprintf(stderr, "usage: odt_acceptance [--criterion N] [--work-dir PATH]\n");
            return 2;
        }
    }
    Ctx ctx;
    ctx.work = fs::absolute(work);
    fs::create_directories(ctx.work);

    const std::vector<std::pair<const char*, std::function<Line()>>> table = {
        {"C1 scan kernel vs sequential oracle", [&] { return criterion1(); }},
        {"C2 gradient suite", [&] { return criterion2(); }},
        {"C3 signal-chain closure", [&] { return criterion3(); }},
        {"C4 exact structural invariants", [&] { return criterion4(); }},
        {"C5 learning smoke test", [&] { return criterion5(ctx); }},
        {"C6 model vs interpolation baseline", [&] { return criterion6(ctx); }},
        {"C7 ablation ordering", [&] { return criterion7(ctx); }},
        {"C8 determinism of criteria 5-7", [&] { return criterion8(ctx); }},
    };

    bool all_pass = true;
    for (int i = 0; i < static_cast<int>(table.size()); ++i) {
        if (only != 0 && only != i + 1) continue;
        Line line;
        try {
            line = table[static_cast<std::size_t>(i)].second();
        } catch (const std::exception& e) {
            line = {false, fmt("exception: %s", e.what())};
        }
        std::printf("%s: %s (%s)\n", table[static_cast<std::size_t>(i)].first,
                    line.pass ? "PASS" : "FAIL", line.detail.c_str());
        std::fflush(stdout);
        all_pass = all_pass && line.pass;
    }
    return all_pass ? 0 : 1;
}
