#include "odt/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>

#include <json.hpp>

#include "odt/io.hpp"

namespace odt {

namespace {

int next_pow2(int n) {
    int p = 1;
    while (p < n) p <<= 1;
    return p;
}

char const* kManifestName = "manifest.json";

}  // namespace

void validate_scene(const PhantomScene& scene) {
    if (scene.depth < 2 || scene.width < 2) throw UsageError("phantom grid must be at least 2x2");
    if (scene.background <= 0.0) throw UsageError("background reflectivity must be positive");
    if (scene.speckle_amplitude < 0.0 || scene.speckle_amplitude >= 1.0)
        throw UsageError("speckle amplitude must lie in [0, 1)");
    if (scene.noise_sigma < 0.0) throw UsageError("noise sigma must be non-negative");
    if (scene.k_freq != 0) {
        if (scene.k_freq & (scene.k_freq - 1))
            throw UsageError("K_freq must be a power of two");
        if (scene.k_freq < 2 * scene.depth)
            throw UsageError("K_freq must be at least 2*depth");
    }
    for (const auto& v : scene.vessels) {
        if (v.radius_d <= 0.0 || v.radius_w <= 0.0) throw UsageError("vessel radii must be positive");
        if (v.center_d - v.radius_d < 0.0 || v.center_d + v.radius_d > scene.depth - 1 ||
            v.center_w - v.radius_w < 0.0 || v.center_w + v.radius_w > scene.width - 1)
            throw UsageError("vessel ellipse leaves the scan grid");
        if (std::abs(v.peak_phase_shift) > 0.9 * kPi)
            throw UsageError("|peak phase shift| must stay below 0.9*pi to avoid wrap ambiguity");
    }
}

FlowMap render_flow_field(const PhantomScene& scene) {
    validate_scene(scene);
    FlowMap flow;
    flow.depth = scene.depth;
    flow.width = scene.width;
    flow.values.assign(static_cast<std::size_t>(scene.depth) * scene.width, 0.0);
    for (const auto& v : scene.vessels) {
        const int d0 = std::max(0, static_cast<int>(std::floor(v.center_d - v.radius_d)));
        const int d1 = std::min(scene.depth - 1, static_cast<int>(std::ceil(v.center_d + v.radius_d)));
        const int w0 = std::max(0, static_cast<int>(std::floor(v.center_w - v.radius_w)));
        const int w1 = std::min(scene.width - 1, static_cast<int>(std::ceil(v.center_w + v.radius_w)));
        for (int d = d0; d <= d1; ++d) {
            for (int w = w0; w <= w1; ++w) {
                const double rd = (d - v.center_d) / v.radius_d;
                const double rw = (w - v.center_w) / v.radius_w;
                const double r2 = rd * rd + rw * rw;
                if (r2 > 1.0) continue;
                const double val = v.parabolic ? v.peak_phase_shift * (1.0 - r2) : v.peak_phase_shift;
                double& cur = flow.at(d, w);
                if (std::abs(val) > std::abs(cur)) cur = val;
            }
        }
    }
    return flow;
}

RawBScan synthesize_raw_bscan(const PhantomScene& scene) {
    validate_scene(scene);
    const int D = scene.depth, W = scene.width;
    const int K = scene.k_freq != 0 ? scene.k_freq : next_pow2(2 * D);

    const FlowMap flow = render_flow_field(scene);

    // vessel magnitude mask (independent of the programmed shift value)
    std::vector<std::uint8_t> in_vessel(static_cast<std::size_t>(D) * W, 0);
    for (const auto& v : scene.vessels)
        for (int d = 0; d < D; ++d)
            for (int w = 0; w < W; ++w) {
                const double rd = (d - v.center_d) / v.radius_d;
                const double rw = (w - v.center_w) / v.radius_w;
                if (rd * rd + rw * rw <= 1.0) in_vessel[static_cast<std::size_t>(d) * W + w] = 1;
            }

    // fixed draw order: static phase per depth, speckle plane, then spectral noise
    Rng rng(scene.seed);
    std::vector<double> phi0(static_cast<std::size_t>(D));
    for (auto& p : phi0) p = rng.uniform(-kPi, kPi);
    std::vector<double> speckle(static_cast<std::size_t>(D) * W);
    const double a = scene.speckle_amplitude;
    for (auto& s : speckle) s = (1.0 - a) + a * rng.rayleigh_unit_mean();

    RawBScan raw;
    raw.k_freq = K;
    raw.width = W;
    raw.delta = 1;
    raw.scan_id = scene.scan_id;
    raw.data.resize(static_cast<std::size_t>(K) * W);

    std::vector<double> cum(static_cast<std::size_t>(D), 0.0);  // per-depth accumulated phase
    std::vector<std::complex<double>> col(static_cast<std::size_t>(K));
    for (int i = 0; i < W; ++i) {
        std::fill(col.begin(), col.end(), std::complex<double>(0.0, 0.0));
        for (int d = 0; d < D; ++d) {
            const std::size_t px = static_cast<std::size_t>(d) * W + i;
            const double mag =
                scene.background * (in_vessel[px] ? scene.vessel_contrast : 1.0) * speckle[px];
            const double phase = phi0[static_cast<std::size_t>(d)] + cum[static_cast<std::size_t>(d)];
            col[static_cast<std::size_t>(d)] = std::polar(mag, phase);
            cum[static_cast<std::size_t>(d)] += flow.values[px];
        }
        fft_radix2(col, false);
        for (int k = 0; k < K; ++k) {
            std::complex<double> z = col[static_cast<std::size_t>(k)];
            if (scene.noise_sigma > 0.0)
                z += std::complex<double>(scene.noise_sigma * rng.normal(),
                                          scene.noise_sigma * rng.normal());
            raw.at(k, i) = z;
        }
    }
    return raw;
}

PhantomScene sample_scene(const SceneSamplerConfig& cfg, std::uint64_t scene_seed) {
    Rng rng(derive_seed(scene_seed, 1));
    PhantomScene scene;
    scene.depth = cfg.depth;
    scene.width = cfg.width;
    scene.background = cfg.background;
    scene.vessel_contrast = cfg.vessel_contrast;
    scene.speckle_amplitude = cfg.speckle_amplitude;
    scene.noise_sigma = cfg.noise_sigma;
    scene.seed = derive_seed(scene_seed, 2);
    const int n = static_cast<int>(rng.uniform_int(cfg.min_vessels, cfg.max_vessels));
    for (int i = 0; i < n; ++i) {
        Vessel v;
        v.radius_d = rng.uniform(cfg.min_radius_d, cfg.max_radius_d);
        v.radius_w = rng.uniform(cfg.min_radius_w, cfg.max_radius_w);
        // keep two clear columns at the right edge: the phase-difference output
        // replicates its penultimate column, which must stay vessel-free
        v.center_d = rng.uniform(v.radius_d, cfg.depth - 1 - v.radius_d);
        v.center_w = rng.uniform(v.radius_w, cfg.width - 3 - v.radius_w);
        const double mag = rng.uniform(cfg.min_abs_shift, cfg.max_abs_shift);
        v.peak_phase_shift = rng.uniform() < 0.5 ? mag : -mag;
        v.parabolic = rng.uniform() >= cfg.flat_fraction;
        scene.vessels.push_back(v);
    }
    validate_scene(scene);
    return scene;
}

namespace {

OdtrArray mag_to_odtr(const MagPhasePair& pair, const std::string& scan_id) {
    OdtrArray a;
    a.dtype = OdtrDtype::kF32;
    a.dims = {static_cast<std::uint64_t>(pair.depth), static_cast<std::uint64_t>(pair.width)};
    a.meta = {{"kind", "magnitude"}, {"scan_id", scan_id}};
    a.data.assign(pair.magnitude.begin(), pair.magnitude.end());
    return a;
}

OdtrArray input_to_odtr(const NetworkInput& in, int delta, const std::string& scan_id) {
    OdtrArray a;
    a.dtype = OdtrDtype::kF32;
    a.dims = {2, static_cast<std::uint64_t>(in.depth), static_cast<std::uint64_t>(in.width)};
    a.meta = {{"kind", "network_input"},
              {"scan_id", scan_id},
              {"delta", delta},
              {"log_mag_min", in.log_mag_min},
              {"log_mag_max", in.log_mag_max}};
    a.data = in.data;
    return a;
}

}  // namespace

DatasetIndex make_dataset(const DatasetConfig& cfg) {
    if (cfg.n_scans < 1) throw UsageError("dataset needs at least one scan");
    if (cfg.delta < 1 || cfg.sampler.width % cfg.delta != 0)
        throw UsageError("sparsity stride must divide the scan width");
    if (cfg.out_dir.empty()) throw UsageError("dataset output directory not set");
    std::filesystem::create_directories(cfg.out_dir);

    DatasetIndex index;
    index.delta = cfg.delta;
    index.seed = cfg.seed;
    index.depth = 0;
    index.width = cfg.sampler.width;

    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["delta"] = cfg.delta;
    manifest["seed"] = cfg.seed;
    manifest["n_scans"] = cfg.n_scans;
    manifest["width"] = cfg.sampler.width;
    manifest["train_fraction"] = cfg.train_fraction;
    manifest["records"] = nlohmann::json::array();

    const int n_train = static_cast<int>(std::floor(cfg.train_fraction * cfg.n_scans));
    for (int s = 0; s < cfg.n_scans; ++s) {
        char id[32];
        std::snprintf(id, sizeof(id), "scan_%04d", s);
        const std::uint64_t scene_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(s));
        PhantomScene scene = sample_scene(cfg.sampler, scene_seed);
        scene.scan_id = id;

        const RawBScan raw = synthesize_raw_bscan(scene);
        const ClassicalResult dense = classical_dense_pipeline(raw, cfg.classical);
        const RawBScan sparse = sparse_downsample(raw, cfg.delta);
        const MagPhasePair sparse_mp = to_mag_phase(ifft_ascan(sparse, cfg.classical.keep_depth));
        const NetworkInput input = build_network_input(sparse_mp);

        DatasetRecord rec;
        rec.id = id;
        rec.scene_seed = scene_seed;
        rec.split = s < n_train ? "train" : "test";
        rec.sparse_path = std::string(id) + ".sparse.odtr";
        rec.target_path = std::string(id) + ".target.odtr";
        rec.mag_path = std::string(id) + ".mag.odtr";
        rec.input_path = std::string(id) + ".input.odtr";

        const auto dir = std::filesystem::path(cfg.out_dir);
        auto sparse_arr = raw_to_odtr(sparse);
        sparse_arr.meta["scene_seed"] = scene_seed;
        odtr_write((dir / rec.sparse_path).string(), sparse_arr);
        auto target_arr = flow_to_odtr(dense.v);
        target_arr.meta["scan_id"] = rec.id;
        odtr_write((dir / rec.target_path).string(), target_arr);
        odtr_write((dir / rec.mag_path).string(), mag_to_odtr(dense.mag_phase, rec.id));
        odtr_write((dir / rec.input_path).string(), input_to_odtr(input, sparse.delta, rec.id));

        index.depth = dense.v.depth;
        manifest["records"].push_back({{"id", rec.id},
                                       {"scene_seed", rec.scene_seed},
                                       {"split", rec.split},
                                       {"sparse", rec.sparse_path},
                                       {"target", rec.target_path},
                                       {"mag", rec.mag_path},
                                       {"input", rec.input_path}});
        // the manifest keeps portable relative paths; the in-memory index
        // carries paths usable from any working directory
        rec.sparse_path = (dir / rec.sparse_path).string();
        rec.target_path = (dir / rec.target_path).string();
        rec.mag_path = (dir / rec.mag_path).string();
        rec.input_path = (dir / rec.input_path).string();
        index.records.push_back(rec);
    }
    manifest["depth"] = index.depth;
    write_json_file((std::filesystem::path(cfg.out_dir) / kManifestName).string(), manifest);
    return index;
}

DatasetIndex load_dataset_index(const std::string& dir) {
    const auto path = std::filesystem::path(dir) / kManifestName;
    const nlohmann::json m = read_json_file(path.string());
    if (!m.contains("records") || !m["records"].is_array())
        throw FormatError(path.string() + ": manifest has no records array");
    DatasetIndex index;
    index.delta = m.value("delta", 1);
    index.depth = m.value("depth", 0);
    index.width = m.value("width", 0);
    index.seed = m.value("seed", std::uint64_t(0));
    for (const auto& r : m["records"]) {
        DatasetRecord rec;
        rec.id = r.value("id", "");
        rec.scene_seed = r.value("scene_seed", std::uint64_t(0));
        rec.split = r.value("split", "train");
        const auto join = [&](const std::string& p) {
            return (std::filesystem::path(dir) / p).string();
        };
        rec.sparse_path = join(r.value("sparse", ""));
        rec.target_path = join(r.value("target", ""));
        rec.mag_path = join(r.value("mag", ""));
        rec.input_path = join(r.value("input", ""));
        index.records.push_back(rec);
    }
    return index;
}

}  // namespace odt
