#pragma once

// Synthetic phantom forward model: programmed vasculature with known
// per-pixel Doppler phase shifts, rendered into raw spectral B-scans that
// the classical pipeline can invert exactly in the noise-free case.

#include <cstdint>
#include <string>
#include <vector>

#include "odt/common.hpp"
#include "odt/signal.hpp"

namespace odt {

struct Vessel {
    double center_d = 0.0;
    double center_w = 0.0;
    double radius_d = 1.0;
    double radius_w = 1.0;
    double peak_phase_shift = 0.0;  // rad per A-scan interval
    bool parabolic = true;          // false = flat profile
};

struct PhantomScene {
    int depth = 128;
    int width = 256;
    int k_freq = 0;  // 0 -> next power of two >= 2*depth
    double background = 1.0;
    double vessel_contrast = 1.5;     // magnitude factor inside vessels
    double speckle_amplitude = 0.25;  // blend weight of the Rayleigh factor, 0 = smooth
    double noise_sigma = 0.0;         // complex Gaussian std per spectral component
    std::uint64_t seed = 0;
    std::string scan_id;
    std::vector<Vessel> vessels;
};

// Throws UsageError when a vessel leaves the grid or |peak shift| > 0.9*pi.
void validate_scene(const PhantomScene& scene);

// Ground-truth per-pixel phase shift map: 0 outside vessels; parabolic
// profile peak*(1 - r^2) or flat peak inside; overlaps keep the vessel
// with the largest |value| at that pixel.
FlowMap render_flow_field(const PhantomScene& scene);

// Builds complex depth profiles with cumulative Doppler phase and forward-FFTs
// them into a dense raw B-scan (plus optional complex Gaussian spectral noise).
RawBScan synthesize_raw_bscan(const PhantomScene& scene);

// Randomized scene generation for datasets.
struct SceneSamplerConfig {
    int depth = 128;
    int width = 256;
    int min_vessels = 1;
    int max_vessels = 3;
    double min_radius_d = 4.0;
    double max_radius_d = 12.0;
    double min_radius_w = 8.0;
    double max_radius_w = 24.0;
    double min_abs_shift = 0.2;  // rad
    double max_abs_shift = 2.2;
    double flat_fraction = 0.3;  // probability of a flat (plug flow) profile
    double background = 1.0;
    double vessel_contrast = 1.5;
    double speckle_amplitude = 0.25;
    double noise_sigma = 0.02;
};

PhantomScene sample_scene(const SceneSamplerConfig& cfg, std::uint64_t scene_seed);

struct DatasetConfig {
    int n_scans = 40;
    int delta = 2;
    std::uint64_t seed = 0;
    double train_fraction = 0.8;
    std::string out_dir;
    SceneSamplerConfig sampler;
    ClassicalConfig classical;
};

// One manifest entry per scan.
struct DatasetRecord {
    std::string id;
    std::uint64_t scene_seed = 0;
    std::string split;  // "train" | "test"
    std::string sparse_path;
    std::string target_path;
    std::string mag_path;
    std::string input_path;
};

struct DatasetIndex {
    int delta = 1;
    int depth = 0;
    int width = 0;
    std::uint64_t seed = 0;
    std::vector<DatasetRecord> records;
};

// Writes sparse raw scans, dense targets, dense magnitudes and precomputed
// network inputs plus manifest.json under cfg.out_dir.
DatasetIndex make_dataset(const DatasetConfig& cfg);

DatasetIndex load_dataset_index(const std::string& dir);

}  // namespace odt
