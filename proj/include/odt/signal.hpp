#pragma once

// Classical Doppler tomography chain: per-A-scan IFFT, magnitude/phase
// decoding, phase-difference flow estimation, magnitude masking, sparse
// B-line subsampling, B-line resize and network input assembly.

#include <complex>
#include <string>
#include <vector>

#include "odt/common.hpp"

namespace odt {

// Raw spectral B-scan: W A-scans of K_freq complex samples, row-major [K_freq, W].
struct RawBScan {
    int k_freq = 0;
    int width = 0;
    int delta = 1;  // sampling stride already applied (1 = dense)
    std::string scan_id;
    std::vector<std::complex<double>> data;

    std::complex<double>& at(int k, int w) { return data[static_cast<std::size_t>(k) * width + w]; }
    const std::complex<double>& at(int k, int w) const {
        return data[static_cast<std::size_t>(k) * width + w];
    }
};

// Complex depth plane, row-major [D, W].
struct ComplexPlane {
    int depth = 0;
    int width = 0;
    std::vector<std::complex<double>> data;
};

// Magnitude (>= 0) and phase (in [-pi, pi)) planes, row-major [D, W].
struct MagPhasePair {
    int depth = 0;
    int width = 0;
    std::vector<double> magnitude;
    std::vector<double> phase;
};

// Doppler flow map in radians of inter-A-scan phase shift, row-major [D, W].
struct FlowMap {
    int depth = 0;
    int width = 0;
    std::vector<double> values;

    double& at(int d, int w) { return values[static_cast<std::size_t>(d) * width + w]; }
    double at(int d, int w) const { return values[static_cast<std::size_t>(d) * width + w]; }
};

// In-place radix-2 Cooley-Tukey transform; inverse applies the 1/N factor.
// Throws FormatError when the length is not a power of two.
void fft_radix2(std::vector<std::complex<double>>& a, bool inverse);

// Per-column inverse FFT keeping the first `keep_depth` samples
// (0 selects the analytic half K_freq/2).
ComplexPlane ifft_ascan(const RawBScan& raw, int keep_depth = 0);

MagPhasePair to_mag_phase(const ComplexPlane& plane);

// Adjacent A-scan phase difference, wrapped to [-pi, pi). The last column
// replicates column W-2 so the output keeps width W.
FlowMap phase_difference(const MagPhasePair& pair);

// Zeroes flow where magnitude < mean + k*std (threshold per B-scan).
FlowMap magnitude_mask(const FlowMap& flow, const MagPhasePair& mag, double k);

// Keeps 1-indexed columns 1, 1+delta, 1+2*delta, ...; composes multiplicatively
// with any stride already applied.
RawBScan sparse_downsample(const RawBScan& raw, int delta);

// Per-row linear interpolation along width with half-pixel alignment.
FlowMap bline_resize(const FlowMap& v, int target_w);

// Two-channel network input, channel-first [2, D, W]: log-compressed
// min-max normalized magnitude and phase / pi.
struct NetworkInput {
    int depth = 0;
    int width = 0;
    std::vector<float> data;  // [2, D, W]
    double log_mag_min = 0.0;  // normalization constants, recorded for reporting
    double log_mag_max = 0.0;
    bool degenerate_magnitude = false;

    float& at(int c, int d, int w) {
        return data[(static_cast<std::size_t>(c) * depth + d) * width + w];
    }
};

NetworkInput build_network_input(const MagPhasePair& pair);

struct ClassicalConfig {
    int keep_depth = 0;   // 0 -> K_freq / 2
    double mask_k = 0.0;  // magnitude mask threshold offset, tau = mean + k*std
    int image_width = 0;  // 0 -> no resize (I = V)
};

struct ClassicalResult {
    FlowMap v;      // full-size masked flow (training target)
    FlowMap image;  // B-line resized display image
    MagPhasePair mag_phase;
};

// Dense reconstruction: ifft -> mag/phase -> phase difference -> mask -> resize.
ClassicalResult classical_dense_pipeline(const RawBScan& raw, const ClassicalConfig& cfg = {});

}  // namespace odt
