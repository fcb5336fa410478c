#include "odt/signal.hpp"

#include <algorithm>
#include <cmath>

namespace odt {

namespace {

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

}  // namespace

void fft_radix2(std::vector<std::complex<double>>& a, bool inverse) {
    const int n = static_cast<int>(a.size());
    if (!is_pow2(n)) throw FormatError("FFT length " + std::to_string(n) + " is not a power of two");
    // bit-reversal permutation
    for (int i = 1, j = 0; i < n; ++i) {
        int bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (int len = 2; len <= n; len <<= 1) {
        const double ang = (inverse ? 2.0 : -2.0) * kPi / len;
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (int i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (int j = 0; j < len / 2; ++j) {
                const auto u = a[i + j];
                const auto v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
    if (inverse) {
        const double inv = 1.0 / n;
        for (auto& z : a) z *= inv;
    }
}

ComplexPlane ifft_ascan(const RawBScan& raw, int keep_depth) {
    if (!is_pow2(raw.k_freq))
        throw FormatError("K_freq " + std::to_string(raw.k_freq) + " is not a power of two");
    const int d = keep_depth > 0 ? keep_depth : raw.k_freq / 2;
    if (d > raw.k_freq) throw UsageError("keep_depth exceeds K_freq");
    ComplexPlane out;
    out.depth = d;
    out.width = raw.width;
    out.data.resize(static_cast<std::size_t>(d) * raw.width);
    std::vector<std::complex<double>> col(static_cast<std::size_t>(raw.k_freq));
    for (int w = 0; w < raw.width; ++w) {
        for (int k = 0; k < raw.k_freq; ++k) col[static_cast<std::size_t>(k)] = raw.at(k, w);
        fft_radix2(col, true);
        for (int i = 0; i < d; ++i)
            out.data[static_cast<std::size_t>(i) * raw.width + w] = col[static_cast<std::size_t>(i)];
    }
    return out;
}

MagPhasePair to_mag_phase(const ComplexPlane& plane) {
    MagPhasePair out;
    out.depth = plane.depth;
    out.width = plane.width;
    out.magnitude.resize(plane.data.size());
    out.phase.resize(plane.data.size());
    for (std::size_t i = 0; i < plane.data.size(); ++i) {
        out.magnitude[i] = std::abs(plane.data[i]);
        out.phase[i] = wrap_phase(std::arg(plane.data[i]));
    }
    return out;
}

FlowMap phase_difference(const MagPhasePair& pair) {
    if (pair.width < 2) throw UsageError("phase_difference needs at least two A-scans");
    FlowMap out;
    out.depth = pair.depth;
    out.width = pair.width;
    out.values.resize(pair.phase.size());
    const int w = pair.width;
    for (int d = 0; d < pair.depth; ++d) {
        const double* row = pair.phase.data() + static_cast<std::size_t>(d) * w;
        double* dst = out.values.data() + static_cast<std::size_t>(d) * w;
        for (int i = 0; i + 1 < w; ++i) dst[i] = wrap_phase(row[i + 1] - row[i]);
        dst[w - 1] = dst[w - 2];
    }
    return out;
}

FlowMap magnitude_mask(const FlowMap& flow, const MagPhasePair& mag, double k) {
    if (flow.depth != mag.depth || flow.width != mag.width)
        throw UsageError("magnitude_mask: flow and magnitude shapes differ");
    FlowMap out = flow;
    if (std::isinf(k)) {
        if (k < 0) return out;  // threshold below every magnitude
        std::fill(out.values.begin(), out.values.end(), 0.0);
        return out;
    }
    double mean = 0.0;
    for (double m : mag.magnitude) mean += m;
    mean /= static_cast<double>(mag.magnitude.size());
    double var = 0.0;
    for (double m : mag.magnitude) var += (m - mean) * (m - mean);
    var /= static_cast<double>(mag.magnitude.size());
    const double tau = mean + k * std::sqrt(var);
    for (std::size_t i = 0; i < out.values.size(); ++i)
        if (mag.magnitude[i] < tau) out.values[i] = 0.0;
    return out;
}

RawBScan sparse_downsample(const RawBScan& raw, int delta) {
    if (delta < 1) throw UsageError("sparse stride must be >= 1");
    if (raw.width % delta != 0)
        throw UsageError("sparse stride " + std::to_string(delta) + " does not divide width " +
                         std::to_string(raw.width));
    RawBScan out;
    out.k_freq = raw.k_freq;
    out.width = raw.width / delta;
    out.delta = raw.delta * delta;
    out.scan_id = raw.scan_id;
    out.data.resize(static_cast<std::size_t>(out.k_freq) * out.width);
    for (int k = 0; k < out.k_freq; ++k)
        for (int j = 0; j < out.width; ++j) out.at(k, j) = raw.at(k, j * delta);
    return out;
}

FlowMap bline_resize(const FlowMap& v, int target_w) {
    if (target_w < 1) throw UsageError("bline_resize target width must be >= 1");
    if (target_w == v.width) return v;
    FlowMap out;
    out.depth = v.depth;
    out.width = target_w;
    out.values.resize(static_cast<std::size_t>(v.depth) * target_w);
    const double scale = static_cast<double>(v.width) / target_w;
    for (int x = 0; x < target_w; ++x) {
        double s = (x + 0.5) * scale - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(v.width - 1));
        const int i0 = static_cast<int>(s);
        const int i1 = std::min(i0 + 1, v.width - 1);
        const double f = s - i0;
        for (int d = 0; d < v.depth; ++d)
            out.at(d, x) = (1.0 - f) * v.at(d, i0) + f * v.at(d, i1);
    }
    return out;
}

NetworkInput build_network_input(const MagPhasePair& pair) {
    NetworkInput out;
    out.depth = pair.depth;
    out.width = pair.width;
    out.data.resize(2 * pair.magnitude.size());
    double lo = std::log1p(pair.magnitude[0]);
    double hi = lo;
    for (double m : pair.magnitude) {
        const double v = std::log1p(m);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    out.log_mag_min = lo;
    out.log_mag_max = hi;
    const std::size_t n = pair.magnitude.size();
    if (hi - lo <= 0.0) {
        out.degenerate_magnitude = true;
        log_warn("constant magnitude plane, network input channel 0 set to 0.5");
        for (std::size_t i = 0; i < n; ++i) out.data[i] = 0.5f;
    } else {
        const double inv = 1.0 / (hi - lo);
        for (std::size_t i = 0; i < n; ++i)
            out.data[i] = static_cast<float>((std::log1p(pair.magnitude[i]) - lo) * inv);
    }
    for (std::size_t i = 0; i < n; ++i)
        out.data[n + i] = static_cast<float>(pair.phase[i] / kPi);
    return out;
}

ClassicalResult classical_dense_pipeline(const RawBScan& raw, const ClassicalConfig& cfg) {
    if (raw.delta != 1)
        throw UsageError("classical_dense_pipeline expects a dense scan (stride 1), got stride " +
                         std::to_string(raw.delta));
    ClassicalResult res;
    res.mag_phase = to_mag_phase(ifft_ascan(raw, cfg.keep_depth));
    res.v = magnitude_mask(phase_difference(res.mag_phase), res.mag_phase, cfg.mask_k);
    res.image = cfg.image_width > 0 ? bline_resize(res.v, cfg.image_width) : res.v;
    return res;
}

}  // namespace odt
