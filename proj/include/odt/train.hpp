#pragma once

// Training loop (L2 loss, Adam, cosine LR, random patch sampling), PSNR/SSIM
// metrics, interpolation baselines, evaluation harness and MIP projection.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "odt/model.hpp"
#include "odt/phantom.hpp"
#include "odt/signal.hpp"
#include "odt/tensor.hpp"

namespace odt {

struct TrainConfig {
    int iterations = 2000;  // paper protocol uses 200000
    int batch = 4;          // paper uses 8
    int patch_depth = 64;   // rows; paper uses 512
    int patch_width = 16;   // sparse columns; paper uses 64
    double lr_max = 2e-4;
    double lr_min = 1e-6;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    std::uint64_t seed = 0;
    int log_every = 25;  // loss curve cadence (first and last step always logged)
};

// lr(t) = lr_min + (lr_max - lr_min) * (1 + cos(pi t / T)) / 2, clamped past T.
double cosine_lr(int t, const TrainConfig& cfg);

// Adam with bias correction; moments kept in double regardless of the
// parameter scalar type.
template <class S>
class AdamT {
public:
    AdamT(std::vector<TensorPtrT<S>> params, const TrainConfig& cfg)
        : params_(std::move(params)), beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i]->data.size(), 0.0);
            v_[i].assign(params_[i]->data.size(), 0.0);
        }
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            p.ensure_grad();
            for (std::size_t j = 0; j < p.data.size(); ++j) {
                const double g = static_cast<double>(p.grad[j]);
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                p.data[j] -= static_cast<S>(lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    int steps() const { return t_; }

private:
    std::vector<TensorPtrT<S>> params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_, beta2_, eps_;
    int t_ = 0;
};

using Adam = AdamT<float>;

// One preprocessed scan held in memory: network input and dense target.
struct ScanPair {
    std::string id;
    TensorPtr input;   // [2, D, W']
    TensorPtr target;  // [1, D, W' * delta]
};

struct PatchPair {
    TensorPtr input;   // [2, D_p, W_p]
    TensorPtr target;  // [1, D_p, W_p * delta]
};

// Uniform aligned crop; the target window starts at delta times the input
// column offset. Throws if the scan is smaller than the patch.
PatchPair sample_patch(const ScanPair& pair, int patch_depth, int patch_width, int delta, Rng& rng);

struct TrainLogRow {
    int step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    std::vector<TrainLogRow> log;
    double initial_smoothed = 0.0;  // mean loss over the first 100 iterations
    double final_smoothed = 0.0;    // mean loss over the last 100 iterations
    double best_probe_loss = 0.0;   // lowest fixed-probe loss seen
    int best_step = 0;
    std::string final_path, best_path, csv_path;
};

// Runs the full loop: sample -> forward -> L2 -> backward -> Adam with cosine
// LR. Writes <tag>.loss.csv, <tag>.final.assn and <tag>.best.assn under
// out_dir. The best checkpoint is picked by the loss on a fixed probe set of
// patches re-scored every 50 steps, over both the live weights and an EMA
// shadow; per-batch training loss varies too much with vessel content for a
// rolling window to rank checkpoints. Aborts with a
// numeric error and a diagnostic snapshot checkpoint if the loss leaves the
// finite range.
TrainResult train_model(AssanModel<float>& model, const std::vector<ScanPair>& train_set,
                        const TrainConfig& cfg, const std::string& out_dir,
                        const std::string& tag = "model");

// Loads the requested split ("train" | "test") as in-memory pairs.
std::vector<ScanPair> load_pairs(const DatasetIndex& index, const std::string& split);

// ---------------------------------------------------------------------------
// Metrics.

double psnr(const std::vector<double>& a, const std::vector<double>& b, double peak = 1.0);

// Mean local SSIM, Gaussian window 11 sigma 1.5, K1=0.01, K2=0.03, data
// range 1, valid mode (window fully inside). Throws if either extent < 11.
double ssim(const std::vector<double>& a, const std::vector<double>& b, int width, int height);

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalConfig {
    double crop_keep = 0.8;  // fraction of top depth rows kept
    double mask_k = 0.0;     // magnitude mask threshold multiplier
    int image_width = 0;     // B-line resize target width; 0 keeps dense width
};

struct EvalScan {
    std::string id;
    TensorPtr input;          // [2, D, W']
    FlowMap target;           // dense-pipeline V
    MagPhasePair dense_mag;   // dense magnitude plane for masking
    RawBScan sparse;          // sparse raw data for the baselines
};

std::vector<EvalScan> load_eval_scans(const DatasetIndex& index, const std::string& split);

struct ScanMetrics {
    std::string id;
    double psnr_i = 0.0, ssim_i = 0.0;  // on the resized final image
    double psnr_v = 0.0, ssim_v = 0.0;  // on the pre-resize flow map
};

struct MetricReport {
    EvalConfig eval;
    std::string method;
    std::vector<ScanMetrics> per_scan;
    double mean_psnr = 0.0, std_psnr = 0.0;  // image metrics are primary
    double mean_ssim = 0.0, std_ssim = 0.0;
    double mean_psnr_v = 0.0, mean_ssim_v = 0.0;

    nlohmann::json to_json() const;
};

using Reconstructor = std::function<FlowMap(const EvalScan&)>;

// Reconstructs every scan at full width, masks and resizes prediction and
// target identically, crops deep rows, normalizes by the target peak and
// aggregates PSNR/SSIM.
MetricReport evaluate(const Reconstructor& recon, const std::vector<EvalScan>& scans,
                      const EvalConfig& cfg, const std::string& method_name);

Reconstructor model_reconstructor(const AssanModel<float>& model);
enum class InterpKind { kNearest, kLinear };
Reconstructor baseline_reconstructor(InterpKind kind, const ClassicalConfig& classical = {});
Reconstructor identity_reconstructor();

// Width-upsamples a flow map by delta; sparse column j sits at dense column
// j * delta. delta=1 returns the input unchanged.
FlowMap width_upsample(const FlowMap& v, int delta, InterpKind kind);

// ---------------------------------------------------------------------------
// Maximum intensity projection: en-face image over a stack of B-scans,
// out(scan, width) = max over depth of |flow|.
FlowMap mip_project(const std::vector<FlowMap>& scans);

}  // namespace odt
