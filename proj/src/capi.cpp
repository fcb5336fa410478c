// C boundary: every entry point catches all exceptions, stashes the message
// in a thread-local buffer and returns a status code. No C++ type or
// exception ever crosses into the caller.

#include "odt/odt_c.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "odt/common.hpp"
#include "odt/io.hpp"
#include "odt/model.hpp"
#include "odt/phantom.hpp"
#include "odt/signal.hpp"
#include "odt/train.hpp"

struct odt_model {
    odt::AssanModel<float> net;
};

namespace {

thread_local std::string g_error;

template <typename Fn>
odt_status guarded(Fn&& fn) {
    try {
        fn();
        return ODT_OK;
    } catch (const odt::UsageError& e) {
        g_error = e.what();
        return ODT_ERR_USAGE;
    } catch (const odt::FormatError& e) {
        g_error = e.what();
        return ODT_ERR_FORMAT;
    } catch (const odt::NumericError& e) {
        g_error = e.what();
        return ODT_ERR_NUMERIC;
    } catch (const std::exception& e) {
        g_error = e.what();
        return ODT_ERR_INTERNAL;
    } catch (...) {
        g_error = "unknown internal error";
        return ODT_ERR_INTERNAL;
    }
}

std::string require(const char* value, const char* what) {
    if (value == nullptr || *value == '\0')
        throw odt::UsageError(std::string(what) + " must not be empty");
    return value;
}

// Overlays user keys onto the default JSON form of a config section; an
// unknown key fails loudly instead of silently falling back to the default.
nlohmann::json merge_section(nlohmann::json base, const nlohmann::json& user, const char* section) {
    if (!user.is_object())
        throw odt::FormatError(std::string("config section \"") + section +
                               "\" must be a JSON object");
    for (const auto& [key, value] : user.items()) {
        if (!base.contains(key))
            throw odt::FormatError(std::string("unknown key \"") + key + "\" in config section \"" +
                                   section + "\"");
        base[key] = value;
    }
    return base;
}

nlohmann::json train_config_to_json(const odt::TrainConfig& c) {
    return {{"iterations", c.iterations},
            {"batch", c.batch},
            {"patch_depth", c.patch_depth},
            {"patch_width", c.patch_width},
            {"lr_max", c.lr_max},
            {"lr_min", c.lr_min},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"eps", c.eps},
            {"seed", c.seed},
            {"log_every", c.log_every}};
}

odt::TrainConfig train_config_from_json(const nlohmann::json& j) {
    odt::TrainConfig c;
    try {
        c.iterations = j.at("iterations").get<int>();
        c.batch = j.at("batch").get<int>();
        c.patch_depth = j.at("patch_depth").get<int>();
        c.patch_width = j.at("patch_width").get<int>();
        c.lr_max = j.at("lr_max").get<double>();
        c.lr_min = j.at("lr_min").get<double>();
        c.beta1 = j.at("beta1").get<double>();
        c.beta2 = j.at("beta2").get<double>();
        c.eps = j.at("eps").get<double>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.log_every = j.at("log_every").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw odt::FormatError(std::string("bad train config: ") + e.what());
    }
    return c;
}

odt::OdtrArray mag_to_odtr(const odt::MagPhasePair& pair, const std::string& scan_id) {
    odt::OdtrArray a;
    a.dtype = odt::OdtrDtype::kF32;
    a.dims = {static_cast<std::uint64_t>(pair.depth), static_cast<std::uint64_t>(pair.width)};
    a.meta = {{"kind", "magnitude"}, {"scan_id", scan_id}};
    a.data.assign(pair.magnitude.begin(), pair.magnitude.end());
    return a;
}

odt::OdtrArray phase_to_odtr(const odt::MagPhasePair& pair, const std::string& scan_id) {
    odt::OdtrArray a;
    a.dtype = odt::OdtrDtype::kF32;
    a.dims = {static_cast<std::uint64_t>(pair.depth), static_cast<std::uint64_t>(pair.width)};
    a.meta = {{"kind", "phase"}, {"scan_id", scan_id}};
    a.data.assign(pair.phase.begin(), pair.phase.end());
    return a;
}

odt::OdtrArray input_to_odtr(const odt::NetworkInput& in, int delta, const std::string& scan_id) {
    odt::OdtrArray a;
    a.dtype = odt::OdtrDtype::kF32;
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

extern "C" {

const char* odt_version(void) { return "0.1.0"; }

const char* odt_last_error(void) { return g_error.c_str(); }

odt_status odt_gen_dataset(const char* out_dir, int n_scans, int delta,
                           unsigned long long seed, int depth, int width, double noise_sigma,
                           double train_fraction) {
    return guarded([&] {
        if (depth < 8 || width < 8) throw odt::UsageError("scene grid must be at least 8x8");
        if (train_fraction < 0.0 || train_fraction > 1.0)
            throw odt::UsageError("train fraction must lie in [0, 1]");
        if (noise_sigma < 0.0) throw odt::UsageError("noise sigma must be non-negative");
        odt::DatasetConfig cfg;
        cfg.out_dir = require(out_dir, "output directory");
        cfg.n_scans = n_scans;
        cfg.delta = delta;
        cfg.seed = seed;
        cfg.train_fraction = train_fraction;
        cfg.sampler.depth = depth;
        cfg.sampler.width = width;
        cfg.sampler.noise_sigma = noise_sigma;
        // shrink the vessel radius ranges on small grids so sampled scenes
        // always fit (the sampler keeps two clear columns at the right edge)
        const double cap_d = 0.5 * (depth - 1) - 1.0;
        const double cap_w = 0.5 * (width - 3) - 1.0;
        cfg.sampler.max_radius_d = std::min(cfg.sampler.max_radius_d, cap_d);
        cfg.sampler.max_radius_w = std::min(cfg.sampler.max_radius_w, cap_w);
        cfg.sampler.min_radius_d = std::min(cfg.sampler.min_radius_d, cfg.sampler.max_radius_d);
        cfg.sampler.min_radius_w = std::min(cfg.sampler.min_radius_w, cfg.sampler.max_radius_w);
        if (cfg.sampler.max_radius_d < 1.0 || cfg.sampler.max_radius_w < 1.0)
            throw odt::UsageError("scene grid too small for any vessel");
        odt::make_dataset(cfg);
    });
}

odt_status odt_preprocess(const char* raw_path, const char* out_dir) {
    return guarded([&] {
        const std::string in = require(raw_path, "input path");
        const std::string dir = require(out_dir, "output directory");
        const odt::RawBScan raw = odt::odtr_to_raw(odt::odtr_read(in));
        const odt::MagPhasePair mp = odt::to_mag_phase(odt::ifft_ascan(raw));
        const odt::NetworkInput input = odt::build_network_input(mp);
        std::filesystem::create_directories(dir);
        std::string stem = std::filesystem::path(in).filename().string();
        if (stem.size() > 5 && stem.substr(stem.size() - 5) == ".odtr")
            stem.resize(stem.size() - 5);
        const auto base = std::filesystem::path(dir) / stem;
        odt::odtr_write(base.string() + ".mag.odtr", mag_to_odtr(mp, raw.scan_id));
        odt::odtr_write(base.string() + ".phase.odtr", phase_to_odtr(mp, raw.scan_id));
        odt::odtr_write(base.string() + ".input.odtr", input_to_odtr(input, raw.delta, raw.scan_id));
    });
}

odt_status odt_train(const char* data_dir, const char* config_path, const char* out_dir,
                     const char* tag) {
    return guarded([&] {
        const std::string dir = require(data_dir, "data directory");
        const std::string out = require(out_dir, "output directory");
        const std::string name = (tag != nullptr && *tag != '\0') ? tag : "model";

        odt::ModelConfig mc;
        odt::TrainConfig tc;
        bool delta_from_config = false;
        if (config_path != nullptr && *config_path != '\0') {
            const nlohmann::json j = odt::read_json_file(config_path);
            if (!j.is_object()) throw odt::FormatError("config file must hold a JSON object");
            for (const auto& [key, value] : j.items()) {
                (void)value;
                if (key != "model" && key != "train")
                    throw odt::FormatError("unknown config section \"" + key +
                                           "\" (expected \"model\" and/or \"train\")");
            }
            if (j.contains("model")) {
                delta_from_config = j["model"].is_object() && j["model"].contains("delta");
                mc = odt::model_config_from_json(
                    merge_section(odt::model_config_to_json(mc), j["model"], "model"));
            }
            if (j.contains("train"))
                tc = train_config_from_json(
                    merge_section(train_config_to_json(tc), j["train"], "train"));
        }

        const odt::DatasetIndex index = odt::load_dataset_index(dir);
        if (delta_from_config && mc.delta != index.delta)
            throw odt::UsageError("config stride " + std::to_string(mc.delta) +
                                  " does not match dataset stride " + std::to_string(index.delta));
        mc.delta = index.delta;
        mc.validate();

        const std::vector<odt::ScanPair> pairs = odt::load_pairs(index, "train");
        if (pairs.empty()) throw odt::UsageError("dataset under " + dir + " has no train split");
        odt::AssanModel<float> model(mc, tc.seed);
        odt::train_model(model, pairs, tc, out, name);
    });
}

odt_status odt_model_open(const char* checkpoint_path, odt_model** out) {
    return guarded([&] {
        if (out == nullptr) throw odt::UsageError("null model handle output");
        *out = nullptr;
        odt::AssanModel<float> net =
            odt::load_model<float>(require(checkpoint_path, "checkpoint path"));
        *out = new odt_model{std::move(net)};
    });
}

void odt_model_close(odt_model* model) { delete model; }

odt_status odt_model_delta(const odt_model* model, int* delta) {
    return guarded([&] {
        if (model == nullptr || delta == nullptr) throw odt::UsageError("null argument");
        *delta = model->net.cfg.delta;
    });
}

odt_status odt_reconstruct(const odt_model* model, const char* sparse_path,
                           const char* out_odtr, const char* out_png) {
    return guarded([&] {
        if (model == nullptr) throw odt::UsageError("null model handle");
        const std::string in = require(sparse_path, "input path");
        const std::string out = require(out_odtr, "output path");
        const odt::RawBScan sparse = odt::odtr_to_raw(odt::odtr_read(in));
        if (sparse.delta != model->net.cfg.delta)
            throw odt::UsageError("scan stride " + std::to_string(sparse.delta) +
                                  " does not match model stride " +
                                  std::to_string(model->net.cfg.delta));
        const odt::NetworkInput input =
            odt::build_network_input(odt::to_mag_phase(odt::ifft_ascan(sparse)));
        odt::EvalScan scan;
        scan.id = sparse.scan_id;
        scan.input = odt::Tensor::zeros({2, input.depth, input.width});
        std::copy(input.data.begin(), input.data.end(), scan.input->data.begin());
        const odt::FlowMap v = odt::model_reconstructor(model->net)(scan);
        odt::OdtrArray arr = odt::flow_to_odtr(v);
        arr.meta["scan_id"] = sparse.scan_id;
        arr.meta["delta"] = sparse.delta;
        odt::odtr_write(out, arr);
        if (out_png != nullptr && *out_png != '\0') odt::write_flow_png(out_png, v);
    });
}

odt_status odt_evaluate(const char* checkpoint_path, const char* data_dir,
                        const char* baseline, const char* report_path) {
    return guarded([&] {
        const std::string dir = require(data_dir, "data directory");
        const std::string rep = require(report_path, "report path");
        const bool have_model = checkpoint_path != nullptr && *checkpoint_path != '\0';
        std::optional<odt::InterpKind> base;
        if (baseline != nullptr && *baseline != '\0') {
            const std::string b = baseline;
            if (b == "linear")
                base = odt::InterpKind::kLinear;
            else if (b == "nearest")
                base = odt::InterpKind::kNearest;
            else if (b != "none")
                throw odt::UsageError("unknown baseline \"" + b +
                                      "\" (expected linear, nearest or none)");
        }
        if (!have_model && !base)
            throw odt::UsageError("nothing to evaluate: pass a checkpoint, a baseline, or both");

        const odt::DatasetIndex index = odt::load_dataset_index(dir);
        const std::vector<odt::EvalScan> scans = odt::load_eval_scans(index, "test");
        if (scans.empty()) throw odt::UsageError("dataset under " + dir + " has no test split");
        const odt::EvalConfig ec;

        nlohmann::json report;
        report["delta"] = index.delta;
        report["split"] = "test";
        report["n_scans"] = scans.size();
        report["methods"] = nlohmann::json::object();
        if (have_model) {
            const odt::AssanModel<float> model = odt::load_model<float>(checkpoint_path);
            if (model.cfg.delta != index.delta)
                throw odt::UsageError("model stride " + std::to_string(model.cfg.delta) +
                                      " does not match dataset stride " +
                                      std::to_string(index.delta));
            const odt::MetricReport r =
                odt::evaluate(odt::model_reconstructor(model), scans, ec, "model");
            report["methods"]["model"] = r.to_json();
        }
        if (base) {
            const char* name =
                *base == odt::InterpKind::kLinear ? "baseline_linear" : "baseline_nearest";
            const odt::MetricReport r =
                odt::evaluate(odt::baseline_reconstructor(*base), scans, ec, name);
            report["methods"][name] = r.to_json();
        }
        odt::write_json_file(rep, report);
    });
}

odt_status odt_mip(const char* volume_dir, const char* out_png) {
    return guarded([&] {
        const std::string dir = require(volume_dir, "volume directory");
        const std::string out = require(out_png, "output path");
        if (!std::filesystem::is_directory(dir))
            throw odt::UsageError(dir + " is not a directory");
        std::vector<std::string> files;
        for (const auto& entry : std::filesystem::directory_iterator(dir))
            if (entry.is_regular_file() && entry.path().extension() == ".odtr")
                files.push_back(entry.path().string());
        std::sort(files.begin(), files.end());
        std::vector<odt::FlowMap> maps;
        for (const auto& f : files) {
            const odt::OdtrArray a = odt::odtr_read(f);
            if (a.meta.value("kind", std::string()) != "flow_map") continue;
            maps.push_back(odt::odtr_to_flow(a));
        }
        if (maps.empty())
            throw odt::UsageError("no flow maps (rank-2 .odtr with kind \"flow_map\") under " +
                                  dir);
        const odt::FlowMap proj = odt::mip_project(maps);
        double peak = 0.0;
        for (double v : proj.values) peak = std::max(peak, v);
        std::vector<std::uint8_t> pixels(proj.values.size());
        for (std::size_t i = 0; i < pixels.size(); ++i) {
            const double g = peak > 0.0 ? proj.values[i] / peak : 0.0;
            pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(g, 0.0, 1.0) * 255.0));
        }
        odt::write_png_gray8(out, proj.width, proj.depth, pixels);
    });
}

}  // extern "C"
