// Command-line front end. Talks to the pipeline exclusively through the C
// interface; exit codes are the odt_status values (0 ok, 2 usage, 3 format,
// 4 numeric, 5 internal), with messages on stderr.

#include <CLI11.hpp>

#include <cstdio>
#include <string>

#include "odt/odt_c.h"

namespace {

int finish(odt_status status) {
    if (status != ODT_OK) std::fprintf(stderr, "error: %s\n", odt_last_error());
    return static_cast<int>(status);
}

const char* opt(const std::string& s) { return s.empty() ? nullptr : s.c_str(); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse optical Doppler tomography reconstruction"};
    app.set_version_flag("--version", std::string("odt ") + odt_version());
    app.require_subcommand(1);

    int scenes = 40, delta = 2, depth = 128, width = 256;
    unsigned long long seed = 0;
    double noise = 0.02, train_fraction = 0.8;
    std::string gen_out;
    auto* gen = app.add_subcommand("gen", "synthesize a phantom dataset");
    gen->add_option("--scenes", scenes, "number of B-scans")->capture_default_str();
    gen->add_option("--delta", delta, "sparse sampling stride")->capture_default_str();
    gen->add_option("--out", gen_out, "dataset directory")->required();
    gen->add_option("--seed", seed, "base seed")->capture_default_str();
    gen->add_option("--depth", depth, "scene depth in pixels")->capture_default_str();
    gen->add_option("--width", width, "scene width in A-scans")->capture_default_str();
    gen->add_option("--noise", noise, "spectral noise sigma")->capture_default_str();
    gen->add_option("--train-fraction", train_fraction, "train split fraction")
        ->capture_default_str();

    std::string pre_in, pre_out;
    auto* pre = app.add_subcommand("preprocess", "run the classical chain on one raw scan");
    pre->add_option("--in", pre_in, "raw .odtr scan")->required();
    pre->add_option("--out", pre_out, "output directory")->required();

    std::string train_data, train_cfg, train_out, train_tag = "model";
    auto* train = app.add_subcommand("train", "train a reconstruction model");
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--config", train_cfg,
                      "JSON file with optional \"model\" and \"train\" override sections");
    train->add_option("--out", train_out, "checkpoint directory")->required();
    train->add_option("--tag", train_tag, "checkpoint filename prefix")->capture_default_str();

    std::string rec_ckpt, rec_in, rec_out, rec_png;
    auto* rec = app.add_subcommand("reconstruct", "densify one sparse scan with a trained model");
    rec->add_option("--ckpt", rec_ckpt, "checkpoint (.assn)")->required();
    rec->add_option("--in", rec_in, "sparse raw .odtr scan")->required();
    rec->add_option("--out", rec_out, "output flow map (.odtr)")->required();
    rec->add_option("--png", rec_png, "also render an 8-bit PNG");

    std::string eval_ckpt, eval_data, eval_baseline, eval_report;
    auto* eval = app.add_subcommand("eval", "score reconstructions on the test split");
    eval->add_option("--ckpt", eval_ckpt, "checkpoint (.assn); omit for baseline-only");
    eval->add_option("--data", eval_data, "dataset directory")->required();
    eval->add_option("--baseline", eval_baseline, "interpolation baseline: linear or nearest");
    eval->add_option("--report", eval_report, "JSON report path")->required();

    std::string mip_dir, mip_out;
    auto* mip = app.add_subcommand("mip", "maximum intensity projection over flow maps");
    mip->add_option("--volume", mip_dir, "directory of flow-map .odtr files")->required();
    mip->add_option("--out", mip_out, "output PNG")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        const CLI::App* scope =
            app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        std::fputs(scope->help().c_str(), stderr);
        return ODT_ERR_USAGE;
    }

    if (*gen)
        return finish(odt_gen_dataset(gen_out.c_str(), scenes, delta, seed, depth, width, noise,
                                      train_fraction));
    if (*pre) return finish(odt_preprocess(pre_in.c_str(), pre_out.c_str()));
    if (*train)
        return finish(odt_train(train_data.c_str(), opt(train_cfg), train_out.c_str(),
                                train_tag.c_str()));
    if (*rec) {
        odt_model* model = nullptr;
        const odt_status open_status = odt_model_open(rec_ckpt.c_str(), &model);
        if (open_status != ODT_OK) return finish(open_status);
        const int code = finish(odt_reconstruct(model, rec_in.c_str(), rec_out.c_str(),
                                                opt(rec_png)));
        odt_model_close(model);
        return code;
    }
    if (*eval)
        return finish(odt_evaluate(opt(eval_ckpt), eval_data.c_str(), opt(eval_baseline),
                                   eval_report.c_str()));
    if (*mip) return finish(odt_mip(mip_dir.c_str(), mip_out.c_str()));
    return 0;
}
