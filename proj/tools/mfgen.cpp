#include "mfgen/mfgen.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

mfgen::ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    auto cfg = path.empty() ? mfgen::ExperimentConfig{} : mfgen::ExperimentConfig::load(path);
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw mfgen::ConfigError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

void summarize(const mfgen::ExperimentResult& r, const fs::path& out) {
    for (const char* k : {"mmd2", "support_overlap", "cov_max_abs_error", "heldout_log_likelihood_mean",
                          "smoothed_decreasing_fraction", "passed"})
        if (r.metrics.contains(k)) std::cout << k << " = " << r.metrics[k].dump() << '\n';
    std::cout << "artifacts in " << out.string() << '\n';
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mean-field-game generative modeling laboratory"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(mfgen::version_string));

    std::string config, out = "out", resume, checkpoint, generated, reference, samples_csv, figure_out = "figure.ppm";
    std::vector<std::string> overrides;
    double bandwidth = 0.0;

    auto with_config = [&](CLI::App* sub, bool required) {
        auto* opt = sub->add_option("-c,--config", config, "key = value config file");
        if (required) opt->required()->check(CLI::ExistingFile);
        else opt->check(CLI::ExistingFile);
        sub->add_option("--set", overrides, "override a config entry, key=value (repeatable)");
        sub->add_option("-o,--out", out, "output directory")->capture_default_str();
    };

    auto* sgm = app.add_subcommand("train-sgm", "score matching with optional HJB regularization");
    with_config(sgm, true);
    sgm->add_option("--resume", resume, "continue from a training-state checkpoint")->check(CLI::ExistingFile);
    auto* pinn = app.add_subcommand("train-pinn", "HJB regularizer only (alpha0 = 0)");
    with_config(pinn, true);
    pinn->add_option("--resume", resume, "continue from a training-state checkpoint")->check(CLI::ExistingFile);
    auto* otflow = app.add_subcommand("train-otflow", "OT-flow potential CNF");
    with_config(otflow, true);
    auto* otbg = app.add_subcommand("train-otbg", "OT Boltzmann generator or generalized OT flow");
    with_config(otbg, true);
    auto* wgf = app.add_subcommand("run-wgf", "Langevin particle flow with free-energy trace");
    with_config(wgf, true);
    auto* sample = app.add_subcommand("sample", "draw samples from an SGM checkpoint");
    with_config(sample, false);
    sample->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
    auto* verify = app.add_subcommand("verify", "1-D optimality-condition verification suite");
    with_config(verify, false);
    auto* metrics = app.add_subcommand("metrics", "two-sample metrics of two ensemble CSVs");
    with_config(metrics, false);
    metrics->add_option("--generated", generated, "generated samples CSV")->required()->check(CLI::ExistingFile);
    metrics->add_option("--reference", reference, "reference samples CSV")->required()->check(CLI::ExistingFile);
    metrics->add_option("--bandwidth", bandwidth, "MMD kernel bandwidth (default: median heuristic)");
    auto* figure = app.add_subcommand("figure", "scatter raster of a samples CSV on [-3, 3]^2");
    figure->add_option("--samples", samples_csv, "samples CSV")->required()->check(CLI::ExistingFile);
    figure->add_option("-o,--out", figure_out, "output PPM file")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        const fs::path dir(out);
        if (figure->parsed()) {
            mfgen::write_scatter_ppm(figure_out, mfgen::read_ensemble_csv(samples_csv));
            std::cout << "wrote " << figure_out << '\n';
            return 0;
        }
        const auto cfg = load_config(config, overrides);
        fs::create_directories(dir);
        mfgen::ExperimentResult r;
        if (sgm->parsed() || pinn->parsed())
            r = mfgen::run_train_sgm(cfg, dir, pinn->parsed(), resume.empty() ? std::nullopt : std::optional<fs::path>(resume));
        else if (otflow->parsed() || otbg->parsed())
            r = mfgen::run_train_cnf(cfg, dir, otbg->parsed());
        else if (wgf->parsed())
            r = mfgen::run_wgf(cfg, dir);
        else if (sample->parsed())
            r = mfgen::run_sample(cfg, checkpoint, dir);
        else if (verify->parsed()) {
            r = mfgen::run_verify(cfg, dir);
            for (const auto& c : r.metrics["checks"])
                std::cout << (c["passed"].get<bool>() ? "PASS " : "FAIL ") << c["name"].get<std::string>() << " = "
                          << c["measured"].get<double>() << ' ' << c["comparison"].get<std::string>() << ' '
                          << c["tolerance"].get<double>() << '\n';
        } else if (metrics->parsed()) {
            r = mfgen::run_metrics(generated, reference, config.empty() ? std::nullopt : std::optional(cfg),
                                   bandwidth > 0.0 ? std::optional(bandwidth) : std::nullopt, dir);
        }
        summarize(r, dir);
        return r.passed ? 0 : 1;
    } catch (const mfgen::DivergedError& e) {
        std::cerr << "error: " << e.what() << " (step " << e.step() << ")\n";
        return 3;
    } catch (const mfgen::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
