// Command-line front end: phantom dataset generation, training, evaluation,
// uncertainty-map emission. Every run is reproducible from its echoed
// config and seed alone.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "tucl/phantom.hpp"
#include "tucl/reporting.hpp"
#include "tucl/trainer.hpp"
#include "tucl/uncertainty.hpp"

namespace fs = std::filesystem;
using tucl::json;

namespace {

struct RunConfig {
    tucl::TrainConfig train;
    tucl::PhantomSpec phantom;
    double spacing_mm = 1.0;

    json to_json() const {
        json j;
        j["train"] = train.to_json();
        j["phantom"] = phantom.to_json();
        j["spacing_mm"] = spacing_mm;
        return j;
    }

    static RunConfig from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw tucl::io_error("cannot open config file: " + path);
        json j;
        try {
            in >> j;
        } catch (const std::exception& e) {
            throw tucl::io_error("bad config file " + path + ": " + e.what());
        }
        RunConfig c;
        if (j.contains("train")) c.train = tucl::TrainConfig::from_json(j["train"]);
        if (j.contains("phantom")) c.phantom = tucl::PhantomSpec::from_json(j["phantom"]);
        c.spacing_mm = j.value("spacing_mm", c.spacing_mm);
        return c;
    }
};

void echo_config(const RunConfig& cfg, const fs::path& out_dir) {
    tucl::atomic_write(out_dir / "config.json", cfg.to_json().dump(2) + "\n");
}

void ensure_out_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir))
        throw tucl::param_error("output directory is not writable: " + dir.string());
    // Probe writability early so failures map to a usage error.
    const fs::path probe = dir / ".write_probe";
    std::ofstream f(probe);
    if (!f) throw tucl::param_error("output directory is not writable: " + dir.string());
    f.close();
    fs::remove(probe, ec);
}

int cmd_gen(const std::string& out, int n, double labeled_fraction, uint64_t seed,
            std::vector<int64_t> dims, const std::string& config_file) {
    RunConfig cfg = config_file.empty() ? RunConfig{} : RunConfig::from_file(config_file);
    if (!dims.empty()) {
        if (dims.size() != 3) throw tucl::param_error("--dims expects W H D");
        cfg.phantom.dims = {dims[0], dims[1], dims[2]};
        for (int i = 0; i < 3; ++i)
            cfg.phantom.center[static_cast<size_t>(i)] = static_cast<double>(dims[static_cast<size_t>(i)]) / 2.0;
    }
    ensure_out_dir(out);
    tucl::Dataset ds = tucl::make_dataset(n, cfg.phantom, labeled_fraction, seed);
    tucl::write_dataset(ds, cfg.phantom, labeled_fraction, seed, out);
    echo_config(cfg, out);
    std::cout << "wrote " << ds.size() << " cases to " << out << "\n";
    return 0;
}

int cmd_train(const std::string& data, const std::string& config_file, const std::string& out,
              bool no_tpa, bool no_dur, std::optional<uint64_t> seed) {
    RunConfig cfg = config_file.empty() ? RunConfig{} : RunConfig::from_file(config_file);
    if (no_tpa) cfg.train.use_tpa = false;
    if (no_dur) cfg.train.use_dur = false;
    if (seed) cfg.train.seed = *seed;
    if (!fs::exists(fs::path(data) / "dataset.json"))
        throw tucl::param_error("dataset not found in " + data);
    ensure_out_dir(out);
    echo_config(cfg, out);

    tucl::Dataset ds = tucl::load_dataset(data);
    tucl::TrainResult res = tucl::train(ds, cfg.train);
    const std::string hash = tucl::config_hash(cfg.to_json());
    tucl::write_train_log_csv(res.log, fs::path(out) / "train_log.csv", hash);
    tucl::write_timing_csv(res.log, fs::path(out) / "timing.csv", hash);
    tucl::save_checkpoint(res.model, fs::path(out) / "checkpoint", cfg.train.steps,
                          cfg.train.seed);
    std::cout << "trained " << cfg.train.steps << " steps; final L_total="
              << res.log.steps.back().l_total << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& out,
             const std::string& drop, const std::string& config_file) {
    RunConfig cfg = config_file.empty() ? RunConfig{} : RunConfig::from_file(config_file);
    if (!fs::exists(fs::path(data) / "dataset.json"))
        throw tucl::param_error("dataset not found in " + data);
    ensure_out_dir(out);
    echo_config(cfg, out);

    tucl::Checkpoint checkpoint = tucl::load_checkpoint(ckpt);
    tucl::Dataset ds = tucl::load_dataset(data);
    std::optional<std::string> drop_opt;
    if (!drop.empty()) drop_opt = drop;
    tucl::EvalReport rep =
        tucl::evaluate_model(checkpoint.model, ds, cfg.spacing_mm, drop_opt);
    const std::string hash = tucl::config_hash(cfg.to_json());
    tucl::write_report_csv(rep, fs::path(out) / "report.csv", hash);
    tucl::write_agreement_csv(rep, fs::path(out) / "agreement.csv", hash);
    std::cout << "mean Dice (ET/WT/TC/Ave): " << rep.mean_dice[2] << " " << rep.mean_dice[0]
              << " " << rep.mean_dice[1] << " " << rep.ave_dice << "\n";
    return 0;
}

int cmd_uncertainty(const std::string& ckpt, const std::string& case_path, int T, uint64_t seed,
                    const std::string& out, const std::string& config_file) {
    RunConfig cfg = config_file.empty() ? RunConfig{} : RunConfig::from_file(config_file);
    if (T < 2) throw tucl::param_error("--T must be >= 2");
    ensure_out_dir(out);
    echo_config(cfg, out);

    tucl::Checkpoint checkpoint = tucl::load_checkpoint(ckpt);
    tucl::MultiContrastVolume vol = tucl::read_multicontrast_volume(case_path);
    tucl::McResult mc = tucl::mc_uncertainty(checkpoint.model, vol, T, seed);
    tucl::UncertaintyField field = tucl::make_field(
        std::move(mc.u), T, cfg.train.delta_mode, cfg.train.delta_param);

    const tucl::Dims3 dm = vol.dims();
    tucl::Tensor u4 = tucl::Tensor::from_data({1, dm.w, dm.h, dm.d}, field.u.data());
    tucl::write_field(u4, {"U"}, fs::path(out) / "uncertainty");

    double mean_u = 0.0, max_u = 0.0;
    for (double v : field.u.data()) {
        mean_u += v;
        max_u = std::max(max_u, v);
    }
    mean_u /= static_cast<double>(field.u.size());

    const std::string hash = tucl::config_hash(cfg.to_json());
    std::ostringstream os;
    os << tucl::csv_comment(hash);
    os << "mean_U,max_U,core_voxels,boundary_voxels,delta,T\n";
    os << tucl::fmt(mean_u) << ',' << tucl::fmt(max_u) << ',' << field.core_count() << ','
       << field.boundary_count() << ',' << tucl::fmt(field.part.delta) << ',' << T << "\n";
    tucl::atomic_write(fs::path(out) / "summary.csv", os.str());
    std::cout << "max U = " << max_u << ", delta = " << field.part.delta << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"TUCL multi-contrast segmentation toolkit"};
    app.require_subcommand(1);

    std::string config_file;
    app.add_option("--config", config_file, "JSON config file (flags override file values)");

    auto* gen = app.add_subcommand("gen", "generate a phantom dataset");
    std::string gen_out;
    int gen_n = 16;
    double gen_fraction = 1.0;
    uint64_t gen_seed = 1;
    std::vector<int64_t> gen_dims;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--n", gen_n, "number of cases");
    gen->add_option("--labeled-fraction", gen_fraction, "fraction of cases with masks");
    gen->add_option("--seed", gen_seed, "root seed");
    gen->add_option("--dims", gen_dims, "volume dims W H D")->expected(3);

    auto* tr = app.add_subcommand("train", "train a model");
    std::string tr_data, tr_out;
    bool tr_no_tpa = false, tr_no_dur = false;
    std::optional<uint64_t> tr_seed;
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_flag("--no-tpa", tr_no_tpa, "disable the prompt attention module");
    tr->add_flag("--no-dur", tr_no_dur, "disable the uncertainty refinement loss");
    tr->add_option("--seed", tr_seed, "override the config seed");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ev_ckpt, ev_data, ev_out, ev_drop;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint base path")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--out", ev_out, "output directory")->required();
    ev->add_option("--drop", ev_drop, "zero one modality before inference (T1|T2|T1ce|FLAIR)");

    auto* un = app.add_subcommand("uncertainty", "emit an uncertainty map for one case");
    std::string un_ckpt, un_case, un_out;
    int un_t = 8;
    uint64_t un_seed = 1;
    un->add_option("--ckpt", un_ckpt, "checkpoint base path")->required();
    un->add_option("--case", un_case, "volume base path")->required();
    un->add_option("--T", un_t, "number of stochastic passes");
    un->add_option("--seed", un_seed, "sampling seed");
    un->add_option("--out", un_out, "output directory")->required();

    try {
        app.parse(argc, argv);
        if (gen->parsed())
            return cmd_gen(gen_out, gen_n, gen_fraction, gen_seed, gen_dims, config_file);
        if (tr->parsed())
            return cmd_train(tr_data, config_file, tr_out, tr_no_tpa, tr_no_dur, tr_seed);
        if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_out, ev_drop, config_file);
        if (un->parsed())
            return cmd_uncertainty(un_ckpt, un_case, un_t, un_seed, un_out, config_file);
        return 2;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const tucl::param_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const tucl::io_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
}
