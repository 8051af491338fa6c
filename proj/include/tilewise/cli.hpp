#pragma once

// `tilewise` command line: one binary, subcommands sharing the experiment
// config schema. run_cli() is usable in-process (tests call it directly).

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tilewise/config.hpp"
#include "tilewise/harness.hpp"
#include "tilewise/image_io.hpp"
#include "tilewise/metrics.hpp"
#include "tilewise/xai.hpp"

namespace tilewise {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

/// Environment variable naming the output directory when neither the
/// config nor --out does.
inline constexpr const char* kOutEnv = "TILEWISE_XAI_OUT";

namespace detail {

struct CommonArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::size_t> threads;
    std::vector<std::string> overrides;
    bool quiet = false;
};

inline void add_common(CLI::App* sub, CommonArgs& a) {
    sub->add_option("--config", a.config, "Experiment config (TOML)")->check(CLI::ExistingFile);
    sub->add_option("--seed", a.seed, "Experiment seed (experiment.seed)");
    sub->add_option("--out", a.out, std::string("Output directory (experiment.out; fallback $") + kOutEnv + ")");
    sub->add_option("--threads", a.threads, "Worker cap, 0 = all cores, 1 = serial (experiment.threads)");
    sub->add_flag("--quiet,-q", a.quiet, "Suppress progress messages");
    sub->add_option("overrides", a.overrides, "Config overrides, section.key=value");
}

inline ConfigValue int_list_value(const std::string& csv) {
    ConfigArray a;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const long long v = std::stoll(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            a.push_back({static_cast<std::int64_t>(v)});
        } catch (const std::exception&) {
            throw config_error("--layers expects comma-separated integers, got '" + csv + "'");
        }
    }
    if (a.empty()) throw config_error("--layers must not be empty");
    return {a};
}

/// File config, then key=value overrides, then dedicated flags; the output
/// directory falls back to $TILEWISE_XAI_OUT when nothing sets it.
inline ExperimentConfig resolve_config(const CommonArgs& a, const ConfigTable& flag_values) {
    ConfigTable table;
    if (!a.config.empty()) table = load_config_file(a.config);
    for (const auto& o : a.overrides) {
        auto [k, v] = parse_override(o);
        table[k] = v;
    }
    for (const auto& [k, v] : flag_values) table[k] = v;
    if (a.seed) table["experiment.seed"] = to_config_value(*a.seed);
    if (a.threads) table["experiment.threads"] = to_config_value(*a.threads);
    if (a.out) {
        table["experiment.out"] = to_config_value(*a.out);
    } else if (!table.count("experiment.out")) {
        if (const char* env = std::getenv(kOutEnv); env && *env) table["experiment.out"] = to_config_value(std::string(env));
    }
    return config_from_table(table);
}

inline std::string fixed6(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6) << v;
    return os.str();
}

}  // namespace detail

/// Parses argv and runs one subcommand. Results go to `out`, progress and
/// errors to `err`. Errors print one line `error: <category>: <message>`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Contextual explanations for multi-instance tile classifiers on synthetic slides", "tilewise"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Help for every subcommand");

    detail::CommonArgs common;
    std::optional<double> t;
    std::optional<std::string> agg;
    std::optional<std::string> layers;
    std::optional<std::string> shift;
    std::string tile;
    std::string checkpoint;
    std::size_t trials = 200;
    std::size_t size = 64;
    std::uint64_t mc_seed = 1234;

    auto* gen = app.add_subcommand("gen-data", "Generate train/val/test slides with masks and a manifest");
    auto* train_mil_cmd = app.add_subcommand("train-mil", "Pre-train the backbone and train the MIL classifier");
    auto* train_seg_cmd = app.add_subcommand("train-seg", "Train the segmentation network (dice loss)");
    auto* explain_cmd = app.add_subcommand("explain", "Explain one tile with a saved classifier");
    auto* eval_cmd = app.add_subcommand("evaluate", "Score explanations on the test split");
    auto* stab_cmd = app.add_subcommand("stability", "Shifted-grid stability study on the test split");
    auto* base_cmd = app.add_subcommand("baseline", "Uniform-noise baseline: closed form and Monte Carlo check");

    for (auto* sub : {gen, train_mil_cmd, train_seg_cmd, explain_cmd, eval_cmd, stab_cmd}) detail::add_common(sub, common);

    for (auto* sub : {explain_cmd, eval_cmd, stab_cmd}) {
        sub->add_option("--agg", agg, "Channel aggregation (xai.aggregator)")->check(CLI::IsMember({"abs", "mean", "var"}));
        sub->add_option("--layers", layers, "Comma-separated conv layers (xai.layers)");
    }
    explain_cmd->add_option("--t", t, "Threshold (xai.thresholds = [t])");
    eval_cmd->add_option("--t", t, "Threshold (xai.thresholds = [t])");
    stab_cmd->add_option("--t", t, "Threshold (stability.threshold)");
    stab_cmd->add_option("--shift", shift, "Compare the base grid with one shifted grid only (stability.shifts)")
        ->check(CLI::IsMember({"01", "10", "11"}));
    explain_cmd->add_option("--tile", tile, "RGB PNG tile of the classifier's input size")->required();
    explain_cmd->add_option("--checkpoint", checkpoint, "Classifier checkpoint stem (default <out>/checkpoints/classifier)");

    base_cmd->add_option("--t", t, "Threshold in [0,1)")->required();
    base_cmd->add_option("--trials", trials, "Monte Carlo trials")->capture_default_str();
    base_cmd->add_option("--size", size, "Tile side L for the Monte Carlo check")->capture_default_str();
    base_cmd->add_option("--mc-seed", mc_seed, "Monte Carlo seed")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: usage: " << e.what() << "\n";
        return kExitConfig;
    }

    try {
        if (base_cmd->parsed()) {
            const double tv = *t;
            if (!(tv >= 0.0 && tv < 1.0)) throw config_error("--t must lie in [0,1)");
            if (trials == 0 || size == 0) throw config_error("--trials and --size must be positive");
            const auto cf = uniform_baseline(tv);
            out << "t=" << detail::fixed6(tv) << " iou=" << detail::fixed6(cf.iou) << " precision=" << detail::fixed6(cf.precision)
                << "\n";
            const auto mc = uniform_baseline_mc(tv, size, trials, mc_seed);
            const bool ok = std::abs(mc.iou_mean - cf.iou) <= 3 * mc.iou_stderr &&
                            std::abs(mc.precision_mean - cf.precision) <= 3 * mc.precision_stderr;
            out << "mc trials=" << mc.trials << " size=" << size << " iou=" << detail::fixed6(mc.iou_mean)
                << " iou_se=" << detail::fixed6(mc.iou_stderr) << " precision=" << detail::fixed6(mc.precision_mean)
                << " precision_se=" << detail::fixed6(mc.precision_stderr) << " skipped=" << mc.skipped
                << " within_3se=" << (ok ? "yes" : "no") << "\n";
            return kExitOk;
        }

        ConfigTable flags;
        if (agg) flags["xai.aggregator"] = to_config_value(*agg);
        if (layers) flags["xai.layers"] = detail::int_list_value(*layers);
        if (t) {
            if (stab_cmd->parsed()) {
                flags["stability.threshold"] = to_config_value(*t);
            } else {
                flags["xai.thresholds"] = to_config_value(std::vector<double>{*t});
            }
        }
        if (shift) flags["stability.shifts"] = to_config_value(std::vector<std::string>{*shift});
        const ExperimentConfig cfg = detail::resolve_config(common, flags);
        const LogFn log = common.quiet ? silent_log() : stderr_log();
        write_resolved_config(cfg);

        if (gen->parsed()) {
            const auto s = export_dataset(cfg, log);
            out << "slides=" << s.slides << " positives=" << s.positives << " tiles=" << s.tiles << "\n";
        } else if (train_mil_cmd->parsed()) {
            const auto r = train_mil(cfg, log);
            save_classifier(cfg, r);
            out << "classifier saved to " << (checkpoint_dir(cfg) / "classifier").string();
            if (!r.mil_log.empty() && r.mil_log.back().val_metric) out << " val_slide_auc=" << detail::num(*r.mil_log.back().val_metric);
            out << "\n";
        } else if (train_seg_cmd->parsed()) {
            const auto r = train_segnet(cfg, log);
            save_segnet(cfg, r);
            out << "segnet saved to " << (checkpoint_dir(cfg) / "segnet").string();
            if (!r.log.empty() && r.log.back().val_metric) out << " val_pixel_auc=" << detail::num(*r.log.back().val_metric);
            out << "\n";
        } else if (explain_cmd->parsed()) {
            namespace fs = std::filesystem;
            const fs::path stem = checkpoint.empty() ? checkpoint_dir(cfg) / "classifier" : fs::path(checkpoint);
            fs::path manifest = stem;
            manifest += ".json";
            if (!fs::exists(manifest)) throw io_error("no classifier checkpoint at " + stem.string() + " (run train-mil first)");
            const TileClassifier model = TileClassifier::load(stem);
            const Tensor image = read_png(tile);
            const XaiConfig xcfg = cfg.xai_config();
            const Explanation e = explain_tile(model, image, xcfg);
            const fs::path dir = fs::path(cfg.out) / "explain";
            const std::string base = fs::path(tile).stem().string();
            const Tensor heat = heatmap_bytes(e.normalized);
            write_pgm(dir / (base + "_heatmap.pgm"), heat);
            Tensor rgb({heat.extent(0), heat.extent(1), 3});
            for (std::size_t i = 0; i < heat.size(); ++i) {
                for (std::size_t c = 0; c < 3; ++c) rgb[3 * i + c] = heat[i];
            }
            write_png(dir / (base + "_heatmap.png"), rgb);
            nlohmann::ordered_json rec;
            rec["schema"] = "tilewise.explain/1";
            rec["tile"] = fs::path(tile).filename().string();
            rec["prediction"] = e.score;
            rec["xai"] = xcfg.description();
            rec["xai_digest"] = xcfg.digest();
            rec["masks"] = nlohmann::ordered_json::array();
            for (std::size_t i = 0; i < e.masks.size(); ++i) {
                std::ostringstream name;
                name << base << "_mask_t" << std::fixed << std::setprecision(2) << xcfg.thresholds[i] << ".pgm";
                Tensor bytes = e.masks[i].values;
                for (auto& v : bytes.values()) v *= 255.0;
                write_pgm(dir / name.str(), bytes);
                rec["masks"].push_back({{"threshold", xcfg.thresholds[i]}, {"file", name.str()}, {"popcount", e.masks[i].popcount()}});
            }
            detail::write_text(dir / (base + ".json"), rec.dump(2) + "\n");
            out << "prediction=" << detail::fixed6(e.score) << " heatmap=" << (dir / (base + "_heatmap.png")).string() << "\n";
        } else if (eval_cmd->parsed()) {
            const TileClassifier model = ensure_classifier(cfg, log);
            const SegNet segnet = ensure_segnet(cfg, log);
            const auto report = evaluate(cfg, model, segnet, log);
            write_evaluation(cfg, report);
            for (const auto& w : report.warnings) err << "warning: " << w << "\n";
            out << "tiles=" << report.tiles.size() << " records=" << report.records.size()
                << " slide_auc=" << (report.slide_auc ? detail::fixed6(*report.slide_auc) : std::string("n/a")) << "\n";
        } else if (stab_cmd->parsed()) {
            const TileClassifier model = ensure_classifier(cfg, log);
            const auto report = run_stability_study(cfg, model, log);
            write_stability(cfg, report);
            for (const auto& w : report.warnings) err << "warning: " << w << "\n";
            out << "pairs=" << report.pairs.size() << " included=" << report.included
                << " below_floor=" << report.below_floor << " empty_union=" << report.empty_union << "\n";
            for (const auto& b : report.by_overlap) {
                out << "overlap[" << detail::num(b.lo) << "," << detail::num(b.hi) << ") n=" << b.count
                    << " mean_iou=" << (b.mean ? detail::fixed6(*b.mean) : std::string("n/a")) << "\n";
            }
        }
        return kExitOk;
    } catch (const config_error& e) {
        err << "error: " << e.category() << ": " << e.what() << "\n";
        return kExitConfig;
    } catch (const error& e) {
        err << "error: " << e.category() << ": " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        err << "error: runtime: " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace tilewise
