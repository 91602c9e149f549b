#include "promptseg/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

using namespace promptseg;
namespace fs = std::filesystem;

namespace {

ExperimentConfig load_config(const std::string& path, int seed_override) {
    ExperimentConfig cfg = ExperimentConfig::from_file(path);
    if (seed_override >= 0) {
        cfg.dataset.scene.seed = static_cast<uint64_t>(seed_override);
        cfg.model.seed = static_cast<uint64_t>(seed_override) + 1;
        cfg.training.hyper.seed = static_cast<uint64_t>(seed_override) + 2;
        cfg.validate();
    }
    return cfg;
}

void print_groups(const PQResult& pq) {
    std::printf("%-8s %8s %8s %8s %8s\n", "group", "PQ", "SQ", "RQ", "classes");
    for (const std::string& g : {"base", "new", "all", "things", "stuff"}) {
        auto it = pq.groups.find(g);
        if (it == pq.groups.end()) continue;
        std::printf("%-8s %8s %8s %8s %8d\n", g.c_str(),
                    format_percent(it->second.pq).c_str(),
                    format_percent(it->second.sq).c_str(),
                    format_percent(it->second.rq).c_str(), it->second.classes);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual panoptic segmentation experiment harness"};
    app.require_subcommand(1);

    std::string config_path, output_dir, run_dir;
    bool resume = false;
    int seed_override = -1;
    int n_orderings = 5;
    std::vector<double> deltas = {0.0, 0.1, 0.25, 0.5, 0.75, 1.0};
    bool sw_shallow = true, sw_nomanip = true, sw_prompts = true;

    auto add_common = [&](CLI::App* sub, bool needs_output) {
        sub->add_option("--config", config_path, "experiment config file")->required();
        auto* out = sub->add_option("--output", output_dir, "output directory");
        if (needs_output) out->required();
        sub->add_flag("--resume", resume, "reuse finished checkpoints");
        sub->add_option("--seed", seed_override, "override all RNG seeds");
    };

    auto* gen = app.add_subcommand("generate-data", "materialize the configured dataset");
    add_common(gen, true);

    auto* runc = app.add_subcommand("run", "run the full continual scenario");
    add_common(runc, true);

    auto* sdelta = app.add_subcommand("sweep-delta",
                                      "re-score cached sidecars across delta values");
    add_common(sdelta, true);
    sdelta->add_option("--deltas", deltas, "delta values to score");

    auto* sorder = app.add_subcommand("sweep-orderings",
                                      "rerun the scenario across class orderings");
    add_common(sorder, true);
    sorder->add_option("--count", n_orderings, "number of orderings");

    auto* abl = app.add_subcommand("ablate", "component ablation table");
    add_common(abl, true);
    abl->add_flag("--shallow,!--no-shallow", sw_shallow, "include the shallow variant");
    abl->add_flag("--manipulation,!--no-manipulation-row", sw_nomanip,
                  "include the fixed-threshold row");
    abl->add_flag("--prompt-counts,!--no-prompt-counts", sw_prompts,
                  "include prompt-capacity rows");

    auto* ev = app.add_subcommand("eval", "evaluate the final checkpoint of a run");
    add_common(ev, true);

    auto* expc = app.add_subcommand("export-predictions",
                                    "write eval-split predictions as a COCO tree");
    add_common(expc, true);
    expc->add_option("--run", run_dir, "finished run directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        ExperimentConfig cfg = load_config(config_path, seed_override);

        if (gen->parsed()) {
            ExperimentConfig c = cfg;
            c.dataset.cache_dir = output_dir;  // materialize the native cache here
            LoadedData data = load_data(c);
            write_coco_panoptic((fs::path(output_dir) / "coco_train").string(),
                                data.catalog, data.train);
            write_coco_panoptic((fs::path(output_dir) / "coco_eval").string(),
                                data.catalog, data.eval);
            std::printf("wrote %zu train / %zu eval samples to %s\n", data.train.size(),
                        data.eval.size(), output_dir.c_str());
        } else if (runc->parsed()) {
            ReportBundle b = run_scenario(cfg, output_dir, resume);
            emit_plots(output_dir);
            std::printf("run %s (config %s)\n", output_dir.c_str(),
                        b.config_hash.c_str());
            print_groups(b.final_pq);
        } else if (sdelta->parsed()) {
            auto rows = sweep_delta(cfg, output_dir, deltas);
            emit_plots(output_dir);
            std::printf("%8s %8s %8s %8s\n", "delta", "base", "new", "all");
            for (const auto& r : rows)
                std::printf("%8.3f %8s %8s %8s\n", r.delta,
                            format_percent(r.base_pq).c_str(),
                            format_percent(r.new_pq).c_str(),
                            format_percent(r.all_pq).c_str());
        } else if (sorder->parsed()) {
            OrderingSummary s = sweep_orderings(cfg, output_dir, n_orderings, resume);
            emit_plots(output_dir);
            std::printf("all-PQ quartiles: q1=%s median=%s q3=%s over %zu orderings\n",
                        format_percent(s.q1).c_str(), format_percent(s.median).c_str(),
                        format_percent(s.q3).c_str(), s.rows.size());
        } else if (abl->parsed()) {
            AblateSwitches sw;
            sw.shallow = sw_shallow;
            sw.no_logit_manipulation = sw_nomanip;
            sw.prompt_counts = sw_prompts;
            auto rows = ablate(cfg, output_dir, sw, resume);
            std::printf("%-24s %8s %8s %8s %12s %14s\n", "variant", "base", "new", "all",
                        "trainable", "flops");
            for (const auto& r : rows)
                std::printf("%-24s %8s %8s %8s %12lld %14lld\n", r.name.c_str(),
                            format_percent(r.base_pq).c_str(),
                            format_percent(r.new_pq).c_str(),
                            format_percent(r.all_pq).c_str(), r.trainable_last_step,
                            r.flops);
        } else if (ev->parsed()) {
            ReportBundle b = evaluate_checkpoint(cfg, output_dir);
            print_groups(b.final_pq);
            if (b.final_miou) {
                auto it = b.final_miou->groups.find("all");
                if (it != b.final_miou->groups.end())
                    std::printf("mIoU(all) %s\n", format_percent(it->second).c_str());
            }
        } else if (expc->parsed()) {
            export_predictions(cfg, run_dir, output_dir);
            std::printf("wrote predictions to %s\n", output_dir.c_str());
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const CheckpointError& e) {
        std::fprintf(stderr, "checkpoint error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
