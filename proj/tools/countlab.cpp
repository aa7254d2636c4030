// countlab: dataset generation, splitting, training, evaluation, sweeps and
// reports from a key = value configuration file.
//
// Exit codes: 0 success, 1 validation failure, 2 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "countlab/harness.hpp"

namespace fs = std::filesystem;
using namespace countlab;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;

struct Options {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out;
    std::string which = "train";
    std::string checkpoint;
    std::string cache;
};

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        out << text;
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
    }
    fs::rename(tmp, path);
}

int cmd_generate(const Options& o) {
    const ExperimentConfig c = load_config(o.config_path, o.overrides);
    Workspace ws;
    const auto& corpus = ws.corpus(c);
    std::shared_ptr<const Dataset> ds;
    if (o.which == "train")
        ds = corpus.train_pool;
    else if (o.which == "test")
        ds = corpus.test_pool;
    else if (o.which == "grounding")
        ds = corpus.grounding;
    else
        throw ConfigError("--which must be train, test or grounding");
    if (!ds) throw ConfigError("grounding set disabled (data.grounding_size = 0)");
    write_text(o.out, serialize_dataset(*ds));
    std::cout << "wrote " << ds->triplets.size() << " triplets to " << o.out << " (hash " << dataset_hash(*ds) << ")\n";
    return kOk;
}

int cmd_split(const Options& o) {
    const ExperimentConfig c = load_config(o.config_path, o.overrides);
    Workspace ws;
    RunRecord rec;
    const PreparedRun run = prepare_run(c, ws, rec);
    const DistributionStats stats = split_report(run.split, *run.corpus->index);
    write_text(fs::path(o.out) / "split.json", split_to_json(run.split).dump() + "\n");
    write_text(fs::path(o.out) / "stats.json", stats_to_json(stats).dump(2) + "\n");
    std::cout << "train " << run.split.train.size() << ", validation " << run.split.validation.size() << ", test "
              << run.split.test.size() << "\n";
    return kOk;
}

int cmd_train(const Options& o) {
    const ExperimentConfig c = load_config(o.config_path, o.overrides);
    Workspace ws;
    RunRecord rec;
    const PreparedRun run = prepare_run(c, ws, rec);
    const TrainResult trained =
        train(TrainingSet::from_split(run.split, *run.corpus->train_pool), run.model, c.trainer, c.seed);
    rec.history = trained.history;
    write_text(fs::path(o.out) / "checkpoint.json",
               checkpoint_to_json(trained.model, checkpoint_provenance(rec, c)).dump() + "\n");
    write_text(fs::path(o.out) / "history.csv", history_csv(trained.history));
    std::cout << "best validation accuracy " << trained.history.best_val_accuracy << " at epoch "
              << trained.history.best_epoch << "\n";
    return kOk;
}

int cmd_eval(const Options& o) {
    const ExperimentConfig c = load_config(o.config_path, o.overrides);
    Workspace ws;
    RunRecord rec;
    const PreparedRun run = prepare_run(c, ws, rec);
    std::ifstream in(o.checkpoint);
    if (!in) throw ConfigError("cannot read checkpoint " + o.checkpoint);
    const Model model = checkpoint_from_json(json::parse(in), run.model);
    evaluate_trained(c, run, model, rec);
    json out{{"validation", eval_report_to_json(rec.validation)}, {"test", eval_report_to_json(rec.test)}};
    out["grounding"] = rec.grounding ? grounding_to_json(*rec.grounding) : json(nullptr);
    write_report_files(o.out, {{"eval.json", out.dump(2) + "\n"}, {"per_label.csv", per_label_csv(rec.test.per_label)}});
    std::cout << "test accuracy " << rec.test.accuracy << ", RMSE " << rec.test.rmse << "\n";
    return kOk;
}

int cmd_sweep(const Options& o) {
    const ExperimentConfig c = load_config(o.config_path, o.overrides);
    Workspace ws;
    CellCache cache(ws, o.cache.empty() ? (fs::path(o.out).string() + ".cells") : o.cache);
    const SweepTable t = sweep_p(c, c.sweep_p, c.sweep_heads, c.seeds, cache, ws);
    write_report_files(o.out, {{"sweep.csv", sweep_csv(t)},
                               {"sweep.json", sweep_to_json(t).dump(2) + "\n"},
                               {"manifest.json", environment_manifest(json{{"config", config_to_json(c)}}).dump(2) + "\n"}});
    std::size_t failed = 0;
    for (const auto& r : t.rows) failed += !r.ok;
    std::cout << t.rows.size() << " cells (" << t.computed << " computed, " << failed << " failed)\n";
    return failed ? kRuntime : kOk;
}

int cmd_grounding(const Options& o) {
    const ExperimentConfig c = load_config(o.config_path, o.overrides);
    Workspace ws;
    CellCache cache(ws, o.cache);
    const GroundingStudy s = grounding_study(c, cache, ws);
    write_report_files(o.out, {{"grounding.csv", grounding_csv(s)},
                               {"grounding.json", grounding_study_to_json(s).dump(2) + "\n"},
                               {"manifest.json", environment_manifest(json{{"config", config_to_json(c)}}).dump(2) + "\n"}});
    std::cout << grounding_csv(s);
    return kOk;
}

int cmd_report(const Options& o) {
    const ExperimentConfig c = load_config(o.config_path, o.overrides);
    Workspace ws;
    const RunRecord r = run_experiment(c, ws);
    emit_report(r, o.out);
    std::cout << "test accuracy " << r.test.accuracy << " (validation " << r.validation.accuracy << "), record in "
              << o.out << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"countlab: synthetic counting experiments"};
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", o.config_path, "key = value configuration file");
        sub->add_option("-s,--set", o.overrides, "override, key=value (repeatable)");
    };

    auto* generate = app.add_subcommand("generate", "write a dataset as JSON lines");
    common(generate);
    generate->add_option("-o,--out", o.out, "output file")->required();
    generate->add_option("--which", o.which, "train, test or grounding");

    auto* split = app.add_subcommand("split", "apply the split strategy and write split + stats");
    common(split);
    split->add_option("-o,--out", o.out, "output directory")->required();

    auto* trainc = app.add_subcommand("train", "train and write a checkpoint");
    common(trainc);
    trainc->add_option("-o,--out", o.out, "output directory")->required();

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on validation, test and grounding sets");
    common(eval);
    eval->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
    eval->add_option("-o,--out", o.out, "output directory")->required();

    auto* sweep = app.add_subcommand("sweep", "run every (p, head, seed) cell");
    common(sweep);
    sweep->add_option("-o,--out", o.out, "output directory")->required();
    sweep->add_option("--cache", o.cache, "cell cache directory (default: <out>.cells)");

    auto* grounding = app.add_subcommand("grounding", "train lambda = 0 and 1 and compare grounding");
    common(grounding);
    grounding->add_option("-o,--out", o.out, "output directory")->required();
    grounding->add_option("--cache", o.cache, "cell cache directory");

    auto* report = app.add_subcommand("report", "run one experiment and emit its record");
    common(report);
    report->add_option("-o,--out", o.out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kValidation;
    }

    try {
        if (*generate) return cmd_generate(o);
        if (*split) return cmd_split(o);
        if (*trainc) return cmd_train(o);
        if (*eval) return cmd_eval(o);
        if (*sweep) return cmd_sweep(o);
        if (*grounding) return cmd_grounding(o);
        if (*report) return cmd_report(o);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const CheckpointMismatch& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kRuntime;
}
