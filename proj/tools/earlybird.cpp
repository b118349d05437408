// Command-line front end: data generation, pretraining, the fine-tuning grid
// and report emission.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 some grid runs
// failed (listed in the results manifest).

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "earlybird/data.hpp"
#include "earlybird/encoder.hpp"
#include "earlybird/experiment.hpp"
#include "earlybird/runtime.hpp"

namespace fs = std::filesystem;
using namespace earlybird;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kPartial = 2;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int pretrain(const fs::path& config_path, const fs::path& corpus_path, const fs::path& out) {
    const auto cfg = experiment::load_config(config_path);
    const auto corpus = data::load_corpus(corpus_path);
    std::printf("pretraining L=%zu H=%zu S=%zu on %zu sequences, %zu epochs\n", cfg.model.layers, cfg.model.hidden,
                cfg.model.max_len, corpus.size(), cfg.pretrain.hyper.epochs);
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = encoder::mlm_pretrain(corpus, cfg.model, cfg.pretrain.hyper, cfg.pretrain.seed);
    for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) {
        std::printf("  epoch %2zu  loss %.4f\n", e + 1, r.epoch_loss[e]);
    }
    std::printf("masked %.3f of code tokens; %.1fs\n", r.mask_fraction(), seconds_since(t0));
    encoder::save_checkpoint(r.checkpoint, out);
    std::printf("wrote %s\n", out.string().c_str());
    return kOk;
}

int grid(const fs::path& config_path, const fs::path& ckpt_path, std::optional<fs::path> out, std::size_t jobs) {
    const auto cfg = experiment::load_config(config_path);
    const auto ckpt = encoder::load_checkpoint(ckpt_path);
    const auto dataset = experiment::load_data(cfg);
    for (const auto& w : dataset.warnings) {
        std::fprintf(stderr, "warning: %s\n", w.c_str());
    }
    const auto dir = out.value_or(cfg.output);
    std::printf("grid: %zu specs x %zu seeds on %s, %zu job(s) -> %s\n", cfg.specs.size(), cfg.train.seeds.size(),
                dataset.name.c_str(), jobs, dir.string().c_str());
    experiment::GridOptions opt;
    opt.jobs = jobs;
    opt.progress = [](const std::string& line) {
        std::printf("  %s\n", line.c_str());
        std::fflush(stdout);
    };
    const auto t0 = std::chrono::steady_clock::now();
    const auto s = experiment::run_grid(cfg, ckpt, dataset, dir, opt);
    std::printf("trained %zu, reused %zu, failed %zu in %.1fs\n", s.trained, s.skipped, s.failures.size(),
                seconds_since(t0));
    return s.ok() ? kOk : kPartial;
}

int report(const fs::path& results, const std::string& metric, const fs::path& prefix) {
    const auto store = experiment::ResultsStore::open(results);
    experiment::write_reports(store, experiment::parse_metric(metric), prefix);
    for (const char* suffix : {"_heatmap.csv", "_heatmap.md", "_pruning.csv", "_pruning.md"}) {
        std::printf("wrote %s%s\n", prefix.string().c_str(), suffix);
    }
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    tune_process(argv);

    CLI::App app{"Combinations of early encoder layers for code classification"};
    app.require_subcommand(1);

    fs::path config, corpus, out, ckpt, results;
    std::size_t jobs = 1;
    std::string metric = "accuracy";

    auto* pre = app.add_subcommand("pretrain", "Masked-language-model pretraining");
    pre->add_option("--config", config, "Experiment config (YAML)")->required()->check(CLI::ExistingFile);
    pre->add_option("--corpus", corpus, "One sequence per line")->required()->check(CLI::ExistingFile);
    pre->add_option("--out", out, "Checkpoint to write")->required();

    std::optional<fs::path> grid_out;
    auto* grd = app.add_subcommand("grid", "Fine-tune every (combination, seed) of the config");
    grd->add_option("--config", config, "Experiment config (YAML)")->required()->check(CLI::ExistingFile);
    grd->add_option("--ckpt", ckpt, "Pretrained checkpoint")->required()->check(CLI::ExistingFile);
    grd->add_option("--out", grid_out, "Results directory (default: grid.output of the config)");
    grd->add_option("--jobs", jobs, "Concurrent runs; 1 gives clean epoch timings")->check(CLI::PositiveNumber);

    auto* rep = app.add_subcommand("report", "Heatmap and pruning tables from a results directory");
    rep->add_option("--results", results, "Results directory")->required()->check(CLI::ExistingDirectory);
    rep->add_option("--metric", metric, "accuracy or f1w")->check(CLI::IsMember({"accuracy", "f1w"}));
    rep->add_option("--out", out, "Output prefix")->required();

    data::SyntheticTaskSpec task;
    std::string task_name = "paren3";
    std::size_t max_len = 64;
    auto* gd = app.add_subcommand("gen-data", "Write a synthetic classification dataset");
    gd->add_option("--task", task_name, "paren3 or swapbug2")->check(CLI::IsMember({"paren3", "swapbug2"}));
    gd->add_option("--train", task.train);
    gd->add_option("--valid", task.valid);
    gd->add_option("--test", task.test);
    gd->add_option("--seed", task.seed);
    gd->add_option("--max-len", max_len, "Sequence length used for the truncation report");
    gd->add_option("--out", out, "Dataset directory")->required();

    std::size_t corpus_size = 1000;
    std::uint64_t corpus_seed = 7;
    auto* gc = app.add_subcommand("gen-corpus", "Write a synthetic pretraining corpus");
    gc->add_option("--size", corpus_size);
    gc->add_option("--seed", corpus_seed);
    gc->add_option("--out", out, "Corpus file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kUsage;
    }

    try {
        if (*pre) {
            return pretrain(config, corpus, out);
        }
        if (*grd) {
            return grid(config, ckpt, grid_out, jobs);
        }
        if (*rep) {
            return report(results, metric, out);
        }
        if (*gd) {
            task.kind = data::parse_task_kind(task_name);
            const auto ds = data::gen_synthetic(task, max_len);
            data::save_dataset(ds, out);
            std::printf("wrote %s (%zu/%zu/%zu)\n", out.string().c_str(), ds.train.size(), ds.valid.size(),
                        ds.test.size());
            return kOk;
        }
        if (*gc) {
            data::save_corpus(out, data::gen_corpus(corpus_size, corpus_seed));
            std::printf("wrote %zu sequences to %s\n", corpus_size, out.string().c_str());
            return kOk;
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    }
    return kUsage;
}
