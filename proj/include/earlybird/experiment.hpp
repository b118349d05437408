#pragma once

// Experiment orchestration: YAML configuration, a resumable results store,
// the fine-tuning grid and the two report tables built from the store.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include "earlybird/combiner.hpp"
#include "earlybird/data.hpp"
#include "earlybird/encoder.hpp"
#include "earlybird/error.hpp"
#include "earlybird/stats.hpp"
#include "earlybird/trainer.hpp"

namespace earlybird::experiment {

namespace fs = std::filesystem;
using combiner::CombinationSpec;
using trainer::RunResult;

// ---------------------------------------------------------------------------
// Configuration

struct DataSource {
    fs::path path; ///< dataset directory; empty selects the synthetic task
    data::SyntheticTaskSpec synthetic;

    bool operator==(const DataSource&) const = default;
};

struct PretrainSettings {
    encoder::MlmHyper hyper;
    std::uint64_t seed = 0;
};

struct ExperimentConfig {
    encoder::EncoderConfig model;
    PretrainSettings pretrain;
    trainer::TrainHyper train;
    DataSource data;
    std::vector<CombinationSpec> specs; ///< baseline first
    fs::path output = "results";
};

/// Desk profile with the full combination grid.
inline ExperimentConfig default_config() {
    ExperimentConfig c;
    c.specs = combiner::all_specs(c.model.layers);
    return c;
}

namespace detail {

inline std::string where(const std::string& source, const YAML::Mark& m) {
    if (m.is_null()) {
        return source;
    }
    return source + ":" + std::to_string(m.line + 1) + ":" + std::to_string(m.column + 1);
}

template <class T>
constexpr const char* kind_name() {
    if constexpr (std::is_same_v<T, bool>) {
        return "a boolean";
    } else if constexpr (std::is_unsigned_v<T>) {
        return "a non-negative integer";
    } else if constexpr (std::is_floating_point_v<T>) {
        return "a number";
    } else {
        return "a string";
    }
}

/// One mapping of the config file. Keys that were never asked for are
/// reported by finish().
class Section {
public:
    Section(const std::string& source, std::string name, const YAML::Node& node)
        : source_(source), name_(std::move(name)), node_(node) {
        if (node_ && !node_.IsNull() && !node_.IsMap()) {
            throw ConfigError(where(source_, node_.Mark()) + ": section '" + name_ + "' must be a mapping");
        }
    }

    std::string field(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }

    const YAML::Node child(const std::string& key) {
        known_.insert(key);
        if (!node_ || !node_.IsMap()) {
            return YAML::Node();
        }
        const YAML::Node& map = node_;
        return map[key];
    }

    template <class T>
    void get(const std::string& key, T& out) {
        const auto n = child(key);
        if (!n || n.IsNull()) {
            return;
        }
        try {
            if constexpr (std::is_unsigned_v<T>) {
                if (n.IsScalar() && n.Scalar().starts_with('-')) {
                    throw YAML::BadConversion(n.Mark());
                }
            }
            out = n.as<T>();
        } catch (const YAML::Exception&) {
            throw ConfigError(where(source_, n.Mark()) + ": field '" + field(key) + "' expects " + kind_name<T>());
        }
    }

    template <class T>
    void get_list(const std::string& key, std::vector<T>& out) {
        const auto n = child(key);
        if (!n || n.IsNull()) {
            return;
        }
        if (!n.IsSequence()) {
            throw ConfigError(where(source_, n.Mark()) + ": field '" + field(key) + "' expects a list");
        }
        out.clear();
        for (const auto& item : n) {
            try {
                if constexpr (std::is_unsigned_v<T>) {
                    if (item.IsScalar() && item.Scalar().starts_with('-')) {
                        throw YAML::BadConversion(item.Mark());
                    }
                }
                out.push_back(item.as<T>());
            } catch (const YAML::Exception&) {
                throw ConfigError(where(source_, item.Mark()) + ": field '" + field(key) + "' expects a list of " +
                                  kind_name<T>() + " values");
            }
        }
    }

    void finish() const {
        if (!node_ || !node_.IsMap()) {
            return;
        }
        for (const auto& kv : node_) {
            const auto key = kv.first.as<std::string>();
            if (!known_.contains(key)) {
                throw ConfigError(where(source_, kv.first.Mark()) + ": unknown field '" + field(key) + "'");
            }
        }
    }

    const std::string& source() const { return source_; }
    YAML::Mark mark() const { return node_ ? node_.Mark() : YAML::Mark::null_mark(); }

private:
    const std::string& source_;
    std::string name_;
    YAML::Node node_;
    std::set<std::string> known_;
};

} // namespace detail

/// Parses the YAML text of a config. Every field is optional; absent fields
/// keep the desk-profile defaults and an absent spec list means the full
/// grid. The baseline is inserted when the list omits it.
inline ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>") {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::ParserException& e) {
        throw ConfigError(detail::where(source, e.mark) + ": " + e.msg);
    }
    ExperimentConfig c;
    detail::Section top(source, "", root);

    detail::Section model(source, "model", top.child("model"));
    model.get("layers", c.model.layers);
    model.get("hidden", c.model.hidden);
    model.get("max_len", c.model.max_len);
    model.get("heads", c.model.heads);
    model.get("ffn", c.model.ffn);
    model.get("dropout", c.model.dropout);
    model.finish();
    try {
        c.model.validate();
    } catch (const ContractError& e) {
        throw ConfigError(detail::where(source, model.mark()) + ": model: " + e.what());
    }

    detail::Section pre(source, "pretrain", top.child("pretrain"));
    pre.get("epochs", c.pretrain.hyper.epochs);
    pre.get("batch_size", c.pretrain.hyper.batch_size);
    pre.get("learning_rate", c.pretrain.hyper.lr);
    pre.get("mask_rate", c.pretrain.hyper.mask_rate);
    pre.get("seed", c.pretrain.seed);
    pre.finish();
    if (c.pretrain.hyper.epochs == 0 || c.pretrain.hyper.batch_size == 0) {
        throw ConfigError(detail::where(source, pre.mark()) + ": pretrain: epochs and batch_size must be positive");
    }
    if (!(c.pretrain.hyper.mask_rate > 0.0 && c.pretrain.hyper.mask_rate < 1.0)) {
        throw ConfigError(detail::where(source, pre.mark()) + ": pretrain: mask_rate must lie in (0, 1)");
    }

    detail::Section train(source, "train", top.child("train"));
    train.get("batch_size", c.train.batch_size);
    train.get("learning_rate", c.train.learning_rate);
    train.get("epochs", c.train.epochs);
    train.get("p_drop", c.train.p_drop);
    train.get_list("seeds", c.train.seeds);
    train.get("eval_batch_size", c.train.eval_batch_size);
    train.finish();
    try {
        c.train.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(detail::where(source, train.mark()) + ": train: " + e.what());
    }
    if (std::set(c.train.seeds.begin(), c.train.seeds.end()).size() != c.train.seeds.size()) {
        throw ConfigError(detail::where(source, train.mark()) + ": train: seeds repeat");
    }

    detail::Section dat(source, "data", top.child("data"));
    std::string path;
    dat.get("path", path);
    c.data.path = path;
    detail::Section syn(source, "data.synthetic", dat.child("synthetic"));
    std::string task = std::string(data::to_string(c.data.synthetic.kind));
    syn.get("task", task);
    syn.get("train", c.data.synthetic.train);
    syn.get("valid", c.data.synthetic.valid);
    syn.get("test", c.data.synthetic.test);
    syn.get("seed", c.data.synthetic.seed);
    syn.get("max_raw_length", c.data.synthetic.max_raw_length);
    syn.finish();
    dat.finish();
    try {
        c.data.synthetic.kind = data::parse_task_kind(task);
    } catch (const InputError& e) {
        throw ConfigError(detail::where(source, syn.mark()) + ": data.synthetic.task: " + e.what());
    }

    detail::Section grid(source, "grid", top.child("grid"));
    const auto specs = grid.child("specs");
    std::string output = c.output.string();
    grid.get("output", output);
    c.output = output;
    grid.finish();
    top.finish();

    if (!specs || specs.IsNull() || (specs.IsScalar() && specs.Scalar() == "full")) {
        c.specs = combiner::all_specs(c.model.layers);
        return c;
    }
    if (!specs.IsSequence()) {
        throw ConfigError(detail::where(source, specs.Mark()) + ": field 'grid.specs' expects a list or 'full'");
    }
    std::set<std::string> seen;
    for (const auto& item : specs) {
        const std::string at = detail::where(source, item.Mark());
        CombinationSpec s;
        try {
            s = combiner::parse_spec(item.as<std::string>());
            s.validate(c.model.layers);
        } catch (const YAML::Exception&) {
            throw ConfigError(at + ": field 'grid.specs' expects strings");
        } catch (const ConfigError& e) {
            throw ConfigError(at + ": grid.specs: " + e.what());
        }
        if (!seen.insert(combiner::format_spec(s)).second) {
            throw ConfigError(at + ": grid.specs: '" + combiner::format_spec(s) + "' is listed twice");
        }
        c.specs.push_back(s);
    }
    auto base = std::find_if(c.specs.begin(), c.specs.end(), [](const auto& s) { return s.is_baseline(); });
    if (base == c.specs.end()) {
        c.specs.insert(c.specs.begin(), CombinationSpec{});
    } else {
        std::rotate(c.specs.begin(), base, base + 1);
    }
    return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string());
}

/// Everything that changes the outcome of a run. Seeds, the spec list and
/// the output directory are excluded so a grid can be widened in place.
inline nlohmann::json outcome_fields(const ExperimentConfig& c) {
    const auto& m = c.model;
    const auto& p = c.pretrain;
    const auto& s = c.data.synthetic;
    return {{"model",
             {{"layers", m.layers},
              {"hidden", m.hidden},
              {"max_len", m.max_len},
              {"heads", m.heads},
              {"ffn", m.ffn},
              {"vocab", m.vocab},
              {"dropout", m.dropout}}},
            {"pretrain",
             {{"epochs", p.hyper.epochs},
              {"batch_size", p.hyper.batch_size},
              {"learning_rate", p.hyper.lr},
              {"mask_rate", p.hyper.mask_rate},
              {"seed", p.seed}}},
            {"train",
             {{"batch_size", c.train.batch_size},
              {"learning_rate", c.train.learning_rate},
              {"epochs", c.train.epochs},
              {"p_drop", c.train.p_drop},
              {"eval_batch_size", c.train.eval_batch_size}}},
            {"data",
             {{"path", c.data.path.string()},
              {"synthetic",
               {{"task", data::to_string(s.kind)},
                {"train", s.train},
                {"valid", s.valid},
                {"test", s.test},
                {"seed", s.seed},
                {"max_raw_length", s.max_raw_length}}}}}};
}

inline data::DatasetSplits load_data(const ExperimentConfig& c) {
    if (!c.data.path.empty()) {
        return data::load_dataset(c.data.path, c.model.max_len);
    }
    return data::gen_synthetic(c.data.synthetic, c.model.max_len);
}

// ---------------------------------------------------------------------------
// Hashing and files

class Fnv1a {
public:
    void add(std::span<const std::byte> bytes) {
        for (auto b : bytes) {
            h_ = (h_ ^ static_cast<std::uint64_t>(b)) * 0x100000001b3ULL;
        }
    }
    void add(std::string_view s) { add(std::as_bytes(std::span(s.data(), s.size()))); }
    template <class T>
    void add_values(std::span<const T> v) {
        add(std::as_bytes(v));
    }
    std::string hex() const {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
        return buf;
    }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

/// Hash of the outcome-relevant config and the pretrained weights.
inline std::string config_hash(const ExperimentConfig& c, const encoder::Checkpoint& ckpt) {
    Fnv1a h;
    h.add(outcome_fields(c).dump());
    for (const auto& p : ckpt.parameters) {
        h.add(p.name);
        h.add_values(std::span<const std::size_t>(p.shape));
        h.add_values(std::span<const double>(p.values));
    }
    return h.hex();
}

/// Writes through a sibling temporary and renames, so readers never see a
/// partial file.
inline void write_file_atomic(const fs::path& path, const std::string& text) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw InputError("cannot write " + tmp.string());
        }
        out << text;
        out.flush();
        if (!out) {
            throw InputError("write failed: " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

inline std::optional<std::string> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        return std::nullopt;
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// Results store

struct GridFailure {
    std::string spec;
    std::uint64_t seed = 0;
    std::string error;
};

/// A directory of one JSON file per (spec, seed) plus `manifest.json`. Each
/// result file carries the config hash of the run that produced it; files
/// with another hash are stale and never returned.
class ResultsStore {
public:
    static constexpr const char* kManifest = "manifest.json";

    /// Opens `dir` for a grid. Throws ConfigError when it already holds the
    /// manifest of a different configuration.
    static ResultsStore create(const fs::path& dir, const ExperimentConfig& c, const std::string& hash,
                               const std::string& dataset) {
        fs::create_directories(dir);
        ResultsStore s;
        s.dir_ = dir;
        s.hash_ = hash;
        if (auto text = read_file(dir / kManifest)) {
            nlohmann::json m;
            try {
                m = nlohmann::json::parse(*text);
            } catch (const nlohmann::json::exception& e) {
                throw ConfigError((dir / kManifest).string() + ": unreadable manifest: " + e.what());
            }
            const auto old = m.value("config_hash", std::string());
            if (old != hash) {
                throw ConfigError(dir.string() + " holds results of another configuration (hash " + old +
                                  ", this one is " + hash + "); use a fresh directory");
            }
        }
        s.specs_ = c.specs;
        s.seeds_ = c.train.seeds;
        s.dataset_ = dataset;
        s.config_ = outcome_fields(c);
        s.write_manifest();
        return s;
    }

    /// Opens an existing store read-only.
    static ResultsStore open(const fs::path& dir) {
        const auto text = read_file(dir / kManifest);
        if (!text) {
            throw ReportError("no " + std::string(kManifest) + " in " + dir.string());
        }
        ResultsStore s;
        s.dir_ = dir;
        try {
            const auto m = nlohmann::json::parse(*text);
            s.hash_ = m.at("config_hash").get<std::string>();
            for (const auto& t : m.at("specs")) {
                s.specs_.push_back(combiner::parse_spec(t.get<std::string>()));
            }
            s.seeds_ = m.at("seeds").get<std::vector<std::uint64_t>>();
            s.dataset_ = m.at("dataset").get<std::string>();
            s.config_ = m.at("config");
            for (const auto& f : m.at("failures")) {
                s.failures_.push_back({f.at("spec"), f.at("seed"), f.at("error")});
            }
        } catch (const std::exception& e) {
            throw ReportError((dir / kManifest).string() + ": " + e.what());
        }
        return s;
    }

    const fs::path& dir() const { return dir_; }
    const std::string& hash() const { return hash_; }
    const std::vector<CombinationSpec>& specs() const { return specs_; }
    const std::vector<std::uint64_t>& seeds() const { return seeds_; }
    const std::string& dataset() const { return dataset_; }
    const std::vector<GridFailure>& failures() const { return failures_; }

    fs::path path_of(const CombinationSpec& spec, std::uint64_t seed) const {
        return dir_ / trainer::result_filename(spec, seed);
    }

    std::optional<RunResult> find(const CombinationSpec& spec, std::uint64_t seed) const {
        const auto text = read_file(path_of(spec, seed));
        if (!text) {
            return std::nullopt;
        }
        try {
            const auto j = nlohmann::json::parse(*text);
            if (j.at("config_hash").get<std::string>() != hash_) {
                return std::nullopt;
            }
            auto r = j.at("result").get<RunResult>();
            if (!(r.spec == spec) || r.seed != seed) {
                return std::nullopt;
            }
            return r;
        } catch (const std::exception&) {
            return std::nullopt;
        }
    }

    void put(const RunResult& r) const {
        const nlohmann::json j = {{"config_hash", hash_}, {"result", r}};
        write_file_atomic(path_of(r.spec, r.seed), j.dump(1) + "\n");
    }

    /// Runs of `spec` for the store's seeds, in seed order; missing ones are
    /// skipped.
    std::vector<RunResult> runs(const CombinationSpec& spec) const {
        std::vector<RunResult> out;
        for (auto seed : seeds_) {
            if (auto r = find(spec, seed)) {
                out.push_back(std::move(*r));
            }
        }
        return out;
    }

    void set_failures(std::vector<GridFailure> f) {
        failures_ = std::move(f);
        write_manifest();
    }

private:
    void write_manifest() const {
        nlohmann::json specs = nlohmann::json::array(), failures = nlohmann::json::array();
        for (const auto& s : specs_) {
            specs.push_back(combiner::format_spec(s));
        }
        for (const auto& f : failures_) {
            failures.push_back({{"spec", f.spec}, {"seed", f.seed}, {"error", f.error}});
        }
        const nlohmann::json m = {{"config_hash", hash_}, {"dataset", dataset_}, {"config", config_},
                                  {"specs", specs},       {"seeds", seeds_},     {"failures", failures},
                                  {"status", failures_.empty() ? "ok" : "partial"}};
        write_file_atomic(dir_ / kManifest, m.dump(1) + "\n");
    }

    fs::path dir_;
    std::string hash_;
    std::vector<CombinationSpec> specs_;
    std::vector<std::uint64_t> seeds_;
    std::string dataset_;
    nlohmann::json config_;
    std::vector<GridFailure> failures_;
};

// ---------------------------------------------------------------------------
// Grid

struct GridOptions {
    std::size_t jobs = 1;
    std::optional<std::size_t> max_new_runs; ///< stop after this many trainings
    std::function<void(const std::string&)> progress;
};

struct GridSummary {
    std::size_t trained = 0;
    std::size_t skipped = 0;
    std::size_t not_started = 0; ///< left over by max_new_runs
    std::vector<GridFailure> failures;

    bool ok() const { return failures.empty(); }
};

/// Fine-tunes every (spec, seed) of the config that has no valid result in
/// `out` yet. Pruned specs start from the checkpoint cut to their layer.
/// Failures are recorded in the manifest and do not stop the other runs.
inline GridSummary run_grid(const ExperimentConfig& c, const encoder::Checkpoint& ckpt,
                            const data::DatasetSplits& dataset, const fs::path& out, const GridOptions& opt = {}) {
    auto pretrained = ckpt.config;
    pretrained.dropout = c.model.dropout;
    if (!(pretrained == c.model)) {
        throw ConfigError("checkpoint shape (L=" + std::to_string(ckpt.config.layers) +
                          ", H=" + std::to_string(ckpt.config.hidden) + ", S=" + std::to_string(ckpt.config.max_len) +
                          ") does not match the model section of the config");
    }
    if (opt.jobs == 0) {
        throw ConfigError("--jobs must be at least 1");
    }
    auto store = ResultsStore::create(out, c, config_hash(c, ckpt), dataset.name);

    struct Task {
        CombinationSpec spec;
        std::uint64_t seed;
    };
    std::vector<Task> todo;
    GridSummary summary;
    for (const auto& spec : c.specs) {
        for (auto seed : c.train.seeds) {
            if (store.find(spec, seed)) {
                ++summary.skipped;
            } else {
                todo.push_back({spec, seed});
            }
        }
    }
    if (opt.max_new_runs && *opt.max_new_runs < todo.size()) {
        summary.not_started = todo.size() - *opt.max_new_runs;
        todo.resize(*opt.max_new_runs);
    }

    std::mutex mu;
    std::atomic<std::size_t> next{0};
    const auto worker = [&] {
        for (std::size_t k = next++; k < todo.size(); k = next++) {
            const auto& [spec, seed] = todo[k];
            const auto name = combiner::format_spec(spec);
            try {
                const auto model_ckpt = spec.uses_pruned_model() ? encoder::prune_model(ckpt, *spec.layer) : ckpt;
                const auto r = trainer::fine_tune(model_ckpt, spec, dataset, c.train, seed).result;
                store.put(r);
                std::lock_guard lock(mu);
                ++summary.trained;
                if (opt.progress) {
                    char buf[160];
                    std::snprintf(buf, sizeof buf, "%s seed %llu: acc %.4f f1 %.4f best epoch %zu, %.2fs/epoch",
                                  name.c_str(), static_cast<unsigned long long>(seed), r.test_accuracy, r.test_f1,
                                  r.best_epoch, r.mean_epoch_seconds());
                    opt.progress(buf);
                }
            } catch (const std::exception& e) {
                std::lock_guard lock(mu);
                summary.failures.push_back({name, seed, e.what()});
                if (opt.progress) {
                    opt.progress(name + " seed " + std::to_string(seed) + " failed: " + e.what());
                }
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        for (std::size_t t = 1; t < std::min(opt.jobs, todo.size()); ++t) {
            pool.emplace_back(worker);
        }
        worker();
    }
    std::sort(summary.failures.begin(), summary.failures.end(),
              [](const auto& a, const auto& b) { return std::tie(a.spec, a.seed) < std::tie(b.spec, b.seed); });
    store.set_failures(summary.failures);
    return summary;
}

// ---------------------------------------------------------------------------
// Comparisons

enum class Metric { accuracy, f1w };

inline std::string_view to_string(Metric m) { return m == Metric::accuracy ? "accuracy" : "f1w"; }

inline Metric parse_metric(std::string_view s) {
    if (s == "accuracy") {
        return Metric::accuracy;
    }
    if (s == "f1w") {
        return Metric::f1w;
    }
    throw ConfigError("unknown metric '" + std::string(s) + "' (expected accuracy or f1w)");
}

inline double metric_value(const RunResult& r, Metric m) { return m == Metric::accuracy ? r.test_accuracy : r.test_f1; }

/// Pairs runs by seed. Both sides must cover the same seeds.
inline stats::ComparisonResult compare_to_baseline(std::span<const RunResult> baseline,
                                                   std::span<const RunResult> candidate, Metric metric) {
    std::map<std::uint64_t, double> b, c;
    for (const auto& r : baseline) {
        b[r.seed] = metric_value(r, metric);
    }
    for (const auto& r : candidate) {
        c[r.seed] = metric_value(r, metric);
    }
    if (b.size() != baseline.size() || c.size() != candidate.size()) {
        throw ContractError("compare_to_baseline: a seed occurs twice");
    }
    std::vector<double> bv, cv;
    for (const auto& [seed, v] : b) {
        const auto it = c.find(seed);
        if (it == c.end()) {
            throw ContractError("compare_to_baseline: candidate lacks seed " + std::to_string(seed));
        }
        bv.push_back(v);
        cv.push_back(it->second);
    }
    if (c.size() != b.size()) {
        throw ContractError("compare_to_baseline: candidate has seeds the baseline lacks");
    }
    return stats::compare(bv, cv);
}

/// Mean difference in percentage points, one decimal, star when p < 0.05.
inline std::string format_diff_cell(const stats::ComparisonResult& r) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%+.1f%s", 100.0 * r.mean_diff, r.significant ? "*" : "");
    return buf;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char ch : s) {
        out += ch;
        if (ch == '"') {
            out += '"';
        }
    }
    return out + "\"";
}

inline std::string num(const char* fmt, double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, fmt, v);
    return buf;
}

inline std::string magnitude_tag(stats::Magnitude m) {
    return m == stats::Magnitude::negligible ? "" : std::string(stats::to_string(m));
}

inline std::string markdown_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
    std::string out = "|";
    for (const auto& h : header) {
        out += " " + h + " |";
    }
    out += "\n|";
    for (std::size_t k = 0; k < header.size(); ++k) {
        out += k == 0 ? ":---|" : "---:|";
    }
    out += "\n";
    for (const auto& row : rows) {
        out += "|";
        for (const auto& cell : row) {
            out += " " + cell + " |";
        }
        out += "\n";
    }
    return out;
}

/// Baseline runs of a store, or ReportError.
inline std::vector<RunResult> baseline_runs(const ResultsStore& store) {
    auto runs = store.runs(CombinationSpec{});
    if (runs.empty()) {
        throw ReportError("no baseline (i) results in " + store.dir().string());
    }
    return runs;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Heatmap report

struct HeatmapCell {
    std::string spec; ///< empty for a cell outside the grid
    std::string text; ///< "+1.0*", "bsln", "n/a" or ""
    std::optional<stats::ComparisonResult> comparison;
};

struct HeatmapBlock {
    std::string title;
    std::vector<std::string> columns;
    std::vector<std::string> rows;
    std::vector<std::vector<HeatmapCell>> cells; ///< [row][column]
};

struct HeatmapReport {
    Metric metric = Metric::accuracy;
    std::vector<HeatmapBlock> blocks; ///< single-layer strategies, then multi-layer ones
    std::vector<std::string> gaps;    ///< specs in the grid without comparable results

    std::string csv() const {
        std::string out = "block,row,column,spec,cell,mean_diff_pp,p_value,significant,a12,magnitude,n\n";
        for (const auto& b : blocks) {
            for (std::size_t r = 0; r < b.rows.size(); ++r) {
                for (std::size_t k = 0; k < b.columns.size(); ++k) {
                    const auto& c = b.cells[r][k];
                    if (c.text.empty()) {
                        continue;
                    }
                    out += detail::csv_field(b.title) + "," + detail::csv_field(b.rows[r]) + "," +
                           detail::csv_field(b.columns[k]) + "," + detail::csv_field(c.spec) + "," +
                           detail::csv_field(c.text);
                    if (c.comparison) {
                        const auto& x = *c.comparison;
                        out += "," + detail::num("%.6f", 100.0 * x.mean_diff) + "," + detail::num("%.6g", x.p_value) +
                               "," + (x.significant ? "1" : "0") + "," + detail::num("%.6f", x.a12) + "," +
                               std::string(stats::to_string(x.magnitude)) + "," + std::to_string(x.n);
                    } else {
                        out += ",,,,,,";
                    }
                    out += "\n";
                }
            }
        }
        return out;
    }

    std::string markdown() const {
        std::string out = "# Difference of mean " + std::string(to_string(metric)) +
                          " to the baseline (percentage points)\n\n"
                          "`*` marks p < 0.05 (Wilcoxon signed-rank), `bsln` is the baseline itself.\n";
        for (const auto& b : blocks) {
            out += "\n## " + b.title + "\n\n";
            std::vector<std::string> header{""};
            header.insert(header.end(), b.columns.begin(), b.columns.end());
            std::vector<std::vector<std::string>> rows;
            for (std::size_t r = 0; r < b.rows.size(); ++r) {
                rows.push_back({b.rows[r]});
                for (const auto& c : b.cells[r]) {
                    rows.back().push_back(c.text);
                }
            }
            out += detail::markdown_table(header, rows);
        }
        if (!gaps.empty()) {
            out += "\nMissing results:";
            for (const auto& g : gaps) {
                out += " " + g;
            }
            out += "\n";
        }
        return out;
    }
};

namespace detail {

/// Row label and sort key: scope-free rows first, then all-tokens rows,
/// then code-tokens rows; strategy order inside each group.
inline std::pair<std::string, int> heatmap_row(const CombinationSpec& s) {
    const int k = static_cast<int>(s.strategy);
    std::string label(combiner::to_string(s.strategy));
    if (!combiner::uses_scope(s.strategy)) {
        return {label, k};
    }
    label += s.scope == combiner::Scope::all_tokens ? " (all tokens)" : " (code tokens)";
    return {label, (s.scope == combiner::Scope::all_tokens ? 100 : 200) + k};
}

} // namespace detail

/// Heatmap of mean metric differences to the baseline: one block with a
/// column per layer for strategies that pick a layer, one block with a
/// column for the dataset for the others.
inline HeatmapReport emit_heatmap_report(const ResultsStore& store, Metric metric) {
    const auto base = detail::baseline_runs(store);
    const std::size_t L = base.front().model_layers;
    HeatmapReport rep;
    rep.metric = metric;

    HeatmapBlock single{"Single layer", {}, {}, {}};
    for (std::size_t l = 1; l <= L; ++l) {
        single.columns.push_back(std::to_string(l));
    }
    HeatmapBlock multi{"Several layers", {store.dataset()}, {}, {}};

    std::map<int, std::string> single_rows{{static_cast<int>(combiner::Strategy::ii), "ii"}}, multi_rows;
    for (const auto& s : store.specs()) {
        if (s.is_baseline()) {
            continue;
        }
        const auto [label, key] = detail::heatmap_row(s);
        (combiner::takes_layer(s.strategy) ? single_rows : multi_rows)[key] = label;
    }
    std::map<std::string, std::size_t> single_index, multi_index;
    for (const auto& [key, label] : single_rows) {
        single_index[label] = single.rows.size();
        single.rows.push_back(label);
        single.cells.emplace_back(single.columns.size());
        const bool cls_row = label == "ii" || label == "xii";
        if (cls_row) {
            single.cells.back()[L - 1].text = "bsln";
        }
    }
    for (const auto& [key, label] : multi_rows) {
        multi_index[label] = multi.rows.size();
        multi.rows.push_back(label);
        multi.cells.emplace_back(1);
    }

    for (const auto& s : store.specs()) {
        if (s.is_baseline()) {
            continue;
        }
        const auto name = combiner::format_spec(s);
        const auto label = detail::heatmap_row(s).first;
        HeatmapCell& cell = combiner::takes_layer(s.strategy) ? single.cells[single_index[label]][*s.layer - 1]
                                                              : multi.cells[multi_index[label]][0];
        cell.spec = name;
        const auto runs = store.runs(s);
        if (runs.size() != base.size()) {
            cell.text = "n/a";
            rep.gaps.push_back(name);
            continue;
        }
        cell.comparison = compare_to_baseline(base, runs, metric);
        cell.text = format_diff_cell(*cell.comparison);
    }
    rep.blocks.push_back(std::move(single));
    if (!multi.rows.empty()) {
        rep.blocks.push_back(std::move(multi));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Pruning table

struct PruningRow {
    std::size_t layers = 0;
    bool missing = false;
    double mean_epoch_seconds = 0.0;
    double speedup = 0.0;
    stats::ComparisonResult accuracy;
    stats::ComparisonResult f1;
};

struct PruningReport {
    std::size_t model_layers = 0;
    double baseline_accuracy = 0.0; ///< mean over seeds
    double baseline_f1 = 0.0;
    std::vector<PruningRow> rows; ///< l = L down to 1
    std::vector<std::string> gaps;

    /// "+0.9", bold when significantly better, star when insignificantly worse.
    static std::string delta_cell(const stats::ComparisonResult& r, bool markdown) {
        const double pp = 100.0 * r.mean_diff;
        auto text = detail::num("%+.1f", pp);
        if (r.significant && r.mean_diff > 0.0) {
            return markdown ? "**" + text + "**" : text;
        }
        if (!r.significant && r.mean_diff < 0.0) {
            text += "*";
        }
        return text;
    }

    std::string csv() const {
        std::string out = "layers,time,mean_epoch_seconds,speedup,acc_diff_pp,acc_p_value,acc_significant,acc_a12,"
                          "acc_magnitude,f1_diff_pp,f1_p_value,f1_significant,f1_a12,f1_magnitude,acc_cell,f1_cell\n";
        for (const auto& r : rows) {
            out += std::to_string(r.layers);
            if (r.missing) {
                out += ",n/a,,,,,,,,,,,,,,\n";
                continue;
            }
            out += "," + stats::format_mmss(r.mean_epoch_seconds) + "," + detail::num("%.6f", r.mean_epoch_seconds) +
                   "," + stats::format_speedup(r.speedup);
            for (const auto* c : {&r.accuracy, &r.f1}) {
                out += "," + detail::num("%.6f", 100.0 * c->mean_diff) + "," + detail::num("%.6g", c->p_value) + "," +
                       (c->significant ? "1" : "0") + "," + detail::num("%.6f", c->a12) + "," +
                       std::string(stats::to_string(c->magnitude));
            }
            out += "," + delta_cell(r.accuracy, false) + "," + delta_cell(r.f1, false) + "\n";
        }
        return out;
    }

    std::string markdown() const {
        std::string out = "# Pruned models against the baseline\n\n"
                          "Baseline (l = " + std::to_string(model_layers) + "): accuracy " +
                          detail::num("%.1f", 100.0 * baseline_accuracy) + ", F1(w) " +
                          detail::num("%.1f", 100.0 * baseline_f1) +
                          ". Time is the mean training time of one epoch (m:ss). Differences are in percentage "
                          "points; bold marks a significant gain, `*` an insignificant loss; A12 gives the effect "
                          "size when not negligible.\n\n";
        std::vector<std::vector<std::string>> rows;
        for (const auto& r : rows_view()) {
            rows.push_back(r);
        }
        out += detail::markdown_table({"l", "Time", "Speed-up", "Acc", "F1(w)", "A12 Acc", "A12 F1(w)"}, rows);
        if (!gaps.empty()) {
            out += "\nMissing rows:";
            for (const auto& g : gaps) {
                out += " " + g;
            }
            out += "\n";
        }
        return out;
    }

private:
    std::vector<std::vector<std::string>> rows_view() const {
        std::vector<std::vector<std::string>> out;
        for (const auto& r : rows) {
            if (r.missing) {
                out.push_back({std::to_string(r.layers), "n/a", "n/a", "n/a", "n/a", "", ""});
                continue;
            }
            out.push_back({std::to_string(r.layers), stats::format_mmss(r.mean_epoch_seconds),
                           stats::format_speedup(r.speedup), delta_cell(r.accuracy, true), delta_cell(r.f1, true),
                           detail::magnitude_tag(r.accuracy.magnitude), detail::magnitude_tag(r.f1.magnitude)});
        }
        return out;
    }
};

inline double mean_epoch_seconds(std::span<const RunResult> runs) {
    double s = 0.0;
    for (const auto& r : runs) {
        s += r.mean_epoch_seconds();
    }
    return s / static_cast<double>(runs.size());
}

/// Time, speed-up and metric differences of models pruned to l blocks,
/// l = L..1; row L is the baseline itself.
inline PruningReport emit_pruning_table(const ResultsStore& store) {
    const auto base = detail::baseline_runs(store);
    PruningReport rep;
    rep.model_layers = base.front().model_layers;
    for (const auto& r : base) {
        rep.baseline_accuracy += r.test_accuracy / static_cast<double>(base.size());
        rep.baseline_f1 += r.test_f1 / static_cast<double>(base.size());
    }
    const double base_seconds = mean_epoch_seconds(base);
    for (std::size_t l = rep.model_layers; l >= 1; --l) {
        PruningRow row;
        row.layers = l;
        std::vector<RunResult> runs;
        if (l == rep.model_layers) {
            runs = base;
        } else {
            const CombinationSpec spec{combiner::Strategy::xii, l, combiner::Scope::all_tokens};
            runs = store.runs(spec);
            if (runs.size() != base.size()) {
                row.missing = true;
                rep.gaps.push_back(combiner::format_spec(spec));
                rep.rows.push_back(row);
                continue;
            }
        }
        row.mean_epoch_seconds = mean_epoch_seconds(runs);
        row.speedup = stats::speedup(base_seconds, row.mean_epoch_seconds);
        row.accuracy = compare_to_baseline(base, runs, Metric::accuracy);
        row.f1 = compare_to_baseline(base, runs, Metric::f1w);
        rep.rows.push_back(row);
    }
    return rep;
}

/// Writes `<prefix>_heatmap.{csv,md}` and `<prefix>_pruning.{csv,md}`.
inline void write_reports(const ResultsStore& store, Metric metric, const fs::path& prefix) {
    const auto heat = emit_heatmap_report(store, metric);
    const auto prune = emit_pruning_table(store);
    if (prefix.has_parent_path()) {
        fs::create_directories(prefix.parent_path());
    }
    const auto stem = prefix.string();
    write_file_atomic(stem + "_heatmap.csv", heat.csv());
    write_file_atomic(stem + "_heatmap.md", heat.markdown());
    write_file_atomic(stem + "_pruning.csv", prune.csv());
    write_file_atomic(stem + "_pruning.md", prune.markdown());
}

} // namespace earlybird::experiment
