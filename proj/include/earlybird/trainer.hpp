#pragma once

// Classification head, the full encoder + combiner + head model, and the
// fine-tuning loop with best-epoch selection on validation accuracy.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "earlybird/combiner.hpp"
#include "earlybird/data.hpp"
#include "earlybird/diffcore.hpp"
#include "earlybird/encoder.hpp"
#include "earlybird/error.hpp"
#include "earlybird/rng.hpp"
#include "earlybird/stats.hpp"

namespace earlybird::trainer {

using encoder::Mode;

/// Dropout, then a linear layer to C logits. Softmax is applied by
/// `probabilities` or folded into the loss.
struct ClassifierHead {
    double p_drop = 0.1;
    Tensor weight; ///< [H x C]
    Tensor bias;   ///< [C]

    static ClassifierHead create(std::size_t hidden, std::size_t num_classes, double p_drop, Rng& rng) {
        if (num_classes < 2) {
            throw ContractError("classifier head needs at least 2 classes, got " + std::to_string(num_classes));
        }
        std::vector<double> w(hidden * num_classes);
        for (auto& x : w) {
            x = rng.normal(0.0, 0.02);
        }
        return {p_drop, Tensor({hidden, num_classes}, std::move(w), true), Tensor::zeros({num_classes}, true)};
    }

    std::size_t num_classes() const { return bias.numel(); }

    Tensor logits(const Tensor& r, Mode mode, Rng* rng = nullptr) const {
        if (r.rank() != 2 || r.dim(1) != weight.dim(0)) {
            throw ContractError("head expects [B x " + std::to_string(weight.dim(0)) + "] input, got " +
                                shape_str(r.shape()));
        }
        Tensor x = r;
        if (mode == Mode::train && p_drop > 0.0) {
            if (!rng) {
                throw ContractError("train-mode head needs a dropout generator");
            }
            x = dropout(r, p_drop, *rng, true);
        }
        return linear(x, weight, bias);
    }

    Tensor probabilities(const Tensor& r, Mode mode, Rng* rng = nullptr) const {
        return softmax(logits(r, mode, rng), 1);
    }

    ParameterSet parameters() const {
        ParameterSet ps;
        ps.add("head.weight", weight);
        ps.add("head.bias", bias);
        return ps;
    }
};

/// Defaults are the desk profile. full_scale() holds the large-model values,
/// which assume a 125M-parameter pretrained encoder.
struct TrainHyper {
    std::size_t batch_size = 16;
    double learning_rate = 1e-3;
    std::size_t epochs = 10;
    double p_drop = 0.1;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::size_t eval_batch_size = 128;

    void validate() const {
        if (batch_size == 0 || eval_batch_size == 0) {
            throw ConfigError("batch sizes must be positive");
        }
        if (epochs == 0) {
            throw ConfigError("epochs must be positive");
        }
        if (learning_rate < 0.0) {
            throw ConfigError("learning rate must be non-negative");
        }
        if (p_drop < 0.0 || p_drop >= 1.0) {
            throw ConfigError("dropout must lie in [0, 1)");
        }
        if (seeds.empty()) {
            throw ConfigError("seed list is empty");
        }
    }

    static TrainHyper full_scale() {
        TrainHyper h;
        h.batch_size = 64;
        h.learning_rate = 1e-5;
        h.seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
        return h;
    }

    bool operator==(const TrainHyper&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainHyper& h) {
    j = {{"batch_size", h.batch_size}, {"learning_rate", h.learning_rate}, {"epochs", h.epochs},
         {"p_drop", h.p_drop},         {"seeds", h.seeds},                 {"eval_batch_size", h.eval_batch_size}};
}

inline void from_json(const nlohmann::json& j, TrainHyper& h) {
    j.at("batch_size").get_to(h.batch_size);
    j.at("learning_rate").get_to(h.learning_rate);
    j.at("epochs").get_to(h.epochs);
    j.at("p_drop").get_to(h.p_drop);
    j.at("seeds").get_to(h.seeds);
    j.at("eval_batch_size").get_to(h.eval_batch_size);
}

struct EpochRecord {
    std::size_t epoch = 0; ///< 1-based
    double train_loss = 0.0;
    double valid_accuracy = 0.0;
    double valid_f1 = 0.0;
    double seconds = 0.0; ///< wall-clock of the training pass

    bool operator==(const EpochRecord&) const = default;
};

inline void to_json(nlohmann::json& j, const EpochRecord& e) {
    j = {{"epoch", e.epoch},
         {"train_loss", e.train_loss},
         {"valid_accuracy", e.valid_accuracy},
         {"valid_f1", e.valid_f1},
         {"seconds", e.seconds}};
}

inline void from_json(const nlohmann::json& j, EpochRecord& e) {
    j.at("epoch").get_to(e.epoch);
    j.at("train_loss").get_to(e.train_loss);
    j.at("valid_accuracy").get_to(e.valid_accuracy);
    j.at("valid_f1").get_to(e.valid_f1);
    j.at("seconds").get_to(e.seconds);
}

struct RunResult {
    combiner::CombinationSpec spec;
    std::uint64_t seed = 0;
    std::size_t best_epoch = 0; ///< 1-based
    double test_accuracy = 0.0;
    double test_f1 = 0.0;
    std::vector<EpochRecord> epochs;
    std::size_t model_layers = 0;
    std::size_t num_classes = 0;
    std::vector<int> test_predictions;
    TrainHyper hyper;

    double mean_epoch_seconds() const {
        if (epochs.empty()) {
            return 0.0;
        }
        double s = 0.0;
        for (const auto& e : epochs) {
            s += e.seconds;
        }
        return s / static_cast<double>(epochs.size());
    }

    /// Equality of everything except wall-clock times.
    bool same_outcome(const RunResult& o) const {
        if (epochs.size() != o.epochs.size()) {
            return false;
        }
        for (std::size_t k = 0; k < epochs.size(); ++k) {
            auto a = epochs[k], b = o.epochs[k];
            a.seconds = b.seconds = 0.0;
            if (!(a == b)) {
                return false;
            }
        }
        return spec == o.spec && seed == o.seed && best_epoch == o.best_epoch && test_accuracy == o.test_accuracy &&
               test_f1 == o.test_f1 && model_layers == o.model_layers && num_classes == o.num_classes &&
               test_predictions == o.test_predictions && hyper == o.hyper;
    }
};

inline void to_json(nlohmann::json& j, const RunResult& r) {
    j = {{"spec", combiner::format_spec(r.spec)},
         {"seed", r.seed},
         {"best_epoch", r.best_epoch},
         {"test_accuracy", r.test_accuracy},
         {"test_f1", r.test_f1},
         {"model_layers", r.model_layers},
         {"num_classes", r.num_classes},
         {"epochs", r.epochs},
         {"test_predictions", r.test_predictions},
         {"hyper", r.hyper}};
}

inline void from_json(const nlohmann::json& j, RunResult& r) {
    r.spec = combiner::parse_spec(j.at("spec").get<std::string>());
    j.at("seed").get_to(r.seed);
    j.at("best_epoch").get_to(r.best_epoch);
    j.at("test_accuracy").get_to(r.test_accuracy);
    j.at("test_f1").get_to(r.test_f1);
    j.at("model_layers").get_to(r.model_layers);
    j.at("num_classes").get_to(r.num_classes);
    j.at("epochs").get_to(r.epochs);
    j.at("test_predictions").get_to(r.test_predictions);
    j.at("hyper").get_to(r.hyper);
}

/// `<spec>__seed<k>.json`
inline std::string result_filename(const combiner::CombinationSpec& spec, std::uint64_t seed) {
    return combiner::format_spec(spec) + "__seed" + std::to_string(seed) + ".json";
}

/// Encoder, combiner weights and head as one trainable model.
class Classifier {
public:
    Classifier(const encoder::Checkpoint& ckpt, const combiner::CombinationSpec& spec, std::size_t num_classes,
               double p_drop, std::uint64_t seed)
        : encoder_(with_dropout(ckpt, p_drop)), spec_(spec) {
        const std::size_t L = encoder_.config().layers;
        if (spec.uses_pruned_model()) {
            if (!spec.layer || *spec.layer != L) {
                throw ContractError("spec " + combiner::format_spec(spec) + " needs a checkpoint pruned to its layer, got " +
                                    std::to_string(L) + " layers");
            }
        } else {
            spec.validate(L);
        }
        combiner_ = combiner::CombinerParams::for_spec(spec, L, encoder_.config().max_len);
        Rng rng(seed, Stream::init, 1);
        head_ = ClassifierHead::create(encoder_.config().hidden, num_classes, p_drop, rng);
        params_.extend(encoder_.parameters());
        params_.extend(combiner_.parameters());
        params_.extend(head_.parameters());
    }

    const encoder::Encoder& encoder() const { return encoder_; }
    const combiner::CombinationSpec& spec() const { return spec_; }
    const ClassifierHead& head() const { return head_; }
    const combiner::CombinerParams& combiner_params() const { return combiner_; }
    ParameterSet& parameters() { return params_; }
    const ParameterSet& parameters() const { return params_; }

    Tensor representation(const encoder::EncoderBatch& b, Mode mode, Rng* rng = nullptr) const {
        return combiner::combine(encoder_.encode(b, mode, rng), spec_, combiner_);
    }

    Tensor logits(const encoder::EncoderBatch& b, Mode mode, Rng* rng = nullptr) const {
        return head_.logits(representation(b, mode, rng), mode, rng);
    }

    std::vector<int> predict(const data::Split& split, std::size_t batch_size) const {
        NoGradGuard guard;
        std::vector<int> out;
        out.reserve(split.size());
        std::vector<std::size_t> pick;
        for (std::size_t start = 0; start < split.size(); start += batch_size) {
            pick.clear();
            for (std::size_t i = start; i < std::min(split.size(), start + batch_size); ++i) {
                pick.push_back(i);
            }
            const auto b = encoder::make_batch(split.sequences, pick, encoder_.config().max_len);
            const auto z = logits(b, Mode::eval);
            const std::size_t c = z.dim(1);
            for (std::size_t r = 0; r < b.batch; ++r) {
                const auto row = z.values().subspan(r * c, c);
                out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
            }
        }
        return out;
    }

private:
    static encoder::Checkpoint with_dropout(encoder::Checkpoint ckpt, double p) {
        ckpt.config.dropout = p;
        return ckpt;
    }

    encoder::Encoder encoder_;
    combiner::CombinationSpec spec_;
    combiner::CombinerParams combiner_;
    ClassifierHead head_;
    ParameterSet params_;
};

struct Evaluation {
    double accuracy = 0.0;
    double f1 = 0.0;
    std::vector<int> predictions;
};

inline Evaluation evaluate(const Classifier& model, const data::Split& split, std::size_t batch_size = 128) {
    if (split.empty()) {
        throw InputError("evaluate: empty split");
    }
    Evaluation e;
    e.predictions = model.predict(split, batch_size);
    const auto labels = split.labels();
    e.accuracy = stats::accuracy(e.predictions, labels);
    e.f1 = stats::weighted_f1(e.predictions, labels, model.head().num_classes());
    return e;
}

/// 1-based epoch with the highest validation accuracy, earliest on ties.
inline std::size_t select_best_epoch(std::span<const EpochRecord> records) {
    if (records.empty()) {
        throw ContractError("select_best_epoch: no epochs");
    }
    std::size_t best = 0;
    for (std::size_t k = 1; k < records.size(); ++k) {
        if (records[k].valid_accuracy > records[best].valid_accuracy) {
            best = k;
        }
    }
    return best + 1;
}

struct FineTuneOutput {
    RunResult result;
    std::unique_ptr<Classifier> model; ///< parameters of the best epoch
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains every parameter with Adam on cross-entropy, validates after each
/// epoch, and reports test metrics of the best validation epoch.
inline FineTuneOutput fine_tune(const encoder::Checkpoint& ckpt, const combiner::CombinationSpec& spec,
                                const data::DatasetSplits& data, const TrainHyper& hyper, std::uint64_t seed,
                                const EpochCallback& on_epoch = {}) {
    hyper.validate();
    if (data.train.empty() || data.valid.empty() || data.test.empty()) {
        throw InputError("fine_tune: dataset '" + data.name + "' has an empty split");
    }
    auto model = std::make_unique<Classifier>(ckpt, spec, data.num_classes, hyper.p_drop, seed);
    const std::size_t S = model->encoder().config().max_len;
    auto& params = model->parameters();

    AdamState adam;
    const AdamOptions opt{.lr = hyper.learning_rate};
    Rng dropout_rng(seed, Stream::dropout);

    RunResult r;
    r.spec = spec;
    r.seed = seed;
    r.model_layers = model->encoder().config().layers;
    r.num_classes = data.num_classes;
    r.hyper = hyper;

    std::vector<std::vector<double>> best_snapshot;
    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch + 1;
        double loss_sum = 0.0;
        std::size_t batches = 0;
        const auto t0 = std::chrono::steady_clock::now();
        for (const auto& pick : data::batch_iter(data.train.size(), hyper.batch_size, seed, epoch)) {
            const auto b = encoder::make_batch(data.train.sequences, pick, S);
            params.zero_grad();
            auto loss = cross_entropy(model->logits(b, Mode::train, &dropout_rng), b.labels);
            backward(loss);
            adam_step(params, adam, opt);
            loss_sum += loss.item();
            ++batches;
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rec.train_loss = loss_sum / static_cast<double>(batches);
        const auto v = evaluate(*model, data.valid, hyper.eval_batch_size);
        rec.valid_accuracy = v.accuracy;
        rec.valid_f1 = v.f1;
        r.epochs.push_back(rec);
        if (select_best_epoch(r.epochs) == rec.epoch) {
            best_snapshot = params.snapshot();
        }
        if (on_epoch) {
            on_epoch(rec);
        }
    }
    r.best_epoch = select_best_epoch(r.epochs);
    params.restore(best_snapshot);
    const auto t = evaluate(*model, data.test, hyper.eval_batch_size);
    r.test_accuracy = t.accuracy;
    r.test_f1 = t.f1;
    r.test_predictions = t.predictions;
    return {std::move(r), std::move(model)};
}

} // namespace earlybird::trainer
