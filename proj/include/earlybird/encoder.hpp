#pragma once

// Small post-layer-norm transformer encoder that keeps the output of every
// block, plus masked-language-model pretraining, prefix pruning and a
// versioned binary checkpoint format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "earlybird/data.hpp"
#include "earlybird/diffcore.hpp"
#include "earlybird/error.hpp"
#include "earlybird/rng.hpp"

namespace earlybird::encoder {

enum class Mode { train, eval };

struct EncoderConfig {
    std::size_t layers = 4;
    std::size_t hidden = 32;
    std::size_t max_len = 64; ///< S: every input is exactly this long
    std::size_t heads = 2;
    std::size_t ffn = 64;
    std::size_t vocab = data::kVocabSize;
    double dropout = 0.1;

    void validate() const {
        if (layers < 1) {
            throw ContractError("encoder needs at least one layer");
        }
        if (hidden == 0 || heads == 0 || hidden % heads != 0) {
            throw ContractError("hidden size " + std::to_string(hidden) + " is not divisible by " +
                                std::to_string(heads) + " heads");
        }
        if (max_len < 4) {
            throw ContractError("sequence length must be at least 4, got " + std::to_string(max_len));
        }
        if (ffn == 0 || vocab == 0) {
            throw ContractError("feed-forward and vocabulary sizes must be positive");
        }
        if (dropout < 0.0 || dropout >= 1.0) {
            throw ContractError("dropout must lie in [0, 1)");
        }
    }

    bool operator==(const EncoderConfig&) const = default;
};

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<double> values;

    bool operator==(const NamedArray&) const = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    EncoderConfig config;
    std::vector<NamedArray> parameters;
    std::uint32_t format_version = kCheckpointVersion;

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters) {
            n += p.values.size();
        }
        return n;
    }

    bool operator==(const Checkpoint&) const = default;
};

inline std::string layer_prefix(std::size_t layer) { return "layers." + std::to_string(layer) + "."; }

/// Every parameter the config implies, in canonical order.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const EncoderConfig& c) {
    std::vector<std::pair<std::string, Shape>> out{
        {"embeddings.token", {c.vocab, c.hidden}},
        {"embeddings.position", {c.max_len, c.hidden}},
        {"embeddings.norm.gamma", {c.hidden}},
        {"embeddings.norm.beta", {c.hidden}},
    };
    for (std::size_t l = 0; l < c.layers; ++l) {
        const auto p = layer_prefix(l);
        out.push_back({p + "attention.qkv.weight", {c.hidden, 3 * c.hidden}});
        out.push_back({p + "attention.qkv.bias", {3 * c.hidden}});
        out.push_back({p + "attention.output.weight", {c.hidden, c.hidden}});
        out.push_back({p + "attention.output.bias", {c.hidden}});
        out.push_back({p + "attention.norm.gamma", {c.hidden}});
        out.push_back({p + "attention.norm.beta", {c.hidden}});
        out.push_back({p + "ffn.input.weight", {c.hidden, c.ffn}});
        out.push_back({p + "ffn.input.bias", {c.ffn}});
        out.push_back({p + "ffn.output.weight", {c.ffn, c.hidden}});
        out.push_back({p + "ffn.output.bias", {c.hidden}});
        out.push_back({p + "ffn.norm.gamma", {c.hidden}});
        out.push_back({p + "ffn.norm.beta", {c.hidden}});
    }
    return out;
}

/// Token ids and masks of a batch of tokenized sequences, flattened row-major.
struct EncoderBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<std::size_t> ids;
    std::vector<std::uint8_t> attention_mask;
    std::vector<std::uint8_t> code_token_mask;
    std::vector<int> labels;
};

inline EncoderBatch make_batch(std::span<const data::TokenizedSequence> all, std::span<const std::size_t> pick,
                               std::size_t seq_len) {
    EncoderBatch b;
    b.batch = pick.size();
    b.seq = seq_len;
    for (std::size_t i : pick) {
        const auto& s = all[i];
        if (s.ids.size() != seq_len) {
            throw ContractError("sequence has " + std::to_string(s.ids.size()) + " positions, encoder expects " +
                                std::to_string(seq_len));
        }
        b.ids.insert(b.ids.end(), s.ids.begin(), s.ids.end());
        b.attention_mask.insert(b.attention_mask.end(), s.attention_mask.begin(), s.attention_mask.end());
        b.code_token_mask.insert(b.code_token_mask.end(), s.code_token_mask.begin(), s.code_token_mask.end());
        b.labels.push_back(s.label);
    }
    return b;
}

inline EncoderBatch make_batch(std::span<const data::TokenizedSequence> all, std::size_t seq_len) {
    std::vector<std::size_t> pick(all.size());
    for (std::size_t i = 0; i < pick.size(); ++i) {
        pick[i] = i;
    }
    return make_batch(all, pick, seq_len);
}

/// Outputs of all L encoder blocks for a batch of sequences: `states` has
/// shape [batch, L, S, H] and row l-1 along axis 1 is the output of block l.
/// The embedding output is not part of it. A single sequence is batch 1.
struct LayerStates {
    Tensor states;
    std::vector<std::uint8_t> attention_mask;  ///< batch * S
    std::vector<std::uint8_t> code_token_mask; ///< batch * S

    std::size_t batch() const { return states.dim(0); }
    std::size_t layers() const { return states.dim(1); }
    std::size_t seq_len() const { return states.dim(2); }
    std::size_t hidden() const { return states.dim(3); }
};

class Encoder {
public:
    Encoder(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
        config_.validate();
        Rng rng(seed, Stream::init);
        for (const auto& [name, shape] : parameter_layout(config_)) {
            std::vector<double> v(shape_numel(shape), 0.0);
            if (name.ends_with(".gamma")) {
                std::fill(v.begin(), v.end(), 1.0);
            } else if (name.ends_with(".weight") || name.starts_with("embeddings.token") ||
                       name.starts_with("embeddings.position")) {
                for (auto& x : v) {
                    x = rng.normal(0.0, 0.02);
                }
            }
            params_.add(name, Tensor(shape, std::move(v), true));
        }
    }

    explicit Encoder(const Checkpoint& ckpt) : config_(ckpt.config) {
        config_.validate();
        const auto layout = parameter_layout(config_);
        std::unordered_map<std::string, const NamedArray*> by_name;
        for (const auto& p : ckpt.parameters) {
            if (!by_name.emplace(p.name, &p).second) {
                throw LoadError("checkpoint repeats parameter '" + p.name + "'");
            }
        }
        for (const auto& [name, shape] : layout) {
            auto it = by_name.find(name);
            if (it == by_name.end()) {
                throw LoadError("checkpoint is missing parameter '" + name + "'");
            }
            if (it->second->shape != shape || it->second->values.size() != shape_numel(shape)) {
                throw LoadError("checkpoint parameter '" + name + "' has shape " + shape_str(it->second->shape) +
                                ", expected " + shape_str(shape));
            }
            params_.add(name, Tensor(shape, it->second->values, true));
        }
        if (by_name.size() != layout.size()) {
            for (const auto& p : ckpt.parameters) {
                if (!params_.contains(p.name)) {
                    throw LoadError("checkpoint has unexpected parameter '" + p.name + "'");
                }
            }
        }
    }

    const EncoderConfig& config() const { return config_; }
    ParameterSet& parameters() { return params_; }
    const ParameterSet& parameters() const { return params_; }

    Checkpoint to_checkpoint() const {
        Checkpoint ckpt;
        ckpt.config = config_;
        for (const auto& p : params_) {
            ckpt.parameters.push_back({p.name, p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()}});
        }
        return ckpt;
    }

    /// Token plus position embedding, layer-normed, dropout in train mode.
    /// Returns [batch*S x H].
    Tensor embed(const EncoderBatch& b, Mode mode, Rng* dropout_rng = nullptr) const {
        check_batch(b);
        for (std::size_t id : b.ids) {
            if (id >= config_.vocab) {
                throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                                      std::to_string(config_.vocab));
            }
        }
        std::vector<std::size_t> positions(b.batch * b.seq);
        for (std::size_t i = 0; i < positions.size(); ++i) {
            positions[i] = i % b.seq;
        }
        auto x = add(gather_rows(params_.at("embeddings.token"), b.ids),
                     gather_rows(params_.at("embeddings.position"), positions));
        x = layer_norm(x, params_.at("embeddings.norm.gamma"), params_.at("embeddings.norm.beta"), kNormEps);
        return apply_dropout(x, mode, dropout_rng);
    }

    /// One encoder block applied to [batch*S x H] hidden states.
    Tensor block(std::size_t layer, const Tensor& x, const EncoderBatch& b, Mode mode,
                 Rng* dropout_rng = nullptr) const {
        const auto p = layer_prefix(layer);
        auto qkv = linear(x, params_.at(p + "attention.qkv.weight"), params_.at(p + "attention.qkv.bias"));
        auto ctx = multi_head_attention(qkv, b.attention_mask, b.batch, b.seq, config_.heads);
        auto attn = linear(ctx, params_.at(p + "attention.output.weight"), params_.at(p + "attention.output.bias"));
        attn = apply_dropout(attn, mode, dropout_rng);
        auto h = layer_norm(add(x, attn), params_.at(p + "attention.norm.gamma"),
                            params_.at(p + "attention.norm.beta"), kNormEps);
        auto f = gelu(linear(h, params_.at(p + "ffn.input.weight"), params_.at(p + "ffn.input.bias")));
        f = linear(f, params_.at(p + "ffn.output.weight"), params_.at(p + "ffn.output.bias"));
        f = apply_dropout(f, mode, dropout_rng);
        return layer_norm(add(h, f), params_.at(p + "ffn.norm.gamma"), params_.at(p + "ffn.norm.beta"), kNormEps);
    }

    /// Outputs of every block, each [batch*S x H].
    std::vector<Tensor> forward_layers(const EncoderBatch& b, Mode mode, Rng* dropout_rng = nullptr) const {
        std::vector<Tensor> outs;
        outs.reserve(config_.layers);
        Tensor x = embed(b, mode, dropout_rng);
        for (std::size_t l = 0; l < config_.layers; ++l) {
            x = block(l, x, b, mode, dropout_rng);
            outs.push_back(x);
        }
        return outs;
    }

    LayerStates encode(const EncoderBatch& b, Mode mode, Rng* dropout_rng = nullptr) const {
        const auto outs = forward_layers(b, mode, dropout_rng);
        std::vector<Tensor> shaped;
        shaped.reserve(outs.size());
        for (const auto& o : outs) {
            shaped.push_back(reshape(o, {b.batch, b.seq, config_.hidden}));
        }
        return {stack(shaped, 1), b.attention_mask, b.code_token_mask};
    }

    LayerStates encode(std::span<const data::TokenizedSequence> sequences, Mode mode,
                       Rng* dropout_rng = nullptr) const {
        return encode(make_batch(sequences, config_.max_len), mode, dropout_rng);
    }

    static constexpr double kNormEps = 1e-12;

private:
    void check_batch(const EncoderBatch& b) const {
        if (b.batch == 0) {
            throw ContractError("encode: empty batch");
        }
        if (b.seq != config_.max_len || b.ids.size() != b.batch * b.seq || b.attention_mask.size() != b.ids.size()) {
            throw ContractError("encode: batch of " + std::to_string(b.batch) + " sequences of length " +
                                std::to_string(b.seq) + " does not match encoder length " +
                                std::to_string(config_.max_len));
        }
    }

    Tensor apply_dropout(const Tensor& x, Mode mode, Rng* rng) const {
        if (mode == Mode::eval || config_.dropout == 0.0) {
            return x;
        }
        if (!rng) {
            throw ContractError("train-mode forward pass needs a dropout generator");
        }
        return dropout(x, config_.dropout, *rng, true);
    }

    EncoderConfig config_;
    ParameterSet params_;
};

// ---------------------------------------------------------------------------
// Pruning

/// Keeps the embeddings and the first `keep_layers` blocks unchanged.
inline Checkpoint prune_model(const Checkpoint& ckpt, std::size_t keep_layers) {
    if (keep_layers < 1 || keep_layers > ckpt.config.layers) {
        throw ContractError("prune_model: cannot keep " + std::to_string(keep_layers) + " of " +
                            std::to_string(ckpt.config.layers) + " layers");
    }
    Checkpoint out;
    out.config = ckpt.config;
    out.config.layers = keep_layers;
    out.format_version = ckpt.format_version;
    for (const auto& p : ckpt.parameters) {
        if (p.name.starts_with("layers.")) {
            const auto idx = std::stoul(p.name.substr(7, p.name.find('.', 7) - 7));
            if (idx >= keep_layers) {
                continue;
            }
        }
        out.parameters.push_back(p);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint files
//
// Layout (little-endian host order):
//   "EBCKPT01" | u32 version | config (6 x u64, f64 dropout) | u64 count |
//   count x { u32 name length, name, u32 rank, rank x u64 dims, f64 values } |
//   "EBCKPEND"

namespace detail {

inline constexpr char kMagic[8] = {'E', 'B', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr char kTrailer[8] = {'E', 'B', 'C', 'K', 'P', 'E', 'N', 'D'};

template <typename T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
public:
    Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}

    void bytes(char* dst, std::size_t n, const char* what) {
        is_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) {
            throw LoadError("checkpoint " + path_ + " is truncated while reading " + what);
        }
    }

    template <typename T>
    T get(const char* what) {
        T v{};
        bytes(reinterpret_cast<char*>(&v), sizeof(T), what);
        return v;
    }

private:
    std::istream& is_;
    std::string path_;
};

} // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) {
            throw Error("cannot write checkpoint " + tmp);
        }
        os.write(detail::kMagic, sizeof detail::kMagic);
        detail::put(os, ckpt.format_version);
        const auto& c = ckpt.config;
        for (std::uint64_t v : {c.layers, c.hidden, c.max_len, c.heads, c.ffn, c.vocab}) {
            detail::put(os, v);
        }
        detail::put(os, c.dropout);
        detail::put(os, static_cast<std::uint64_t>(ckpt.parameters.size()));
        for (const auto& p : ckpt.parameters) {
            detail::put(os, static_cast<std::uint32_t>(p.name.size()));
            os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
            detail::put(os, static_cast<std::uint32_t>(p.shape.size()));
            for (auto d : p.shape) {
                detail::put(os, static_cast<std::uint64_t>(d));
            }
            os.write(reinterpret_cast<const char*>(p.values.data()),
                     static_cast<std::streamsize>(p.values.size() * sizeof(double)));
        }
        os.write(detail::kTrailer, sizeof detail::kTrailer);
        if (!os) {
            throw Error("failed writing checkpoint " + tmp);
        }
    }
    std::filesystem::rename(tmp, path);
}

/// Reads a checkpoint and verifies that it holds exactly the parameters its
/// config implies.
inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw LoadError("cannot open checkpoint " + path.string());
    }
    detail::Reader r(is, path.string());
    char magic[8];
    r.bytes(magic, sizeof magic, "header");
    if (std::memcmp(magic, detail::kMagic, sizeof magic) != 0) {
        throw LoadError(path.string() + " is not an earlybird checkpoint");
    }
    Checkpoint ckpt;
    ckpt.format_version = r.get<std::uint32_t>("version");
    if (ckpt.format_version != kCheckpointVersion) {
        throw LoadError("checkpoint " + path.string() + " has format version " +
                        std::to_string(ckpt.format_version) + ", this build reads version " +
                        std::to_string(kCheckpointVersion));
    }
    auto& c = ckpt.config;
    c.layers = r.get<std::uint64_t>("config");
    c.hidden = r.get<std::uint64_t>("config");
    c.max_len = r.get<std::uint64_t>("config");
    c.heads = r.get<std::uint64_t>("config");
    c.ffn = r.get<std::uint64_t>("config");
    c.vocab = r.get<std::uint64_t>("config");
    c.dropout = r.get<double>("config");
    try {
        c.validate();
    } catch (const ContractError& e) {
        throw LoadError("checkpoint " + path.string() + " has an invalid config: " + e.what());
    }
    const auto count = r.get<std::uint64_t>("parameter count");
    const auto expected = parameter_layout(c).size();
    if (count != expected) {
        throw LoadError("checkpoint " + path.string() + " lists " + std::to_string(count) +
                        " parameters, config implies " + std::to_string(expected));
    }
    for (std::uint64_t i = 0; i < count; ++i) {
        NamedArray p;
        const auto len = r.get<std::uint32_t>("parameter name");
        if (len > 4096) {
            throw LoadError("checkpoint " + path.string() + " has a corrupt parameter name");
        }
        p.name.resize(len);
        r.bytes(p.name.data(), len, "parameter name");
        const auto rank = r.get<std::uint32_t>("parameter rank");
        if (rank == 0 || rank > 8) {
            throw LoadError("checkpoint parameter '" + p.name + "' has corrupt rank");
        }
        for (std::uint32_t k = 0; k < rank; ++k) {
            p.shape.push_back(r.get<std::uint64_t>("parameter shape"));
        }
        const auto n = shape_numel(p.shape);
        if (n == 0 || n > (std::size_t{1} << 32)) {
            throw LoadError("checkpoint parameter '" + p.name + "' has corrupt shape");
        }
        p.values.resize(n);
        r.bytes(reinterpret_cast<char*>(p.values.data()), n * sizeof(double), ("values of " + p.name).c_str());
        ckpt.parameters.push_back(std::move(p));
    }
    char trailer[8];
    r.bytes(trailer, sizeof trailer, "trailer");
    if (std::memcmp(trailer, detail::kTrailer, sizeof trailer) != 0) {
        throw LoadError("checkpoint " + path.string() + " has a corrupt trailer");
    }
    // Completeness and shapes.
    (void)Encoder(ckpt);
    return ckpt;
}

// ---------------------------------------------------------------------------
// Masked-language-model pretraining

struct MlmHyper {
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    double mask_rate = 0.15;
};

struct MlmResult {
    Checkpoint checkpoint;
    std::vector<double> epoch_loss; ///< mean training loss per epoch
    std::size_t masked_positions = 0;
    std::size_t code_positions = 0;

    double mask_fraction() const {
        return code_positions ? static_cast<double>(masked_positions) / static_cast<double>(code_positions) : 0.0;
    }
};

/// Chooses round(rate * n) of the n code-token positions (at least one when
/// n > 0) uniformly without replacement.
inline std::vector<std::size_t> select_mask_positions(const data::TokenizedSequence& seq, double rate, Rng& rng) {
    std::vector<std::size_t> code;
    for (std::size_t i = 0; i < seq.code_token_mask.size(); ++i) {
        if (seq.code_token_mask[i]) {
            code.push_back(i);
        }
    }
    if (code.empty()) {
        return {};
    }
    auto k = static_cast<std::size_t>(std::llround(rate * static_cast<double>(code.size())));
    k = std::clamp<std::size_t>(k, 1, code.size());
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(code.size() - i));
        std::swap(code[i], code[j]);
    }
    code.resize(k);
    std::sort(code.begin(), code.end());
    return code;
}

/// Trains a fresh encoder to recover masked code tokens through a linear
/// vocabulary head. Selected tokens are always replaced by MASK. The head is
/// discarded; the returned checkpoint holds the encoder only.
inline MlmResult mlm_pretrain(const std::vector<std::string>& corpus, const EncoderConfig& config,
                              const MlmHyper& hyper, std::uint64_t seed) {
    if (corpus.empty()) {
        throw InputError("mlm_pretrain: empty corpus");
    }
    config.validate();
    std::vector<data::TokenizedSequence> seqs;
    seqs.reserve(corpus.size());
    for (const auto& text : corpus) {
        seqs.push_back(data::tokenize(text, config.max_len));
    }

    Encoder enc(config, seed);
    Rng head_rng(seed, Stream::init, 1);
    std::vector<double> w(config.hidden * config.vocab);
    for (auto& x : w) {
        x = head_rng.normal(0.0, 0.02);
    }
    ParameterSet params;
    params.extend(enc.parameters());
    params.add("mlm.weight", Tensor({config.hidden, config.vocab}, std::move(w), true));
    params.add("mlm.bias", Tensor::zeros({config.vocab}, true));

    AdamState adam;
    const AdamOptions opt{.lr = hyper.lr};
    Rng dropout_rng(seed, Stream::dropout);
    MlmResult result;

    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        Rng mask_rng(seed, Stream::masking, epoch);
        double loss_sum = 0.0;
        std::size_t loss_batches = 0;
        for (const auto& pick : data::batch_iter(seqs.size(), hyper.batch_size, seed, epoch)) {
            auto batch = make_batch(seqs, pick, config.max_len);
            std::vector<std::size_t> rows;
            std::vector<int> targets;
            for (std::size_t b = 0; b < pick.size(); ++b) {
                const auto& s = seqs[pick[b]];
                const auto chosen = select_mask_positions(s, hyper.mask_rate, mask_rng);
                if (epoch == 0) {
                    result.masked_positions += chosen.size();
                    result.code_positions += static_cast<std::size_t>(
                        std::count(s.code_token_mask.begin(), s.code_token_mask.end(), std::uint8_t{1}));
                }
                for (std::size_t pos : chosen) {
                    rows.push_back(b * config.max_len + pos);
                    targets.push_back(static_cast<int>(s.ids[pos]));
                    batch.ids[b * config.max_len + pos] = data::kMask;
                }
            }
            if (rows.empty()) {
                continue;
            }
            params.zero_grad();
            const auto layers = enc.forward_layers(batch, Mode::train, &dropout_rng);
            auto picked = gather_rows(layers.back(), rows);
            auto logits = linear(picked, params.at("mlm.weight"), params.at("mlm.bias"));
            auto loss = cross_entropy(logits, targets);
            backward(loss);
            adam_step(params, adam, opt);
            loss_sum += loss.item();
            ++loss_batches;
        }
        result.epoch_loss.push_back(loss_batches ? loss_sum / static_cast<double>(loss_batches) : 0.0);
    }
    result.checkpoint = enc.to_checkpoint();
    return result;
}

} // namespace earlybird::encoder
