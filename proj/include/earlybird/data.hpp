#pragma once

// Byte-level tokenization, JSON-lines datasets and the synthetic desk-scale
// classification tasks.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "earlybird/error.hpp"
#include "earlybird/rng.hpp"

namespace earlybird::data {

inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kCls = 1;
inline constexpr std::size_t kEos = 2;
inline constexpr std::size_t kMask = 3;
inline constexpr std::size_t kByteOffset = 4;
inline constexpr std::size_t kVocabSize = kByteOffset + 256;

inline constexpr std::size_t byte_token(unsigned char b) { return kByteOffset + b; }

struct TokenizedSequence {
    std::vector<std::size_t> ids;
    std::vector<std::uint8_t> attention_mask;  ///< CLS, code bytes and EOS
    std::vector<std::uint8_t> code_token_mask; ///< code bytes only
    int label = 0;

    bool operator==(const TokenizedSequence&) const = default;
};

/// Layout `[CLS] bytes [EOS] [PAD]...` of exactly `seq_len` positions. Text
/// that does not fit is cut at the end to seq_len - 1 bytes and carries no EOS.
inline TokenizedSequence tokenize(std::string_view text, std::size_t seq_len, int label = 0) {
    TokenizedSequence t;
    t.label = label;
    t.ids.assign(seq_len, kPad);
    t.attention_mask.assign(seq_len, 0);
    t.code_token_mask.assign(seq_len, 0);
    if (seq_len == 0) {
        return t;
    }
    t.ids[0] = kCls;
    t.attention_mask[0] = 1;
    const std::size_t room = seq_len - 1;
    const bool fits_with_eos = text.size() + 1 <= room;
    const std::size_t n = std::min(text.size(), room);
    for (std::size_t i = 0; i < n; ++i) {
        t.ids[1 + i] = byte_token(static_cast<unsigned char>(text[i]));
        t.attention_mask[1 + i] = 1;
        t.code_token_mask[1 + i] = 1;
    }
    if (fits_with_eos) {
        t.ids[1 + n] = kEos;
        t.attention_mask[1 + n] = 1;
    }
    return t;
}

struct Example {
    std::string text;
    int label = 0;

    bool operator==(const Example&) const = default;
};

struct Split {
    std::vector<Example> examples;
    std::vector<TokenizedSequence> sequences;

    std::size_t size() const { return sequences.size(); }
    bool empty() const { return sequences.empty(); }
    std::vector<int> labels() const {
        std::vector<int> out;
        out.reserve(sequences.size());
        for (const auto& s : sequences) {
            out.push_back(s.label);
        }
        return out;
    }

    bool operator==(const Split& other) const {
        return examples == other.examples && sequences == other.sequences;
    }
};

inline Split make_split(std::vector<Example> examples, std::size_t seq_len) {
    Split s;
    s.sequences.reserve(examples.size());
    for (const auto& e : examples) {
        s.sequences.push_back(tokenize(e.text, seq_len, e.label));
    }
    s.examples = std::move(examples);
    return s;
}

struct DatasetSplits {
    std::string name;
    Split train;
    Split valid;
    Split test;
    std::size_t num_classes = 0;
    std::vector<std::size_t> class_frequency; ///< counts in the training split
    std::vector<std::string> warnings;
};

inline std::vector<std::size_t> class_counts(const Split& split, std::size_t num_classes) {
    std::vector<std::size_t> counts(num_classes, 0);
    for (const auto& s : split.sequences) {
        ++counts.at(static_cast<std::size_t>(s.label));
    }
    return counts;
}

// ---------------------------------------------------------------------------
// JSON-lines files

inline std::vector<Example> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open dataset file " + path.string());
    }
    std::vector<Example> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const std::string where = path.string() + ":" + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw InputError(where + ": malformed JSON (" + e.what() + ")");
        }
        if (!j.is_object() || !j.contains("text") || !j["text"].is_string() || !j.contains("label") ||
            !j["label"].is_number_integer()) {
            throw InputError(where + ": expected {\"text\": <string>, \"label\": <int>}");
        }
        const auto label = j["label"].get<long long>();
        if (label < 0) {
            throw InputError(where + ": negative label " + std::to_string(label));
        }
        out.push_back({j["text"].get<std::string>(), static_cast<int>(label)});
    }
    return out;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<Example>& examples) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw InputError("cannot write dataset file " + path.string());
    }
    for (const auto& e : examples) {
        out << nlohmann::json{{"text", e.text}, {"label", e.label}}.dump() << '\n';
    }
}

/// Reads `train.jsonl`, `valid.jsonl` and `test.jsonl` from `dir`. The class
/// count is one more than the largest training label.
inline DatasetSplits load_dataset(const std::filesystem::path& dir, std::size_t seq_len) {
    DatasetSplits ds;
    ds.name = dir.filename().string();
    if (ds.name.empty()) {
        ds.name = dir.parent_path().filename().string();
    }
    auto train = read_jsonl(dir / "train.jsonl");
    auto valid = read_jsonl(dir / "valid.jsonl");
    auto test = read_jsonl(dir / "test.jsonl");
    if (train.empty()) {
        throw InputError("training split in " + dir.string() + " is empty");
    }
    int max_label = 0;
    for (const auto& e : train) {
        max_label = std::max(max_label, e.label);
    }
    ds.num_classes = static_cast<std::size_t>(max_label) + 1;
    const auto check = [&](const std::vector<Example>& split, const char* name) {
        for (std::size_t i = 0; i < split.size(); ++i) {
            if (static_cast<std::size_t>(split[i].label) >= ds.num_classes) {
                throw InputError(std::string(name) + " example " + std::to_string(i + 1) + " has label " +
                                 std::to_string(split[i].label) + " but training data defines " +
                                 std::to_string(ds.num_classes) + " classes");
            }
        }
    };
    check(valid, "valid");
    check(test, "test");
    if (ds.num_classes < 2) {
        throw InputError("dataset in " + dir.string() + " has fewer than two classes");
    }
    ds.train = make_split(std::move(train), seq_len);
    ds.valid = make_split(std::move(valid), seq_len);
    ds.test = make_split(std::move(test), seq_len);
    ds.class_frequency = class_counts(ds.train, ds.num_classes);
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
        if (ds.class_frequency[c] == 0) {
            ds.warnings.push_back("label " + std::to_string(c) + " never occurs in the training split");
        }
    }
    return ds;
}

inline void save_dataset(const DatasetSplits& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_jsonl(dir / "train.jsonl", ds.train.examples);
    write_jsonl(dir / "valid.jsonl", ds.valid.examples);
    write_jsonl(dir / "test.jsonl", ds.test.examples);
}

// ---------------------------------------------------------------------------
// Pretraining corpus: one sequence per line. Newlines, tabs and backslashes
// inside a sequence are written as \n, \t and \\.

inline std::string escape_line(std::string_view text) {
    std::string out;
    for (char c : text) {
        switch (c) {
        case '\n':
            out += "\\n";
            break;
        case '\t':
            out += "\\t";
            break;
        case '\\':
            out += "\\\\";
            break;
        default:
            out += c;
        }
    }
    return out;
}

inline std::string unescape_line(std::string_view line) {
    std::string out;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '\\' && i + 1 < line.size()) {
            const char n = line[i + 1];
            if (n == 'n' || n == 't' || n == '\\') {
                out += n == 'n' ? '\n' : (n == 't' ? '\t' : '\\');
                ++i;
                continue;
            }
        }
        out += line[i];
    }
    return out;
}

inline std::vector<std::string> load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot open corpus " + path.string());
    }
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (!line.empty()) {
            out.push_back(unescape_line(line));
        }
    }
    return out;
}

inline void save_corpus(const std::filesystem::path& path, const std::vector<std::string>& corpus) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw InputError("cannot write corpus " + path.string());
    }
    for (const auto& s : corpus) {
        out << escape_line(s) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Batching

/// Index batches over a split of `n` items, reshuffled per (seed, epoch).
/// The last batch may be smaller than `batch_size`.
inline std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                        std::uint64_t epoch) {
    if (n == 0) {
        throw InputError("batch_iter: empty split");
    }
    if (batch_size == 0) {
        throw ContractError("batch_iter: batch size must be positive");
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    Rng rng(seed, Stream::shuffle, epoch);
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

// ---------------------------------------------------------------------------
// Synthetic tasks

enum class TaskKind { paren3, swapbug2 };

inline std::string_view to_string(TaskKind k) { return k == TaskKind::paren3 ? "paren3" : "swapbug2"; }

inline TaskKind parse_task_kind(std::string_view s) {
    if (s == "paren3") {
        return TaskKind::paren3;
    }
    if (s == "swapbug2") {
        return TaskKind::swapbug2;
    }
    throw InputError("unknown synthetic task '" + std::string(s) + "' (expected paren3 or swapbug2)");
}

inline std::size_t task_classes(TaskKind k) { return k == TaskKind::paren3 ? 3 : 2; }

struct SyntheticTaskSpec {
    TaskKind kind = TaskKind::paren3;
    std::size_t train = 2000;
    std::size_t valid = 500;
    std::size_t test = 500;
    std::uint64_t seed = 0;
    std::size_t max_raw_length = 62;
};

namespace synth {

// paren3 labels
inline constexpr int kUnbalanced = 0;
inline constexpr int kIndentation = 1;
inline constexpr int kInvalidSyntax = 2;

inline char pick(Rng& rng, std::string_view options) { return options[rng.below(options.size())]; }

inline std::string var(Rng& rng) { return std::string(1, pick(rng, "abcdxyzknm")); }

inline std::string digit(Rng& rng) { return std::string(1, pick(rng, "123456789")); }

inline std::string op(Rng& rng) { return std::string(1, pick(rng, "+-*")); }

/// A line that always contains at least one bracket pair.
inline std::string bracketed_statement(Rng& rng) {
    switch (rng.below(5)) {
    case 0:
        return var(rng) + " = (" + var(rng) + " " + op(rng) + " " + var(rng) + ") " + op(rng) + " " + digit(rng);
    case 1:
        return "return f(" + var(rng) + ", " + digit(rng) + ")";
    case 2:
        return var(rng) + " = [" + var(rng) + ", " + var(rng) + "]";
    case 3:
        return var(rng) + " = g(" + var(rng) + ") " + op(rng) + " " + digit(rng);
    default:
        return "print(" + var(rng) + " " + op(rng) + " " + digit(rng) + ")";
    }
}

inline std::string plain_statement(Rng& rng) {
    switch (rng.below(3)) {
    case 0:
        return var(rng) + " = " + var(rng) + " " + op(rng) + " " + digit(rng);
    case 1:
        return "return " + var(rng);
    default:
        return var(rng) + " " + op(rng) + "= " + digit(rng);
    }
}

inline std::string header(Rng& rng) {
    switch (rng.below(4)) {
    case 0:
        return "def f(" + var(rng) + ", " + var(rng) + "):";
    case 1:
        return "if " + var(rng) + " > " + digit(rng) + ":";
    case 2:
        return "for " + var(rng) + " in range(" + digit(rng) + "):";
    default:
        return "while " + var(rng) + " < " + digit(rng) + ":";
    }
}

/// Snippet structure: a block header, an indented body and an optional
/// trailing top-level line.
struct Snippet {
    std::vector<std::string> lines;
    std::vector<std::size_t> indent;

    std::string render() const {
        std::string out;
        for (std::size_t i = 0; i < lines.size(); ++i) {
            if (i) {
                out += '\n';
            }
            out += std::string(indent[i], ' ') + lines[i];
        }
        return out;
    }
};

inline Snippet clean_snippet(Rng& rng) {
    Snippet s;
    s.lines.push_back(header(rng));
    s.indent.push_back(0);
    const std::size_t body = 1 + rng.below(2);
    const std::size_t bracket_line = rng.below(body);
    for (std::size_t i = 0; i < body; ++i) {
        s.lines.push_back(i == bracket_line ? bracketed_statement(rng) : plain_statement(rng));
        s.indent.push_back(4);
    }
    if (rng.bernoulli(0.3)) {
        s.lines.push_back(rng.bernoulli(0.5) ? "print(" + var(rng) + ")" : plain_statement(rng));
        s.indent.push_back(0);
    }
    return s;
}

inline bool brackets_balanced(std::string_view text) {
    std::vector<char> stack;
    for (char c : text) {
        if (c == '(' || c == '[') {
            stack.push_back(c);
        } else if (c == ')' || c == ']') {
            if (stack.empty() || (c == ')' ? '(' : '[') != stack.back()) {
                return false;
            }
            stack.pop_back();
        }
    }
    return stack.empty();
}

/// Applies the defect for `label` to a clean snippet.
inline std::string inject_defect(Snippet s, int label, Rng& rng) {
    if (label == kIndentation) {
        std::vector<std::size_t> body;
        for (std::size_t i = 0; i < s.lines.size(); ++i) {
            if (s.indent[i] == 4) {
                body.push_back(i);
            }
        }
        const std::size_t line = body[rng.below(body.size())];
        static constexpr std::size_t bad_indents[] = {0, 1, 2, 3, 6};
        s.indent[line] = bad_indents[rng.below(std::size(bad_indents))];
        return s.render();
    }
    std::string text = s.render();
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        const bool plain_assign = c == '=' && i > 0 && text[i - 1] == ' ';
        if (label == kUnbalanced ? (c == ')' || c == ']')
                                 : (c == ':' || c == ',' || c == '>' || c == '<' || plain_assign)) {
            candidates.push_back(i);
        }
    }
    text.erase(candidates[rng.below(candidates.size())], 1);
    return text;
}

// swapbug2: expressions whose operand letters increase strictly from left to
// right; the buggy class swaps two neighbouring operands.

inline std::string operand_letters(std::string_view expr) {
    std::string out;
    for (char c : expr) {
        if (c >= 'a' && c <= 'z') {
            out += c;
        }
    }
    return out;
}

/// Grammar check for `return <expr>` where expr alternates operands and binary
/// operators with balanced parentheses.
inline bool well_formed_expression(std::string_view text) {
    constexpr std::string_view prefix = "return ";
    if (text.substr(0, prefix.size()) != prefix) {
        return false;
    }
    bool expect_operand = true;
    int depth = 0;
    for (char c : text.substr(prefix.size())) {
        if (c == ' ') {
            continue;
        }
        if (c == '(') {
            if (!expect_operand) {
                return false;
            }
            ++depth;
        } else if (c == ')') {
            if (expect_operand || depth == 0) {
                return false;
            }
            --depth;
        } else if (c >= 'a' && c <= 'z') {
            if (!expect_operand) {
                return false;
            }
            expect_operand = false;
        } else if (c == '+' || c == '-' || c == '*' || c == '/') {
            if (expect_operand) {
                return false;
            }
            expect_operand = true;
        } else {
            return false;
        }
    }
    return depth == 0 && !expect_operand;
}

/// Label according to the generator's rule: 1 when some pair of neighbouring
/// operands is out of order.
inline int swapbug_label(std::string_view text) {
    const auto letters = operand_letters(text.substr(std::min<std::size_t>(7, text.size())));
    for (std::size_t i = 1; i < letters.size(); ++i) {
        if (letters[i - 1] >= letters[i]) {
            return 1;
        }
    }
    return 0;
}

inline std::string clean_expression(Rng& rng) {
    const std::size_t n = 3 + rng.below(4);
    std::vector<char> letters;
    std::string pool = "abcdefghijklmnopqrstuvwxyz";
    rng.shuffle(pool);
    letters.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n));
    std::sort(letters.begin(), letters.end());
    std::string expr = "return ";
    const std::size_t open_at = rng.below(n - 1);
    const bool paren = rng.bernoulli(0.5);
    for (std::size_t i = 0; i < n; ++i) {
        if (i) {
            expr += ' ';
            expr += pick(rng, "+-*/");
            expr += ' ';
        }
        if (paren && i == open_at) {
            expr += '(';
        }
        expr += letters[i];
        if (paren && i == open_at + 1) {
            expr += ')';
        }
    }
    return expr;
}

/// Swaps the k-th and (k+1)-th operand letters in place.
inline std::string swap_operands(std::string text, std::size_t k) {
    std::vector<std::size_t> pos;
    for (std::size_t i = 7; i < text.size(); ++i) {
        if (text[i] >= 'a' && text[i] <= 'z') {
            pos.push_back(i);
        }
    }
    std::swap(text[pos.at(k)], text[pos.at(k + 1)]);
    return text;
}

inline std::size_t operand_count(std::string_view text) { return operand_letters(text.substr(7)).size(); }

} // namespace synth

/// One clean (defect-free) paren3-style snippet, used as pretraining text.
inline std::string clean_code_sample(Rng& rng) { return synth::clean_snippet(rng).render(); }

inline std::vector<std::string> gen_corpus(std::size_t n, std::uint64_t seed, std::size_t max_raw_length = 62) {
    Rng rng(seed, Stream::data, 0xc0de);
    std::vector<std::string> out;
    out.reserve(n);
    while (out.size() < n) {
        auto s = clean_code_sample(rng);
        if (s.size() <= max_raw_length) {
            out.push_back(std::move(s));
        }
    }
    return out;
}

inline DatasetSplits gen_synthetic(const SyntheticTaskSpec& spec, std::size_t seq_len) {
    const std::size_t classes = task_classes(spec.kind);
    for (std::size_t n : {spec.train, spec.valid, spec.test}) {
        if (n < classes * 10) {
            throw InputError("gen_synthetic: every split needs at least " + std::to_string(classes * 10) +
                             " examples, got " + std::to_string(n));
        }
    }
    Rng rng(spec.seed, Stream::data, static_cast<std::uint64_t>(spec.kind));
    std::set<std::string> seen;

    const auto make_labels = [&](std::size_t n) {
        std::vector<int> labels(n);
        if (spec.kind == TaskKind::paren3) {
            for (std::size_t i = 0; i < n; ++i) {
                labels[i] = static_cast<int>(i % 3);
            }
        } else {
            const std::size_t buggy = (n + 5) / 10;
            for (std::size_t i = 0; i < n; ++i) {
                labels[i] = i < buggy ? 1 : 0;
            }
        }
        rng.shuffle(labels);
        return labels;
    };

    const auto sample = [&](int label) {
        for (int attempt = 0; attempt < 10000; ++attempt) {
            std::string text;
            if (spec.kind == TaskKind::paren3) {
                text = synth::inject_defect(synth::clean_snippet(rng), label, rng);
            } else {
                text = synth::clean_expression(rng);
                if (label == 1) {
                    text = synth::swap_operands(text, rng.below(synth::operand_count(text) - 1));
                }
            }
            if (text.size() <= spec.max_raw_length && seen.insert(text).second) {
                return text;
            }
        }
        throw InputError("gen_synthetic: cannot produce distinct samples within max_raw_length " +
                         std::to_string(spec.max_raw_length));
    };

    const auto make = [&](std::size_t n) {
        std::vector<Example> ex;
        ex.reserve(n);
        for (int label : make_labels(n)) {
            ex.push_back({sample(label), label});
        }
        return make_split(std::move(ex), seq_len);
    };

    DatasetSplits ds;
    ds.name = std::string(to_string(spec.kind));
    ds.num_classes = classes;
    ds.train = make(spec.train);
    ds.valid = make(spec.valid);
    ds.test = make(spec.test);
    ds.class_frequency = class_counts(ds.train, classes);
    return ds;
}

} // namespace earlybird::data
