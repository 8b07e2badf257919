#include "qeft/data.hpp"

#include "qeft/error.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace qeft {

std::vector<int> tokenize(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char ch : text) {
        ids.push_back(static_cast<unsigned char>(ch));
    }
    return ids;
}

std::string detokenize(std::span<const int> tokens) {
    std::string s;
    s.reserve(tokens.size());
    for (int t : tokens) {
        s.push_back(static_cast<char>(t & 0xff));
    }
    return s;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::io, "cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

CorpusSplit split_corpus(const std::vector<int>& tokens, double eval_fraction, int max_eval_tokens) {
    auto n_eval = static_cast<std::size_t>(static_cast<double>(tokens.size()) * eval_fraction);
    n_eval = std::min(n_eval, static_cast<std::size_t>(std::max(0, max_eval_tokens)));
    CorpusSplit s;
    const auto cut = tokens.size() - n_eval;
    s.train.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(cut));
    s.eval.assign(tokens.begin() + static_cast<std::ptrdiff_t>(cut), tokens.end());
    return s;
}

SequenceBatch sample_batch(std::span<const int> tokens, int batch, int seq_len, Rng& rng) {
    require(static_cast<int>(tokens.size()) > seq_len, ErrorKind::invalid_argument,
            "sample_batch: corpus shorter than one window");
    std::uniform_int_distribution<std::size_t> start(0, tokens.size() - static_cast<std::size_t>(seq_len) - 1);
    SequenceBatch b;
    b.batch = batch;
    b.seq_len = seq_len;
    b.tokens.reserve(static_cast<std::size_t>(batch) * seq_len);
    b.targets.reserve(b.tokens.capacity());
    for (int i = 0; i < batch; ++i) {
        const std::size_t s = start(rng);
        for (int t = 0; t < seq_len; ++t) {
            b.tokens.push_back(tokens[s + t]);
            b.targets.push_back(tokens[s + t + 1]);
        }
    }
    return b;
}

std::vector<SequenceBatch> eval_batches(std::span<const int> tokens, int seq_len, int batch) {
    std::vector<SequenceBatch> out;
    if (tokens.size() < static_cast<std::size_t>(seq_len) + 1) {
        return out;
    }
    const std::size_t windows = (tokens.size() - 1) / static_cast<std::size_t>(seq_len);
    SequenceBatch cur{0, seq_len, {}, {}};
    for (std::size_t w = 0; w < windows; ++w) {
        const std::size_t s = w * static_cast<std::size_t>(seq_len);
        for (int t = 0; t < seq_len; ++t) {
            cur.tokens.push_back(tokens[s + t]);
            cur.targets.push_back(tokens[s + t + 1]);
        }
        if (++cur.batch == batch) {
            out.push_back(std::move(cur));
            cur = SequenceBatch{0, seq_len, {}, {}};
        }
    }
    if (cur.batch > 0) {
        out.push_back(std::move(cur));
    }
    return out;
}

std::vector<std::vector<int>> calibration_sequences(std::span<const int> tokens, int count, int len,
                                                    std::uint64_t seed) {
    require(static_cast<int>(tokens.size()) >= len, ErrorKind::invalid_argument,
            "calibration_sequences: corpus shorter than one sequence");
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> start(0, tokens.size() - static_cast<std::size_t>(len));
    std::vector<std::vector<int>> seqs;
    for (int i = 0; i < count; ++i) {
        const std::size_t s = start(rng);
        seqs.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(s),
                          tokens.begin() + static_cast<std::ptrdiff_t>(s + len));
    }
    return seqs;
}

double evaluate_loss(const LogitsFn& logits, std::span<const int> tokens, int seq_len, int batch) {
    double total = 0.0;
    long long count = 0;
    for (const SequenceBatch& b : eval_batches(tokens, seq_len, batch)) {
        const Matrix l = logits(b);
        total += cross_entropy(l, b.targets) * b.positions();
        count += b.positions();
    }
    require(count > 0, ErrorKind::invalid_argument, "evaluate_loss: eval split shorter than one window");
    return total / static_cast<double>(count);
}

double evaluate_loss(const DenseModel& model, std::span<const int> tokens, int seq_len, int batch) {
    return evaluate_loss([&](const SequenceBatch& b) { return forward_batch(model, b); }, tokens, seq_len, batch);
}

} // namespace qeft
