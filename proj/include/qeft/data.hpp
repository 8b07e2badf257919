#pragma once

#include "qeft/model.hpp"

#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qeft {

// Byte-level tokenizer: token id == byte value.
std::vector<int> tokenize(std::string_view text);
std::string detokenize(std::span<const int> tokens);

std::string read_text_file(const std::string& path);

struct CorpusSplit {
    std::vector<int> train;
    std::vector<int> eval;
};

// The tail of the corpus is held out: eval_fraction of it, capped at max_eval_tokens.
CorpusSplit split_corpus(const std::vector<int>& tokens, double eval_fraction = 0.1, int max_eval_tokens = 8192);

// Random windows of seq_len + 1 tokens; targets are the inputs shifted by one.
SequenceBatch sample_batch(std::span<const int> tokens, int batch, int seq_len, Rng& rng);

// Non-overlapping windows covering `tokens`, grouped into batches.
std::vector<SequenceBatch> eval_batches(std::span<const int> tokens, int seq_len, int batch);

// `count` windows of `len` tokens drawn from `tokens` with a fixed seed.
std::vector<std::vector<int>> calibration_sequences(std::span<const int> tokens, int count, int len,
                                                    std::uint64_t seed);

using LogitsFn = std::function<Matrix(const SequenceBatch&)>;

// Mean next-token loss over every eval window position.
double evaluate_loss(const LogitsFn& logits, std::span<const int> tokens, int seq_len = 64, int batch = 8);
double evaluate_loss(const DenseModel& model, std::span<const int> tokens, int seq_len = 64, int batch = 8);

} // namespace qeft
