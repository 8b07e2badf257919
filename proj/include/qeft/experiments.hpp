#pragma once

#include "qeft/data.hpp"
#include "qeft/qmodel.hpp"

#include <string>
#include <vector>

namespace qeft {

enum class ReportFormat { text, csv };

struct QuantRecipe {
    int k = 8;
    int k_ffn = -1;
    int bits = 4;
    int group_size = 32;
    GridOptions grid{};
    int calib_count = 16;
    int calib_len = 128;
    std::uint64_t seed = 7;
};

std::vector<std::vector<int>> recipe_calibration(const QuantRecipe& r, std::span<const int> train);
PipelineOptions pipeline_options(const QuantRecipe& r, ReorderMode reorder, QuantMode mode);

struct EvalRow {
    std::string variant;
    double loss = 0.0;
    double ppl = 0.0;
};

// dense, rtn and qeft (OGR + OPTQ with grid search) on the eval split.
std::vector<EvalRow> eval_variants(const DenseModel& dense, const CorpusSplit& split, const QuantRecipe& r);
std::string format_eval(const std::vector<EvalRow>& rows, ReportFormat f);

struct AblationOptions {
    QuantRecipe recipe{};
    int prompt_tokens = 32;
    int gen_tokens = 32;
    int repeats = 3;
};

struct AblationRow {
    ReorderMode reorder = ReorderMode::ogr;
    bool group_wise = true;
    int group_size = 0; // 0: per-channel
    double ppl = 0.0;
    double tokens_per_sec = 0.0;
};

// {no reorder, online, OGR} x {per-channel, group-wise}.
std::vector<AblationRow> run_ablation(const DenseModel& dense, const CorpusSplit& split, const AblationOptions& opt);
std::string format_ablation(const std::vector<AblationRow>& rows, ReportFormat f);

struct BenchRow {
    std::string path;
    double tokens_per_sec = 0.0;
    long long bytes_read = 0;
    long long fma = 0;
    double kernel_ms = 0.0;
};

std::string format_bench(const std::vector<BenchRow>& rows, ReportFormat f);

} // namespace qeft
