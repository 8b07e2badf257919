#include "qeft/experiments.hpp"

#include "qeft/error.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace qeft {

namespace {

std::string fixed(double v, int prec) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

const char* reorder_label(ReorderMode m) {
    switch (m) {
    case ReorderMode::none: return "none";
    case ReorderMode::online: return "online";
    case ReorderMode::ogr: return "offline-global";
    }
    return "?";
}

// Pads every column to its widest cell.
std::string text_table(const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> w;
    for (const auto& r : rows) {
        w.resize(std::max(w.size(), r.size()), 0);
        for (std::size_t i = 0; i < r.size(); ++i) {
            w[i] = std::max(w[i], r[i].size());
        }
    }
    std::ostringstream os;
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            os << r[i] << std::string(w[i] - r[i].size() + (i + 1 < r.size() ? 2 : 0), ' ');
        }
        os << '\n';
    }
    return os.str();
}

std::string csv_table(const std::vector<std::vector<std::string>>& rows) {
    std::ostringstream os;
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            os << (i ? "," : "") << r[i];
        }
        os << '\n';
    }
    return os.str();
}

std::string render(const std::vector<std::vector<std::string>>& rows, ReportFormat f) {
    return f == ReportFormat::csv ? csv_table(rows) : text_table(rows);
}

} // namespace

std::vector<std::vector<int>> recipe_calibration(const QuantRecipe& r, std::span<const int> train) {
    return calibration_sequences(train, r.calib_count, r.calib_len, r.seed);
}

PipelineOptions pipeline_options(const QuantRecipe& r, ReorderMode reorder, QuantMode mode) {
    PipelineOptions po;
    po.k = r.k;
    po.k_ffn = r.k_ffn;
    po.reorder = reorder;
    po.quant.bits = r.bits;
    po.quant.group_size = r.group_size;
    po.quant.mode = mode;
    po.quant.grid = r.grid;
    return po;
}

std::vector<EvalRow> eval_variants(const DenseModel& dense, const CorpusSplit& split, const QuantRecipe& r) {
    const auto calib = recipe_calibration(r, split.train);
    std::vector<EvalRow> rows;
    const double ld = evaluate_loss(dense, split.eval);
    rows.push_back({"dense", ld, std::exp(ld)});
    for (const QuantMode mode : {QuantMode::rtn, QuantMode::optq}) {
        const QuantizedModel q = quantize_model(dense, calib, pipeline_options(r, ReorderMode::ogr, mode)).model;
        const double l = evaluate_loss(q, split.eval);
        rows.push_back({mode == QuantMode::rtn ? "rtn" : "qeft", l, std::exp(l)});
    }
    return rows;
}

std::string format_eval(const std::vector<EvalRow>& rows, ReportFormat f) {
    std::vector<std::vector<std::string>> t{{"variant", "loss", "ppl"}};
    for (const EvalRow& r : rows) {
        t.push_back({r.variant, fixed(r.loss, 6), fixed(r.ppl, 6)});
    }
    return render(t, f);
}

std::vector<AblationRow> run_ablation(const DenseModel& dense, const CorpusSplit& split, const AblationOptions& opt) {
    require(static_cast<int>(split.eval.size()) >= opt.prompt_tokens, ErrorKind::invalid_argument,
            "ablation: eval split shorter than the prompt");
    const auto calib = recipe_calibration(opt.recipe, split.train);
    const std::span<const int> prompt(split.eval.data(), static_cast<std::size_t>(opt.prompt_tokens));
    std::vector<AblationRow> rows;
    for (const ReorderMode mode : {ReorderMode::none, ReorderMode::online, ReorderMode::ogr}) {
        for (const bool group_wise : {false, true}) {
            QuantRecipe r = opt.recipe;
            if (!group_wise) {
                r.group_size = 0;
            }
            const QuantizedModel q = quantize_model(dense, calib, pipeline_options(r, mode, QuantMode::optq)).model;
            AblationRow row;
            row.reorder = mode;
            row.group_wise = group_wise;
            row.group_size = group_wise ? r.group_size : 0;
            row.ppl = std::exp(evaluate_loss(q, split.eval));
            row.tokens_per_sec = bench_generate(q, prompt, opt.gen_tokens, opt.repeats).tokens_per_sec;
            rows.push_back(row);
        }
    }
    return rows;
}

std::string format_ablation(const std::vector<AblationRow>& rows, ReportFormat f) {
    std::vector<std::vector<std::string>> t{{"reorder", "group_wise", "group_size", "ppl", "tokens_per_s"}};
    for (const AblationRow& r : rows) {
        t.push_back({reorder_label(r.reorder), r.group_wise ? "yes" : "no", std::to_string(r.group_size),
                     fixed(r.ppl, 4), fixed(r.tokens_per_sec, 1)});
    }
    return render(t, f);
}

std::string format_bench(const std::vector<BenchRow>& rows, ReportFormat f) {
    std::vector<std::vector<std::string>> t{{"path", "tokens_per_s", "kernel_ms", "bytes_read", "fma"}};
    for (const BenchRow& r : rows) {
        t.push_back({r.path, fixed(r.tokens_per_sec, 1), fixed(r.kernel_ms, 2), std::to_string(r.bytes_read),
                     std::to_string(r.fma)});
    }
    return render(t, f);
}

} // namespace qeft
