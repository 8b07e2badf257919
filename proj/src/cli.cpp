#include "qeft/cli.hpp"

#include "qeft/checkpoint.hpp"
#include "qeft/data.hpp"
#include "qeft/experiments.hpp"
#include "qeft/merging.hpp"
#include "qeft/tuning.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>

namespace qeft::cli {

namespace {

using json = nlohmann::json;

struct Binding {
    CLI::Option* opt;
    std::string key;
    std::function<void(const json&)> set;
    std::function<json()> get;
};

// Registers options on one subcommand and remembers how to fill them from a
// config file when the flag itself was not given.
class Flags {
public:
    explicit Flags(CLI::App* app) : app_(app) {}

    template <typename T>
    CLI::Option* add(const std::string& key, T& var, const std::string& desc) {
        CLI::Option* o = app_->add_option("--" + key, var, desc)->capture_default_str();
        bindings_.push_back({o, key, [&var](const json& j) { var = j.get<T>(); }, [&var] { return json(var); }});
        return o;
    }

    CLI::App* app() const { return app_; }
    const std::vector<Binding>& bindings() const { return bindings_; }

private:
    CLI::App* app_;
    std::vector<Binding> bindings_;
};

struct Common {
    std::uint64_t seed = 7;
    std::string format = "text";
    ReportFormat report() const { return format == "csv" ? ReportFormat::csv : ReportFormat::text; }
};

void add_common(Flags& f, Common& c) {
    f.add("seed", c.seed, "RNG seed (QEFT_SEED overrides the config file)");
    f.add("format", c.format, "report format")->check(CLI::IsMember({"text", "csv"}));
}

void add_recipe(Flags& f, QuantRecipe& r) {
    f.add("k", r.k, "weak columns per residual-fed layer");
    f.add("k-ffn", r.k_ffn, "weak columns on the FFN intermediate axis (-1: same as k)");
    f.add("bits", r.bits, "weight bits")->check(CLI::IsMember({3, 4}));
    f.add("group-size", r.group_size, "group size along the input axis (0: per-channel)");
    f.add("grid-steps", r.grid.steps, "grid-search steps per group");
    f.add("calib-count", r.calib_count, "calibration sequences");
    f.add("calib-len", r.calib_len, "calibration sequence length");
}

void check(bool ok, const std::string& msg) { require(ok, ErrorKind::invalid_config, msg); }

void validate_recipe(const QuantRecipe& r) {
    check(r.k >= 0, "--k must be >= 0");
    check(r.bits == 3 || r.bits == 4, "--bits must be 3 or 4");
    check(r.group_size >= 0, "--group-size must be >= 0");
    check(r.grid.steps >= 1, "--grid-steps must be >= 1");
    check(r.calib_count >= 1 && r.calib_len >= 2, "--calib-count and --calib-len must be positive");
}

CorpusSplit load_split(const std::string& path) { return split_corpus(tokenize(read_text_file(path))); }

void write_text(const std::string& path, const std::string& text) {
    write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                         text.size()));
}

struct Command {
    CLI::App* app = nullptr;
    std::unique_ptr<Flags> flags;
    Common common;
    std::function<int(const Common&)> body;
};

void apply_config(const Command& cmd, const json& file, bool seed_from_env, std::ostream& log) {
    const std::string section = cmd.app->get_name();
    for (const Binding& b : cmd.flags->bindings()) {
        std::string source = "default";
        if (b.opt->count() > 0) {
            source = "flag";
        } else if (b.key == "seed" && seed_from_env) {
            source = "env";
        } else if (file.contains(section) && file[section].contains(b.key)) {
            b.set(file[section][b.key]);
            source = "file";
        } else if (file.contains(b.key)) {
            b.set(file[b.key]);
            source = "file";
        }
        log << "config " << section << "." << b.key << " = " << b.get().dump() << " (" << source << ")\n";
    }
}

int cmd_train(const Common& c, const std::string& corpus, TrainConfig tc, const std::string& out,
              const std::string& log_path) {
    check(tc.steps >= 0 && tc.batch >= 1 && tc.seq_len >= 2 && tc.lr >= 0.0f, "invalid training hyperparameters");
    check(!out.empty(), "--out is required");
    const CorpusSplit split = load_split(corpus);
    ModelConfig mc;
    mc.seed = c.seed;
    tc.seed = c.seed;
    const DenseModel init = init_model(mc);
    const double before = evaluate_loss(init, split.eval);
    const TrainResult r = train_dense(init, split.train, tc);
    const double after = evaluate_loss(r.model, split.eval);
    save_checkpoint(out, r.model, {{"train.steps", std::to_string(tc.steps)}});
    if (!log_path.empty()) {
        std::string text;
        for (const TrainLogEntry& e : r.log) {
            text += json{{"step", e.step}, {"loss", e.loss}, {"grad_norm", e.grad_norm}}.dump() + "\n";
        }
        write_text(log_path, text);
    }
    std::cout << "eval loss " << before << " -> " << after << "\n";
    return 0;
}

ReportFormat fmt(const Common& c) { return c.report(); }

int cmd_calibrate(const Common& c, const std::string& model, const std::string& corpus, QuantRecipe r,
                  const std::string& out) {
    validate_recipe(r);
    check(!out.empty(), "--out is required");
    r.seed = c.seed;
    const DenseModel m = load_dense(model);
    const CorpusSplit split = load_split(corpus);
    CalibrationReport rep;
    rep.hessian = calibrate_diag(m, recipe_calibration(r, split.train));
    rep.weak = select_global(rep.hessian, m.config(), r.k, r.k_ffn);
    write_calibration_report(out, rep);
    std::cout << "residual weak columns:";
    for (int j : rep.weak.resid_indices) {
        std::cout << ' ' << j;
    }
    std::cout << "\n";
    return 0;
}

GlobalWeakColumns selection_for(const DenseModel& m, const CorpusSplit& split, const QuantRecipe& r,
                                const std::string& calib_path, HessianDiag* h_out) {
    if (!calib_path.empty()) {
        CalibrationReport rep = read_calibration_report(calib_path);
        require(static_cast<int>(rep.weak.resid_indices.size()) == r.k, ErrorKind::checkpoint_mismatch,
                "calibration report was produced with k = " + std::to_string(rep.weak.resid_indices.size()));
        if (h_out != nullptr) {
            *h_out = rep.hessian;
        }
        return rep.weak;
    }
    HessianDiag h = calibrate_diag(m, recipe_calibration(r, split.train));
    GlobalWeakColumns g = select_global(h, m.config(), r.k, r.k_ffn);
    if (h_out != nullptr) {
        *h_out = std::move(h);
    }
    return g;
}

int cmd_reorder(const Common& c, const std::string& model, const std::string& corpus, QuantRecipe r,
                const std::string& calib, const std::string& out, const std::string& plan_out) {
    validate_recipe(r);
    check(!out.empty() || !plan_out.empty(), "give --out and/or --plan-out");
    r.seed = c.seed;
    const DenseModel m = load_dense(model);
    const CorpusSplit split = load_split(corpus);
    const ReorderPlan plan = build_plan(selection_for(m, split, r, calib, nullptr), m.config());
    if (!out.empty()) {
        save_checkpoint(out, apply_ogr(m, plan), {{"reordered", "1"}});
    }
    if (!plan_out.empty()) {
        save_plan(plan_out, plan, m.config());
    }
    std::cout << "plan built for k = " << r.k << "\n";
    return 0;
}

int cmd_quantize(const Common& c, const std::string& model, const std::string& corpus, QuantRecipe r,
                 const std::string& mode, const std::string& reorder, const std::string& calib,
                 const std::string& out) {
    validate_recipe(r);
    check(!out.empty(), "--out is required");
    const auto ro = parse_reorder_mode(reorder);
    check(ro.has_value(), "--reorder must be none, online or ogr");
    check(mode == "optq" || mode == "rtn", "--mode must be optq or rtn");
    check(calib.empty() || *ro == ReorderMode::ogr, "--calib only applies to --reorder ogr");
    r.seed = c.seed;
    const DenseModel m = load_dense(model);
    const CorpusSplit split = load_split(corpus);
    const auto seqs = recipe_calibration(r, split.train);
    const PipelineOptions po = pipeline_options(r, *ro, mode == "optq" ? QuantMode::optq : QuantMode::rtn);
    PipelineResult res;
    if (!calib.empty()) {
        HessianDiag h;
        const GlobalWeakColumns g = selection_for(m, split, r, calib, &h);
        res = quantize_with_selection(m, seqs, g, h, po);
    } else {
        res = quantize_model(m, seqs, po);
    }
    save_checkpoint(out, res.model);
    const double l = evaluate_loss(res.model, split.eval);
    std::cout << "quantized eval loss " << l << " ppl " << std::exp(l) << "\n";
    return 0;
}

int cmd_finetune(const Common& c, const std::string& model, const std::string& corpus, FinetuneConfig fc, int k,
                 const std::string& out, const std::string& log_path) {
    check(fc.steps >= 0 && fc.batch >= 1 && fc.grad_accum >= 1 && fc.seq_len >= 2, "invalid fine-tuning settings");
    check(fc.lr >= 0.0f && fc.max_grad_norm >= 0.0f, "--lr and --max-grad-norm must be >= 0");
    check(!out.empty(), "--out is required");
    fc.seed = c.seed;
    const QuantizedModel q = load_quantized(model);
    require(k < 0 || k == q.k, ErrorKind::checkpoint_mismatch,
            "--k " + std::to_string(k) + " does not match the checkpoint's k = " + std::to_string(q.k));
    const CorpusSplit split = load_split(corpus);
    const double before = evaluate_loss(q, split.eval);
    const FinetuneResult r = finetune(q, split.train, fc);
    save_checkpoint(out, r.model, {{"finetune.steps", std::to_string(r.steps_done)}});
    if (!log_path.empty()) {
        std::string text;
        for (const FinetuneLogEntry& e : r.log) {
            text += json{{"step", e.step},
                         {"loss", e.loss},
                         {"grad_norm", e.grad_norm},
                         {"weight_grad_fma", e.counters.weight_grad_fma},
                         {"full_weight_grad_fma", e.counters.full_weight_grad_fma},
                         {"saved_elems", e.counters.saved_elems},
                         {"full_saved_elems", e.counters.full_saved_elems}}
                        .dump() +
                    "\n";
        }
        write_text(log_path, text);
    }
    require(!r.diverged, ErrorKind::numeric,
            "fine-tuning diverged after step " + std::to_string(r.steps_done) + "; last good model written to " + out);
    std::cout << "eval loss " << before << " -> " << evaluate_loss(r.model, split.eval) << "\n";
    return 0;
}

int cmd_extract(const std::string& tuned, const std::string& base, const std::string& out) {
    check(!out.empty(), "--out is required");
    save_checkpoint(out, extract_delta(load_quantized(tuned), load_quantized(base)));
    std::cout << "delta written to " << out << "\n";
    return 0;
}

int cmd_merge(const std::string& delta, const std::string& target, const std::string& kind, const std::string& out) {
    check(!out.empty(), "--out is required");
    check(kind == "dense" || kind == "quantized", "--target-kind must be dense or quantized");
    const WeakDelta d = load_delta(delta);
    if (kind == "dense") {
        save_checkpoint(out, apply_to_dense(load_dense(target), d));
    } else {
        save_checkpoint(out, apply_to_quantized(load_quantized(target), d));
    }
    std::cout << "merged model written to " << out << "\n";
    return 0;
}

BenchRow bench_row(const QuantizedModel& q, const std::string& label, std::span<const int> prompt, int tokens,
                   int repeats, bool reference) {
    const GenerateResult g = bench_generate(q, prompt, tokens, repeats, reference);
    BenchRow row;
    row.path = label;
    row.tokens_per_sec = g.tokens_per_sec;
    for (const auto& [id, s] : g.stats) {
        row.bytes_read += s.bytes_read;
        row.fma += s.fma;
        row.kernel_ms += static_cast<double>(s.elapsed_ns) * 1e-6;
    }
    return row;
}

int cmd_bench(const Common& c, const std::string& model, const std::string& corpus, QuantRecipe r,
              const std::string& path, int tokens, int repeats, int prompt_tokens, const std::string& report) {
    validate_recipe(r);
    check(tokens >= 0 && repeats >= 1 && prompt_tokens >= 1, "invalid --tokens, --repeats or --prompt-tokens");
    r.seed = c.seed;
    const Checkpoint ck = load_checkpoint(model);
    check(ck.kind == CheckpointKind::dense || ck.kind == CheckpointKind::quantized,
          "--model must be a dense or quantized checkpoint");
    const CorpusSplit split = load_split(corpus);
    check(static_cast<int>(split.eval.size()) >= prompt_tokens, "eval split shorter than --prompt-tokens");
    const std::span<const int> prompt(split.eval.data(), static_cast<std::size_t>(prompt_tokens));
    const std::vector<std::string> paths =
        path == "all" ? std::vector<std::string>{"structured", "irregular", "online", "reference"}
                      : std::vector<std::string>{path};
    std::vector<BenchRow> rows;
    if (ck.kind == CheckpointKind::dense) {
        const auto seqs = recipe_calibration(r, split.train);
        std::map<ReorderMode, QuantizedModel> variants;
        auto variant = [&](ReorderMode m) -> const QuantizedModel& {
            if (!variants.count(m)) {
                variants.emplace(m, quantize_model(*ck.dense, seqs, pipeline_options(r, m, QuantMode::optq)).model);
            }
            return variants.at(m);
        };
        for (const std::string& p : paths) {
            const ReorderMode m = p == "irregular" ? ReorderMode::none
                                  : p == "online"  ? ReorderMode::online
                                                   : ReorderMode::ogr;
            rows.push_back(bench_row(variant(m), p, prompt, tokens, repeats, p == "reference"));
        }
    } else {
        const QuantizedModel& q = *ck.quantized;
        const std::string native = q.reorder == ReorderMode::ogr    ? "structured"
                                   : q.reorder == ReorderMode::none ? "irregular"
                                                                    : "online";
        for (const std::string& p : paths) {
            if (path == "all" && p != native && p != "reference") {
                continue;
            }
            require(p == native || p == "reference", ErrorKind::checkpoint_mismatch,
                    "a " + std::string(to_string(q.reorder)) + " checkpoint runs the " + native + " path, not " + p);
            rows.push_back(bench_row(q, p, prompt, tokens, repeats, p == "reference"));
        }
    }
    const std::string table = format_bench(rows, fmt(c));
    std::cout << table;
    auto find = [&](const std::string& p) -> const BenchRow* {
        for (const BenchRow& b : rows) {
            if (b.path == p) {
                return &b;
            }
        }
        return nullptr;
    };
    const BenchRow* s = find("structured");
    const BenchRow* i = find("irregular");
    const BenchRow* o = find("online");
    if (s && i && i->tokens_per_sec > 0) {
        std::cerr << "ratio structured/irregular " << s->tokens_per_sec / i->tokens_per_sec << "\n";
    }
    if (s && o && o->tokens_per_sec > 0) {
        std::cerr << "ratio structured/online " << s->tokens_per_sec / o->tokens_per_sec << "\n";
    }
    if (!report.empty()) {
        write_text(report, format_bench(rows, ReportFormat::csv));
    }
    return 0;
}

int cmd_eval(const Common& c, const std::string& model, const std::string& corpus, QuantRecipe r,
             const std::string& quantized) {
    validate_recipe(r);
    r.seed = c.seed;
    const DenseModel m = load_dense(model);
    const CorpusSplit split = load_split(corpus);
    std::vector<EvalRow> rows = eval_variants(m, split, r);
    if (!quantized.empty()) {
        const QuantizedModel q = load_quantized(quantized);
        require(q.config() == m.config() || fingerprint(q.config()) == fingerprint(m.config()),
                ErrorKind::checkpoint_mismatch, "--quantized does not match the dense model's architecture");
        const double l = evaluate_loss(q, split.eval);
        rows.push_back({"checkpoint", l, std::exp(l)});
    }
    std::cout << format_eval(rows, fmt(c));
    return 0;
}

int cmd_ablate(const Common& c, const std::string& model, const std::string& corpus, AblationOptions opt,
               const std::string& out) {
    validate_recipe(opt.recipe);
    check(opt.gen_tokens >= 1 && opt.repeats >= 1 && opt.prompt_tokens >= 1,
          "invalid --tokens, --repeats or --prompt-tokens");
    opt.recipe.seed = c.seed;
    const DenseModel m = load_dense(model);
    const CorpusSplit split = load_split(corpus);
    const std::vector<AblationRow> rows = run_ablation(m, split, opt);
    const std::string table = format_ablation(rows, fmt(c));
    std::cout << table;
    if (!out.empty()) {
        write_text(out, format_ablation(rows, ReportFormat::csv));
    }
    return 0;
}

} // namespace

int exit_code(ErrorKind k) { return 10 + static_cast<int>(k); }

int run(const std::vector<std::string>& args) {
    CLI::App app{"Outlier-aware mixed-precision quantization with weak-column fine-tuning"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file (flags take precedence)");

    std::vector<std::unique_ptr<Command>> cmds;
    auto make = [&](const std::string& name, const std::string& desc) -> Command& {
        auto c = std::make_unique<Command>();
        c->app = app.add_subcommand(name, desc);
        c->flags = std::make_unique<Flags>(c->app);
        add_common(*c->flags, c->common);
        cmds.push_back(std::move(c));
        return *cmds.back();
    };

    // Flag storage outlives parsing; one block per subcommand.
    std::string corpus = "data/corpus.txt";
    std::string model, out, log_path, calib, plan_out, mode = "optq", reorder = "ogr", quantized;
    std::string tuned, base, delta, target, target_kind = "dense", path = "all", report;
    TrainConfig tc;
    QuantRecipe recipe;
    FinetuneConfig fc;
    int ft_k = -1;
    AblationOptions ab;
    int bench_tokens = 32, bench_repeats = 3, bench_prompt = 32;

    {
        Command& c = make("train", "train the dense model");
        Flags& f = *c.flags;
        f.add("corpus", corpus, "training text");
        f.add("steps", tc.steps, "optimizer steps");
        f.add("lr", tc.lr, "peak learning rate");
        f.add("batch", tc.batch, "sequences per step");
        f.add("seq-len", tc.seq_len, "tokens per sequence");
        f.add("out", out, "output checkpoint");
        f.add("log", log_path, "training log (JSON lines)");
        c.body = [&](const Common& cm) { return cmd_train(cm, corpus, tc, out, log_path); };
    }
    {
        Command& c = make("calibrate", "compute sensitivities and the global weak-column selection");
        Flags& f = *c.flags;
        f.add("model", model, "dense checkpoint")->required();
        f.add("corpus", corpus, "calibration text");
        add_recipe(f, recipe);
        f.add("out", out, "calibration report (JSON lines)");
        c.body = [&](const Common& cm) { return cmd_calibrate(cm, model, corpus, recipe, out); };
    }
    {
        Command& c = make("reorder", "build the global reorder plan and apply it");
        Flags& f = *c.flags;
        f.add("model", model, "dense checkpoint")->required();
        f.add("corpus", corpus, "calibration text");
        add_recipe(f, recipe);
        f.add("calib", calib, "calibration report to reuse");
        f.add("out", out, "reordered dense checkpoint");
        f.add("plan-out", plan_out, "reorder plan file");
        c.body = [&](const Common& cm) { return cmd_reorder(cm, model, corpus, recipe, calib, out, plan_out); };
    }
    {
        Command& c = make("quantize", "quantize a dense checkpoint");
        Flags& f = *c.flags;
        f.add("model", model, "dense checkpoint")->required();
        f.add("corpus", corpus, "calibration text");
        add_recipe(f, recipe);
        f.add("mode", mode, "rounding")->check(CLI::IsMember({"optq", "rtn"}));
        f.add("reorder", reorder, "reorder technique")->check(CLI::IsMember({"none", "online", "ogr"}));
        f.add("calib", calib, "calibration report to reuse");
        f.add("out", out, "quantized checkpoint");
        c.body = [&](const Common& cm) { return cmd_quantize(cm, model, corpus, recipe, mode, reorder, calib, out); };
    }
    {
        Command& c = make("finetune", "train the weak columns of a quantized checkpoint");
        Flags& f = *c.flags;
        f.add("model", model, "quantized checkpoint")->required();
        f.add("corpus", corpus, "training text");
        f.add("lr", fc.lr, "learning rate (constant)");
        f.add("steps", fc.steps, "optimizer steps");
        f.add("batch", fc.batch, "sequences per micro-batch");
        f.add("seq-len", fc.seq_len, "tokens per sequence");
        f.add("grad-accum", fc.grad_accum, "micro-batches per step");
        f.add("max-grad-norm", fc.max_grad_norm, "global gradient clipping norm");
        f.add("k", ft_k, "expected weak column count (-1: take the checkpoint's)");
        f.add("out", out, "tuned checkpoint");
        f.add("log", log_path, "training log (JSON lines)");
        c.body = [&](const Common& cm) { return cmd_finetune(cm, model, corpus, fc, ft_k, out, log_path); };
    }
    {
        Command& c = make("extract", "extract the weak-column delta of a tuned checkpoint");
        Flags& f = *c.flags;
        f.add("tuned", tuned, "tuned quantized checkpoint")->required();
        f.add("base", base, "quantized checkpoint it was tuned from")->required();
        f.add("out", out, "delta file");
        c.body = [&](const Common&) { return cmd_extract(tuned, base, out); };
    }
    {
        Command& c = make("merge", "add a weak-column delta to a sibling model");
        Flags& f = *c.flags;
        f.add("delta", delta, "delta file")->required();
        f.add("target", target, "target checkpoint")->required();
        f.add("target-kind", target_kind, "target type")->check(CLI::IsMember({"dense", "quantized"}));
        f.add("out", out, "merged checkpoint");
        c.body = [&](const Common&) { return cmd_merge(delta, target, target_kind, out); };
    }
    {
        Command& c = make("bench", "greedy generation throughput per kernel path");
        Flags& f = *c.flags;
        f.add("model", model, "dense (variants are quantized on the fly) or quantized checkpoint")->required();
        f.add("corpus", corpus, "prompt and calibration text");
        add_recipe(f, recipe);
        f.add("path", path, "kernel path")
            ->check(CLI::IsMember({"structured", "irregular", "online", "reference", "all"}));
        f.add("tokens", bench_tokens, "generated tokens per run");
        f.add("repeats", bench_repeats, "runs; the median is reported");
        f.add("prompt-tokens", bench_prompt, "prompt length taken from the eval split");
        f.add("report", report, "CSV report file");
        c.body = [&](const Common& cm) {
            return cmd_bench(cm, model, corpus, recipe, path, bench_tokens, bench_repeats, bench_prompt, report);
        };
    }
    {
        Command& c = make("eval", "held-out perplexity of dense, rtn and qeft variants");
        Flags& f = *c.flags;
        f.add("model", model, "dense checkpoint")->required();
        f.add("corpus", corpus, "evaluation text");
        add_recipe(f, recipe);
        f.add("quantized", quantized, "additional quantized checkpoint to evaluate");
        c.body = [&](const Common& cm) { return cmd_eval(cm, model, corpus, recipe, quantized); };
    }
    {
        Command& c = make("ablate", "reorder technique x group-wise quantization grid");
        Flags& f = *c.flags;
        f.add("model", model, "dense checkpoint")->required();
        f.add("corpus", corpus, "calibration and evaluation text");
        add_recipe(f, ab.recipe);
        f.add("tokens", ab.gen_tokens, "generated tokens per throughput run");
        f.add("repeats", ab.repeats, "throughput runs; the median is reported");
        f.add("prompt-tokens", ab.prompt_tokens, "prompt length");
        f.add("out", out, "CSV report file");
        c.body = [&](const Common& cm) { return cmd_ablate(cm, model, corpus, ab, out); };
    }

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        json file = json::object();
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            require(static_cast<bool>(in), ErrorKind::io, "cannot open config file " + config_path);
            try {
                file = json::parse(in);
            } catch (const json::exception& e) {
                fail(ErrorKind::invalid_config, "config file " + config_path + ": " + e.what());
            }
            require(file.is_object(), ErrorKind::invalid_config, "config file must hold a JSON object");
        }
        for (auto& c : cmds) {
            if (!c->app->parsed()) {
                continue;
            }
            bool seed_from_env = false;
            if (const char* env = std::getenv("QEFT_SEED")) {
                CLI::Option* seed_opt = c->app->get_option("--seed");
                if (seed_opt->count() == 0) {
                    try {
                        c->common.seed = std::stoull(env);
                    } catch (const std::logic_error&) {
                        fail(ErrorKind::invalid_config, std::string("QEFT_SEED is not an unsigned integer: ") + env);
                    }
                    seed_from_env = true;
                }
            }
            try {
                apply_config(*c, file, seed_from_env, std::cerr);
            } catch (const json::exception& e) {
                fail(ErrorKind::invalid_config, std::string("config value has the wrong type: ") + e.what());
            }
            check(c->common.format == "text" || c->common.format == "csv", "--format must be text or csv");
            return c->body(c->common);
        }
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

int run(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) {
        args.emplace_back(argv[i]);
    }
    return run(args);
}

} // namespace qeft::cli
