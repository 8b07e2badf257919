#include "fixture.hpp"

#include "qeft/checkpoint.hpp"
#include "qeft/cli.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace qeft;
using qeft::testing::data_path;
using qeft::testing::work_path;

namespace {

struct Run {
    int code = 0;
    std::string out;
    std::string err;
};

Run run(std::vector<std::string> args) {
    std::ostringstream out, err;
    auto* old_out = std::cout.rdbuf(out.rdbuf());
    auto* old_err = std::cerr.rdbuf(err.rdbuf());
    Run r;
    r.code = cli::run(args);
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

// A slice of the shipped corpus keeps evaluation short.
std::string corpus() {
    static const std::string path = [] {
        const std::string text = read_text_file(data_path("corpus.txt"));
        const std::string p = work_path("cli_corpus.txt");
        std::ofstream(p, std::ios::binary) << text.substr(0, 40000);
        return p;
    }();
    return path;
}

int line_count(const std::string& s) {
    int n = 0;
    for (char c : s) {
        n += c == '\n';
    }
    return n;
}

// Trained once for the whole file.
const std::string& dense_path() {
    static const std::string path = [] {
        const std::string p = work_path("cli_dense.qeft");
        const Run r = run({"train", "--corpus", corpus(), "--steps", "30", "--out", p, "--log",
                           work_path("cli_train.jsonl")});
        REQUIRE(r.code == 0);
        return p;
    }();
    return path;
}

std::vector<std::string> quick_recipe() { return {"--calib-count", "4", "--calib-len", "64", "--grid-steps", "8"}; }

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

} // namespace

TEST_CASE("exit codes") {
    CHECK(cli::exit_code(ErrorKind::invalid_config) == 10);
    CHECK(cli::exit_code(ErrorKind::io) == 14);
    CHECK(cli::exit_code(ErrorKind::checkpoint_mismatch) == 20);
    CHECK(cli::exit_code(ErrorKind::numeric) == 22);
}

TEST_CASE("usage errors exit with 2 before any work") {
    CHECK(run({}).code == 2);
    CHECK(run({"frobnicate"}).code == 2);
    CHECK(run({"quantize", "--model", "x.qeft", "--bits", "5"}).code == 2);
    CHECK(run({"quantize", "--model", "x.qeft", "--reorder", "sideways"}).code == 2);
    CHECK(run({"bench", "--model", "x.qeft", "--path", "fastest"}).code == 2);
    CHECK(run({"merge", "--delta", "d.qeft"}).code == 2);
    CHECK(run({"--help"}).code == 0);
}

TEST_CASE("failures map to distinct exit codes") {
    const Run missing = run({"quantize", "--model", work_path("nope.qeft"), "--out", work_path("x.qeft")});
    CHECK(missing.code == 14);
    CHECK(missing.err.find("error: ") != std::string::npos);
    CHECK(line_count(missing.err.substr(missing.err.find("error: "))) == 1);

    CHECK(run({"train", "--corpus", corpus(), "--steps", "-1", "--out", work_path("x.qeft")}).code == 10);
    CHECK(run({"calibrate", "--model", dense_path(), "--k", "-2", "--out", work_path("x.jsonl")}).code == 10);
    // A dense checkpoint where a quantized one is required.
    CHECK(run({"finetune", "--model", dense_path(), "--corpus", corpus(), "--out", work_path("x.qeft")}).code == 20);

    std::ofstream(work_path("bad.json")) << "{ not json";
    CHECK(run({"--config", work_path("bad.json"), "eval", "--model", dense_path()}).code == 10);
    std::ofstream(work_path("wrong_type.json")) << R"({"eval": {"k": "eight"}})";
    CHECK(run({"--config", work_path("wrong_type.json"), "eval", "--model", dense_path()}).code == 10);
}

TEST_CASE("config precedence is flag, environment, file, default") {
    std::ofstream(work_path("cfg.json")) << R"({"seed": 5, "quantize": {"bits": 3, "group-size": 16}})";
    const std::string out = work_path("cfg_q.qeft");
    auto args = cat({"--config", work_path("cfg.json"), "quantize", "--model", dense_path(), "--corpus", corpus(),
                     "--group-size", "64", "--out", out},
                    quick_recipe());
    const Run r = run(args);
    REQUIRE(r.code == 0);
    CHECK(r.err.find("config quantize.bits = 3 (file)") != std::string::npos);
    CHECK(r.err.find("config quantize.group-size = 64 (flag)") != std::string::npos);
    CHECK(r.err.find("config quantize.seed = 5 (file)") != std::string::npos);
    CHECK(r.err.find("config quantize.k = 8 (default)") != std::string::npos);
    const QuantizedModel q = load_quantized(out);
    CHECK(q.options.bits == 3);
    CHECK(q.options.group_size == 64);

    setenv("QEFT_SEED", "12", 1);
    const Run e = run(args);
    CHECK(e.err.find("config quantize.seed = 12 (env)") != std::string::npos);
    args.push_back("--seed");
    args.push_back("3");
    const Run f = run(args);
    CHECK(f.err.find("config quantize.seed = 3 (flag)") != std::string::npos);
    unsetenv("QEFT_SEED");
}

TEST_CASE("full pipeline through the command line") {
    const std::string calib = work_path("cli_calib.jsonl");
    const std::string plan = work_path("cli_plan.qeft");
    const std::string q = work_path("cli_q.qeft");
    const std::string tuned = work_path("cli_tuned.qeft");
    const std::string delta = work_path("cli_delta.qeft");
    const auto dense_bytes = read_file_bytes(dense_path());

    REQUIRE(run(cat({"calibrate", "--model", dense_path(), "--corpus", corpus(), "--out", calib}, quick_recipe()))
                .code == 0);
    REQUIRE(run(cat({"reorder", "--model", dense_path(), "--corpus", corpus(), "--calib", calib, "--plan-out", plan},
                    quick_recipe()))
                .code == 0);
    REQUIRE(run(cat({"quantize", "--model", dense_path(), "--corpus", corpus(), "--calib", calib, "--out", q},
                    quick_recipe()))
                .code == 0);
    CHECK(load_quantized(q).plan == load_plan(plan));

    const std::vector<std::string> ft{"finetune", "--model",      q,   "--corpus", corpus(), "--steps", "2",
                                      "--grad-accum", "1",   "--seq-len", "32", "--out", tuned, "--log",
                                      work_path("cli_ft.jsonl")};
    REQUIRE(run(ft).code == 0);
    std::ifstream log(work_path("cli_ft.jsonl"));
    std::string first;
    std::getline(log, first);
    CHECK(first.find("\"grad_norm\"") != std::string::npos);
    CHECK(first.find("\"weight_grad_fma\"") != std::string::npos);
    CHECK(run(cat(ft, {"--k", "4"})).code == 20);

    REQUIRE(run({"extract", "--tuned", tuned, "--base", q, "--out", delta}).code == 0);
    REQUIRE(run({"merge", "--delta", delta, "--target", dense_path(), "--out", work_path("cli_merged_d.qeft")}).code ==
            0);
    REQUIRE(run({"merge", "--delta", delta, "--target", q, "--target-kind", "quantized", "--out",
                 work_path("cli_merged_q.qeft")})
                .code == 0);
    CHECK(load_quantized(work_path("cli_merged_q.qeft")) == load_quantized(tuned));
    CHECK(run({"extract", "--tuned", dense_path(), "--base", q, "--out", delta}).code == 20);

    const Run ev = run(cat({"eval", "--model", dense_path(), "--corpus", corpus(), "--quantized", tuned, "--format",
                            "csv"},
                           quick_recipe()));
    REQUIRE(ev.code == 0);
    CHECK(line_count(ev.out) == 5);
    CHECK(ev.out.rfind("variant,loss,ppl\ndense,", 0) == 0);

    const Run be = run({"bench", "--model", q, "--corpus", corpus(), "--tokens", "4", "--repeats", "1",
                        "--prompt-tokens", "8", "--report", work_path("cli_bench.csv")});
    REQUIRE(be.code == 0);
    CHECK(line_count(be.out) == 3);
    CHECK(be.out.find("structured") != std::string::npos);
    CHECK(be.out.find("reference") != std::string::npos);
    CHECK(run({"bench", "--model", q, "--corpus", corpus(), "--path", "irregular"}).code == 20);

    CHECK(read_file_bytes(dense_path()) == dense_bytes);
}

TEST_CASE("ablate prints the header and six rows") {
    const Run r = run(cat({"ablate", "--model", dense_path(), "--corpus", corpus(), "--tokens", "4", "--repeats", "1",
                           "--prompt-tokens", "8", "--format", "csv"},
                          quick_recipe()));
    REQUIRE(r.code == 0);
    CHECK(line_count(r.out) == 7);
    CHECK(r.out.rfind("reorder,group_wise,group_size,ppl,tokens_per_s\n", 0) == 0);
}

TEST_CASE("same flags and seed give identical files") {
    const auto q = [](const std::string& out) {
        return run(cat({"quantize", "--model", dense_path(), "--corpus", corpus(), "--out", out}, quick_recipe()))
            .code;
    };
    REQUIRE(q(work_path("rep_a.qeft")) == 0);
    REQUIRE(q(work_path("rep_b.qeft")) == 0);
    CHECK(read_file_bytes(work_path("rep_a.qeft")) == read_file_bytes(work_path("rep_b.qeft")));

    const auto ft = [](const std::string& out) {
        return run({"finetune", "--model", work_path("rep_a.qeft"), "--corpus", corpus(), "--steps", "1",
                    "--grad-accum", "1", "--seq-len", "32", "--out", out})
            .code;
    };
    REQUIRE(ft(work_path("rep_ta.qeft")) == 0);
    REQUIRE(ft(work_path("rep_tb.qeft")) == 0);
    CHECK(read_file_bytes(work_path("rep_ta.qeft")) == read_file_bytes(work_path("rep_tb.qeft")));
}

TEST_CASE("divergence saves the last good model and exits with the numeric code") {
    const std::string q = work_path("div_q.qeft");
    REQUIRE(run(cat({"quantize", "--model", dense_path(), "--corpus", corpus(), "--out", q}, quick_recipe())).code ==
            0);
    const std::string out = work_path("div_t.qeft");
    const Run r = run({"finetune", "--model", q, "--corpus", corpus(), "--steps", "2", "--grad-accum", "1",
                       "--seq-len", "32", "--lr", "1e38", "--max-grad-norm", "0", "--out", out});
    CHECK(r.code == 22);
    const Checkpoint c = load_checkpoint(out);
    CHECK(std::stoi(c.metadata.at("finetune.steps")) < 2);
    for (const QLayer& l : c.quantized->layers) {
        CHECK(all_finite(l.q.weak.data));
    }
}
