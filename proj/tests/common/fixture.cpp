#include "fixture.hpp"

#include "qeft/checkpoint.hpp"
#include "qeft/error.hpp"

#include <cstdio>
#include <filesystem>
#include <numeric>

namespace qeft::testing {

std::string data_path(const std::string& name) { return std::string(QEFT_DATA_DIR) + "/" + name; }

std::string work_path(const std::string& name) {
    const std::filesystem::path dir = std::filesystem::path(QEFT_WORK_DIR);
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

const CorpusSplit& corpus() {
    static const CorpusSplit split = split_corpus(tokenize(read_text_file(data_path("corpus.txt"))));
    return split;
}

TrainConfig base_train_config() {
    TrainConfig tc;
    tc.steps = 4000;
    return tc;
}

std::string trained_base_path() {
    trained_base();
    return work_path("base_" + std::to_string(base_train_config().steps) + ".qeft");
}

const DenseModel& trained_base() {
    static const DenseModel model = [] {
        const TrainConfig tc = base_train_config();
        const std::string path = work_path("base_" + std::to_string(tc.steps) + ".qeft");
        if (std::filesystem::exists(path)) {
            try {
                return load_dense(path);
            } catch (const Error&) {
                // Stale or damaged cache; retrain below.
            }
        }
        std::fprintf(stderr, "training the shared base model (%d steps), cached at %s\n", tc.steps, path.c_str());
        DenseModel m = train_dense(init_model(ModelConfig{}), corpus().train, tc).model;
        save_checkpoint(path, m);
        return m;
    }();
    return model;
}

DenseModel tiny_model(std::uint64_t seed) {
    ModelConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.head_dim = 8;
    c.d_ff = 32;
    c.n_blocks = 2;
    c.vocab_size = 32;
    c.max_seq = 64;
    c.seed = seed;
    return init_model(c);
}

Matrix random_matrix(int rows, int cols, Rng& rng, float stddev) {
    Matrix m(rows, cols);
    fill_normal(m, rng, stddev);
    return m;
}

QuantizedLinear random_structured_layer(int oc, int ic, int k, int bits, int group_size, Rng& rng) {
    const Matrix w = random_matrix(oc, ic, rng, 0.1f);
    std::vector<int> tail(k);
    std::iota(tail.begin(), tail.end(), ic - k);
    QuantizeOptions opt;
    opt.bits = bits;
    opt.group_size = group_size;
    opt.mode = QuantMode::rtn;
    opt.grid.steps = 8;
    return quantize_layer(w, tail, {}, opt);
}

} // namespace qeft::testing
