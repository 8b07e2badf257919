#pragma once

#include "qeft/data.hpp"
#include "qeft/error.hpp"
#include "qeft/model.hpp"
#include "qeft/quantizer.hpp"

#include <string>

namespace qeft::testing {

std::string data_path(const std::string& name);
// Scratch directory inside the build tree.
std::string work_path(const std::string& name);

const CorpusSplit& corpus();

// Recipe of the shared trained model.
TrainConfig base_train_config();

// Trained once per build tree and cached as a checkpoint.
const DenseModel& trained_base();
std::string trained_base_path();

// Small random model for tests that do not need training.
DenseModel tiny_model(std::uint64_t seed = 3);

Matrix random_matrix(int rows, int cols, Rng& rng, float stddev = 1.0f);

// Quantized layer in structured layout with the last k columns weak.
QuantizedLinear random_structured_layer(int oc, int ic, int k, int bits, int group_size, Rng& rng);

} // namespace qeft::testing
