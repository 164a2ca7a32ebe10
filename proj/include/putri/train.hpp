#pragma once

#include <cstdint>
#include <vector>

#include "putri/model.hpp"

namespace putri {

struct TrainStats {
    double initial_loss = 0.0;  // mean next-token NLL on fixed probe windows
    double final_loss = 0.0;    // same windows after training
};

// Plain SGD on next-token cross-entropy over windows sampled from the token
// stream at PRNG-seeded offsets. Deterministic given (model, stream, seed).
// The probe windows for the returned stats are drawn from a separate stream
// derived from the seed, so initial/final losses are comparable.
TrainStats train_toy(ToyTransformer& model, const std::vector<int32_t>& stream, int steps,
                     double lr, uint64_t seed);

// Mean next-token NLL of one window through the training-side forward pass.
// Cross-checked in tests against the inference path's perplexity.
double training_loss(const ToyTransformer& model, const std::vector<int32_t>& window);

}  // namespace putri
