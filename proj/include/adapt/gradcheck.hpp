#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "adapt/numerics.hpp"

namespace adapt {

struct LossCheckResult {
    std::string loss_name;
    int instances = 0;
    int redraws = 0;
    double max_rel_err = 0.0;
    bool pass = false;
};

// Randomized gradient verification of the three stage objectives on small
// tie-free instances. Draws whose selection margins could let a central
// difference flip an argmin, a top-j boundary or a threshold event are
// rejected and redrawn.
std::vector<LossCheckResult> run_loss_gradchecks(std::uint64_t seed, int instances_per_loss,
                                                 double h = 1e-5, double tol = 1e-5);

}  // namespace adapt
