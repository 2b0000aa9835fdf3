#pragma once

// Central finite-difference verification of analytic gradients, always in
// 64-bit. For big parameter tensors a deterministic random subset of
// components is probed; small tensors are checked exhaustively.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vground/array.hpp"

namespace vground {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    bool pass = false;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tol = 0.0;
    double h = 0.0;

    bool pass() const {
        for (const auto& e : entries)
            if (!e.pass) return false;
        return !entries.empty();
    }
    double worst() const {
        double w = 0.0;
        for (const auto& e : entries) w = std::max(w, e.max_rel_err);
        return w;
    }
};

struct GradCheckOptions {
    double h = 1e-5;
    double tol = 1e-5;
    // Components probed per parameter; tensors at or below this size are
    // checked exhaustively. 0 = always exhaustive.
    int sampled_components = 0;
    std::uint64_t seed = 0;
};

// `f` must deterministically evaluate the scalar loss from the current
// parameter values. It runs once under a fresh tape for the analytic
// gradient and untaped for every perturbed evaluation.
GradCheckReport finite_diff_check(const std::function<Array<double>()>& f,
                                  const std::vector<std::pair<std::string, Array<double>>>& params,
                                  const GradCheckOptions& opt = {});

}  // namespace vground
