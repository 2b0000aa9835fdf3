#include "vground/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "vground/rng.hpp"

namespace vground {

namespace {

double rel_err(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

}  // namespace

GradCheckReport finite_diff_check(const std::function<Array<double>()>& f,
                                  const std::vector<std::pair<std::string, Array<double>>>& params,
                                  const GradCheckOptions& opt) {
    GradCheckReport report;
    report.tol = opt.tol;
    report.h = opt.h;

    Tape<double> tape;
    std::vector<Array<double>> plist;
    plist.reserve(params.size());
    for (const auto& [name, p] : params) plist.push_back(p);
    std::vector<Array<double>> analytic;
    {
        TapeScope<double> scope(tape);
        Array<double> loss = f();
        analytic = grad(tape, loss, plist);
    }

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto& name = params[pi].first;
        Array<double> p = params[pi].second;
        auto values = p.mutable_data();
        const int n = p.size();

        std::vector<int> indices;
        if (opt.sampled_components <= 0 || n <= opt.sampled_components) {
            indices.resize(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) indices[static_cast<std::size_t>(i)] = i;
        } else {
            Rng rng(mix_seed(opt.seed, pi));
            for (int k = 0; k < opt.sampled_components; ++k) indices.push_back(rand_int(rng, 0, n - 1));
            std::sort(indices.begin(), indices.end());
            indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
        }

        GradCheckEntry entry;
        entry.name = name;
        for (int idx : indices) {
            const double saved = values[static_cast<std::size_t>(idx)];
            values[static_cast<std::size_t>(idx)] = saved + opt.h;
            const double up = f().item();
            values[static_cast<std::size_t>(idx)] = saved - opt.h;
            const double down = f().item();
            values[static_cast<std::size_t>(idx)] = saved;
            const double numeric = (up - down) / (2.0 * opt.h);
            const double a = analytic[pi].at(idx);
            entry.max_rel_err = std::max(entry.max_rel_err, rel_err(a, numeric));
        }
        entry.pass = entry.max_rel_err < opt.tol;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace vground
