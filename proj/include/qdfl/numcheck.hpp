#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

namespace qdfl {

using ScalarFunction = std::function<double(std::span<const double>)>;

/// (f(theta + h e_i) - f(theta - h e_i)) / (2h). Throws Error if either
/// evaluation is non-finite.
double central_difference(const ScalarFunction& f, std::span<const double> theta, std::size_t index,
                          double step);

/// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

/// Something with a scalar value and an analytic gradient over a flat
/// parameter vector.
struct GradProblem {
    ScalarFunction value;
    std::function<std::vector<double>(std::span<const double>)> gradient;
    /// Optional fingerprint of the piecewise-smooth regime at theta (ReLU
    /// signs, max-pool routing). A probe whose +h or -h evaluation lands in a
    /// different regime straddles a kink and is redrawn.
    std::function<std::uint64_t(std::span<const double>)> regime;
    /// Coordinates never probed (e.g. parameters whose gradient is
    /// structurally zero).
    std::vector<bool> excluded;
};

struct GradCheckOptions {
    std::size_t n_probes = 200;
    double step = 1e-5;
    double tolerance = 1e-6;
    std::uint64_t seed = 0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    double mean_rel_error = 0.0;
    std::size_t n_probed = 0;
    std::size_t n_skipped = 0;  // probes rejected for crossing a kink
    std::size_t worst_index = 0;
    double step = 0.0;
    double tolerance = 0.0;
    std::vector<std::size_t> violations;  // coordinates over tolerance

    bool passed() const { return n_probed > 0 && violations.empty(); }
};

/// Compares the analytic gradient with central differences on a seeded
/// random subset of coordinates (without replacement).
GradCheckReport check_gradients(const GradProblem& problem, std::span<const double> theta,
                                const GradCheckOptions& options);

void print_report(std::ostream& os, const GradCheckReport& report, const char* label);

}  // namespace qdfl
