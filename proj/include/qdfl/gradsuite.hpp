#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "qdfl/network.hpp"
#include "qdfl/numcheck.hpp"

namespace qdfl {

enum class GradCategory { linear, nonlinear, network };

std::string_view category_name(GradCategory c);
/// 1e-8 linear, 1e-6 nonlinear, 1e-5 full network with loss.
double default_tolerance(GradCategory c);

/// One gradient check: an objective <f(theta), R> (or the training loss for
/// the network cases) over inputs and parameters flattened into theta.
struct GradCase {
    std::string name;
    GradCategory category = GradCategory::linear;
    GradProblem problem;
    std::vector<double> theta;
    double step = 1e-5;
};

/// Conv, batch norm, leaky ReLU, max pool, SDU, the four directional pools
/// and spatial normalisation.
std::vector<GradCase> layer_grad_cases(std::uint64_t seed);

/// A toy branch network with the softmax + L2 objective, one per direction.
std::vector<GradCase> network_grad_cases(std::uint64_t seed);

/// Flat view of a network's parameters in visit order.
std::vector<double> gather_params(BranchNetwork& net);
void scatter_params(BranchNetwork& net, std::span<const double> theta);
std::vector<double> gather_grads(BranchNetwork& net);
std::vector<bool> cancelled_mask(BranchNetwork& net);

struct GradSuiteResult {
    std::string name;
    GradCategory category;
    double tolerance;
    GradCheckReport report;

    bool passed(std::size_t n_probes) const { return report.passed() && report.n_probed == n_probes; }
};

/// Runs every case with n_probes probes. tolerance overrides the per-category
/// default when set. Prints one report line per case when os is non-null.
std::vector<GradSuiteResult> run_grad_suite(const std::vector<GradCase>& cases, std::size_t n_probes,
                                            std::uint64_t seed, std::optional<double> tolerance,
                                            std::ostream* os);

}  // namespace qdfl
