#include "qdfl/numcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>

#include "qdfl/errors.hpp"

namespace qdfl {

double central_difference(const ScalarFunction& f, std::span<const double> theta, std::size_t index,
                          double step) {
    if (index >= theta.size()) throw IndexError("central_difference: index out of range");
    std::vector<double> probe(theta.begin(), theta.end());
    probe[index] = theta[index] + step;
    const double plus = f(probe);
    probe[index] = theta[index] - step;
    const double minus = f(probe);
    if (!std::isfinite(plus) || !std::isfinite(minus)) throw Error("central_difference: non-finite evaluation");
    return (plus - minus) / (2.0 * step);
}

double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

GradCheckReport check_gradients(const GradProblem& problem, std::span<const double> theta,
                                const GradCheckOptions& options) {
    GradCheckReport report;
    report.step = options.step;
    report.tolerance = options.tolerance;

    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < theta.size(); ++i)
        if (problem.excluded.empty() || !problem.excluded.at(i)) order.push_back(i);
    if (options.n_probes > order.size()) throw Error("check_gradients: more probes than probeable coordinates");
    std::mt19937_64 rng(options.seed);
    std::shuffle(order.begin(), order.end(), rng);

    const std::vector<double> analytic = problem.gradient(theta);
    if (analytic.size() != theta.size()) throw ShapeError("check_gradients: gradient length mismatch");
    const std::uint64_t base_regime = problem.regime ? problem.regime(theta) : 0;

    std::vector<double> probe(theta.begin(), theta.end());
    auto same_regime = [&](std::size_t index, double delta) {
        probe[index] = theta[index] + delta;
        const bool same = problem.regime(probe) == base_regime;
        probe[index] = theta[index];
        return same;
    };

    double total = 0.0;
    for (std::size_t index : order) {
        if (report.n_probed == options.n_probes) break;
        if (problem.regime && (!same_regime(index, options.step) || !same_regime(index, -options.step))) {
            ++report.n_skipped;
            continue;
        }
        const double numeric = central_difference(problem.value, theta, index, options.step);
        const double err = relative_error(analytic[index], numeric);
        total += err;
        ++report.n_probed;
        if (report.n_probed == 1 || err > report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_index = index;
        }
        if (err > options.tolerance) report.violations.push_back(index);
    }
    if (report.n_probed == 0) throw Error("check_gradients: no usable probes");
    report.mean_rel_error = total / static_cast<double>(report.n_probed);
    return report;
}

void print_report(std::ostream& os, const GradCheckReport& r, const char* label) {
    const auto flags = os.flags();
    os << std::left << std::setw(28) << label << std::right << std::scientific << std::setprecision(3)
       << " max_rel=" << r.max_rel_error << " mean_rel=" << r.mean_rel_error << " probes=" << r.n_probed
       << " skipped=" << r.n_skipped << " worst=" << r.worst_index << " step=" << r.step
       << " tol=" << r.tolerance << (r.passed() ? "  ok" : "  FAIL") << '\n';
    for (std::size_t v : r.violations) os << "    violation at coordinate " << v << '\n';
    os.flags(flags);
}

}  // namespace qdfl
