// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "qdfl/commands.hpp"
#include "qdfl/directional.hpp"
#include "qdfl/gradsuite.hpp"
#include "qdfl/io.hpp"
#include "qdfl/network.hpp"
#include "qdfl/reid.hpp"
#include "qdfl/training.hpp"

using namespace qdfl;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            if (!pass) detail << "; ";
            detail << "failed: " << what;
            pass = false;
        }
    }
};

struct Criterion {
    int id;
    std::string title;
    double budget_s;
    std::function<void(Outcome&)> run;
};

constexpr char kLetters[] = {'H', 'V', 'D', 'A'};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// --- 1 ---------------------------------------------------------------------

void table1_shapes(Outcome& o) {
    const NetworkSpec spec = table1_profile();
    Backbone backbone(spec);
    std::mt19937_64 rng(1);
    std::vector<ShapeTrace> trace;
    const Tensor4 out =
        backbone.forward(oracle::random_tensor(Shape{1, 128, 128, 3}, rng, 0.0, 1.0), Mode::eval, &trace);

    // Every "Output Size" cell, backbone rows then the four pools.
    const std::vector<std::pair<std::string, Shape>> expected = {
        {"Conv0", {1, 128, 128, 64}}, {"SDU1", {1, 128, 128, 64}}, {"MP1", {1, 64, 64, 64}},
        {"SDU2", {1, 64, 64, 128}},   {"MP2", {1, 32, 32, 128}},   {"SDU3", {1, 32, 32, 192}},
        {"MP3", {1, 16, 16, 192}},    {"SDU4", {1, 16, 16, 256}},  {"MP4", {1, 8, 8, 256}},
        {"SDU5", {1, 8, 8, 320}},     {"MP5", {1, 4, 4, 320}}};
    std::size_t matched = 0;
    o.require(trace.size() == expected.size(), "backbone trace length");
    for (std::size_t i = 0; i < std::min(trace.size(), expected.size()); ++i) {
        const bool ok = trace[i].name == expected[i].first && trace[i].shape == expected[i].second;
        o.require(ok, "cell " + expected[i].first);
        matched += ok ? 1 : 0;
    }
    const std::pair<Direction, std::size_t> pools[] = {{Direction::horizontal, 4},
                                                       {Direction::vertical, 4},
                                                       {Direction::diagonal, 7},
                                                       {Direction::anti_diagonal, 7}};
    for (const auto& [dir, len] : pools) {
        const bool ok = directional_pool(out, dir).values.shape() == Shape{1, len, 1, 320};
        o.require(ok, std::string("pool ") + direction_letter(dir));
        matched += ok ? 1 : 0;
    }
    const auto desc = assemble_descriptors(out, BranchSet::all(), spec.sn_window);
    o.require(desc.size() == 1 && desc[0].values.size() == 7040, "descriptor length 7040");
    o.require(spec.descriptor_length() == 7040, "spec descriptor length");
    o.detail << matched << "/15 cells, descriptor " << (desc.empty() ? 0 : desc[0].values.size());
}

// --- 2 ---------------------------------------------------------------------

void pooling_oracle(Outcome& o) {
    std::mt19937_64 rng(2);
    double worst = 0.0;
    for (std::size_t d : {4u, 5u, 8u})
        for (char letter : kLetters) {
            const Tensor4 x = oracle::random_tensor(Shape{3, d, d, 4}, rng);
            const Tensor4 got = directional_pool(x, direction_from_letter(letter)).values;
            const Tensor4 want = oracle::directional_pool(x, letter);
            if (got.shape() != want.shape()) {
                o.require(false, "shape " + std::string(1, letter) + std::to_string(d));
                continue;
            }
            worst = std::max(worst, oracle::max_abs_diff(got, want));
        }
    o.require(worst < 1e-12, "oracle agreement");

    // Symbolic examples on a 4x4 map numbered 1..16 row-major: f_k = x(k - 1).
    const Tensor4 x = oracle::random_tensor(Shape{1, 4, 4, 1}, rng);
    auto f = [&](std::size_t k) { return x.flat(k - 1); };
    const double h1 = hap_forward(x).values.flat(0);
    const double d6 = dap_forward(x).values.flat(5);
    const double a4 = aap_forward(x).values.flat(3);
    o.require(h1 == (f(1) + f(2) + f(3) + f(4)) / 4, "h1");
    o.require(d6 == (f(9) + f(14)) / 2, "d6");
    o.require(a4 == (f(4) + f(7) + f(10) + f(13)) / 4, "a4");
    o.detail << "max |diff| " << worst << ", h1 d6 a4 exact";
}

// --- 3 ---------------------------------------------------------------------

void gradient_suite(Outcome& o) {
    constexpr std::size_t kProbes = 200;
    std::vector<GradCase> cases = layer_grad_cases(3);
    for (GradCase& c : network_grad_cases(3)) cases.push_back(std::move(c));
    const auto results = run_grad_suite(cases, kProbes, 3, std::nullopt, nullptr);
    std::map<GradCategory, double> worst;
    std::size_t passed = 0;
    for (const auto& r : results) {
        worst[r.category] = std::max(worst[r.category], r.report.max_rel_error);
        if (r.passed(kProbes)) ++passed;
        else o.require(false, r.name);
    }
    o.detail << passed << "/" << results.size() << " cases at " << kProbes << " probes; worst";
    for (const auto& [cat, err] : worst) o.detail << ' ' << category_name(cat) << '=' << err;
}

// --- 4 ---------------------------------------------------------------------

void adjoint_and_partition(Outcome& o) {
    std::mt19937_64 rng(4);
    double worst = 0.0;
    for (std::size_t d = 1; d <= 16; ++d)
        for (Direction dir : kAllDirections) {
            const PoolPlan plan(dir, d);
            const Tensor4 x = oracle::random_tensor(Shape{2, d, d, 3}, rng);
            DirectionalMap g;
            g.direction = dir;
            g.source_d = d;
            g.values = oracle::random_tensor(Shape{2, plan.length(), 1, 3}, rng);
            const double lhs = dot(directional_pool(x, plan).values, g.values);
            const double rhs = dot(x, directional_backward(g, plan));
            worst = std::max(worst, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));

            std::vector<int> seen(d * d, 0);
            for (std::size_t t = 0; t < plan.length(); ++t)
                for (std::size_t p : plan.group(t)) ++seen[p];
            o.require(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }),
                      "partition d=" + std::to_string(d));

            std::vector<std::size_t> sizes;
            for (std::size_t t = 0; t < plan.length(); ++t) sizes.push_back(plan.divisor(t));
            std::vector<std::size_t> want;
            if (dir == Direction::diagonal || dir == Direction::anti_diagonal) {
                for (std::size_t k = 1; k <= d; ++k) want.push_back(k);
                for (std::size_t k = d - 1; k >= 1; --k) want.push_back(k);
            } else {
                want.assign(d, d);
            }
            o.require(sizes == want, std::string("group sizes ") + direction_letter(dir) + std::to_string(d));
        }
    o.require(worst < 1e-12, "adjoint identity");
    o.detail << "d=1..16, worst adjoint gap " << worst;
}

// --- 5 ---------------------------------------------------------------------

Record rec(const std::string& sid, const std::string& vid, const std::string& cam, Role role) {
    return Record{sid, sid + ".png", vid, cam, role};
}

void evaluation_oracle(Outcome& o) {
    std::mt19937_64 rng(5);
    std::size_t compared = 0, veri_exclusions = 0;
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        Manifest m;
        DescriptorTable t;
        std::uniform_int_distribution<int> vid(0, 3), cam(0, 2), level(0, 4), nq_d(1, 6), ng_d(1, 12);
        const int nq = nq_d(rng), ng = ng_d(rng);
        for (int i = 0; i < nq + ng; ++i) {
            const bool q = i < nq;
            const std::string sid = (q ? "q" : "g") + std::to_string(i);
            m.records.push_back(
                rec(sid, "v" + std::to_string(vid(rng)), "c" + std::to_string(cam(rng)), q ? Role::query : Role::gallery));
            t[sid] = {static_cast<double>(level(rng)), static_cast<double>(level(rng))};
        }
        for (const Record& q : m.records)
            for (const Record& g : m.records)
                if (q.role == Role::query && g.role == Role::gallery && q.camera_id == g.camera_id) ++veri_exclusions;
        for (Protocol p : {Protocol::plain, Protocol::veri}) {
            const oracle::EvalResult want = oracle::evaluate(m, t, p);
            if (want.used == 0) {
                bool threw = false;
                try {
                    evaluate(m, t, p);
                } catch (const DataError&) {
                    threw = true;
                }
                o.require(threw, "no usable query must raise");
                continue;
            }
            const EvalReport got = evaluate(m, t, p);
            ++compared;
            double gap = std::abs(got.map - want.map);
            for (std::size_t k = 1; k <= want.cmc.size(); ++k) gap = std::max(gap, std::abs(got.cmc_at(k) - want.cmc[k - 1]));
            worst = std::max(worst, gap);
            o.require(got.n_queries_used == want.used && got.n_skipped == want.skipped,
                      "query counts trial " + std::to_string(trial));
        }
    }
    o.require(worst < 1e-12, "metric agreement");
    o.require(veri_exclusions > 0, "veri exclusions exercised");

    const bool hits[] = {true, false, true};
    const auto ap = average_precision(hits);
    o.require(ap && std::abs(*ap - (1.0 + 2.0 / 3.0) / 2.0) < 1e-15, "hand fixture AP");
    o.detail << compared << " comparisons, worst gap " << worst << ", hand AP " << std::setprecision(7)
             << ap.value_or(-1.0);
}

// --- 6, 7 ------------------------------------------------------------------

struct EndToEnd {
    fs::path dir;
    std::optional<EvalReport> fused;
    std::map<char, EvalReport> single;
    std::string trace_bytes;
    std::string model_bytes;
    double fused_cli_map = -1.0;
};

constexpr const char* kRunConfig =
    "manifest = manifest.csv\n"
    "profile = toy\n"
    "seed_channels = 8\n"
    "input_size = 32\n"
    "branches = HVDA\n"
    "steps = 150\n"
    "batch_size = 16\n"
    "lr_initial = 0.02\n"
    "alpha = 0.001\n"
    "init_std = 0.1\n"
    "convergence_window = 50\n"
    "seed = 1\n";

EndToEnd run_end_to_end(const fs::path& dir, const std::string& tag) {
    EndToEnd r;
    r.dir = dir;
    std::ostringstream log;
    if (!fs::exists(dir / "manifest.csv")) cmd_synth(SynthOptions{20, 10, 32, 7}, dir, log);
    {
        std::ofstream cfg(dir / ("run_" + tag + ".cfg"));
        cfg << kRunConfig << "model_out = model_" << tag << ".qdm\ntrace_out = trace_" << tag << ".csv\n";
    }
    const TrainSummary train = cmd_train(dir / ("run_" + tag + ".cfg"), log);
    r.trace_bytes = slurp(train.trace_path);
    r.model_bytes = slurp(train.model_path);

    // Fused descriptor through the command path.
    const fs::path features = dir / ("features_" + tag + ".qdt");
    cmd_extract(train.model_path, dir / "manifest.csv", features, log);
    r.fused_cli_map = cmd_eval(features, dir / "manifest.csv", Protocol::plain, log, std::nullopt).map;

    // Fused and per-branch descriptors in memory.
    ModelFile model = load_model(train.model_path);
    const Manifest manifest = load_manifest(dir / "manifest.csv");
    DescriptorTable fused;
    std::map<char, DescriptorTable> single;
    for (const Record& rec : manifest.records) {
        if (rec.role == Role::train) continue;
        const auto d = model.model.extract(load_image(manifest.resolve(rec), model.model.spec.input_size));
        fused[rec.sample_id] = d.at(0).values;
        for (Direction dir2 : kAllDirections) single[direction_letter(dir2)][rec.sample_id] = d[0].segment(dir2);
    }
    r.fused = evaluate(manifest, fused, Protocol::plain);
    for (const auto& [letter, table] : single) r.single.emplace(letter, evaluate(manifest, table, Protocol::plain));
    return r;
}

std::optional<EndToEnd> first_run;

fs::path scratch_dir() {
    std::random_device rd;
    const fs::path p = fs::temp_directory_path() / ("qdfl_acceptance_" + std::to_string(rd()));
    fs::create_directories(p);
    return p;
}

void desk_scale_reid(Outcome& o) {
    first_run = run_end_to_end(scratch_dir(), "a");
    const EvalReport& f = *first_run->fused;
    o.require(f.cmc_at(1) >= 0.90, "rank-1 >= 0.90");
    o.require(f.map >= 0.80, "mAP >= 0.80");
    o.require(first_run->fused_cli_map == f.map, "extract/eval commands agree with in-memory evaluation");
    o.detail << std::fixed << std::setprecision(4) << "QD mAP " << f.map << " rank1 " << f.cmc_at(1);
    for (const auto& [letter, rep] : first_run->single) {
        o.detail << " | " << letter << " " << rep.map << "/" << rep.cmc_at(1);
        o.require(f.map >= rep.map && f.cmc_at(1) >= rep.cmc_at(1), std::string("fused >= branch ") + letter);
    }
}

void determinism(Outcome& o) {
    if (!first_run) {
        o.require(false, "needs criterion 6 in the same invocation");
        return;
    }
    const EndToEnd second = run_end_to_end(first_run->dir, "b");
    o.require(!first_run->trace_bytes.empty() && second.trace_bytes == first_run->trace_bytes, "trace bytes");
    o.require(second.model_bytes == first_run->model_bytes, "model bytes");
    o.require(second.fused->map == first_run->fused->map && second.fused->cmc == first_run->fused->cmc,
              "fused metrics");
    for (const auto& [letter, rep] : first_run->single)
        o.require(second.single.at(letter).map == rep.map, std::string("branch metrics ") + letter);
    const auto lines = std::count(second.trace_bytes.begin(), second.trace_bytes.end(), '\n');
    o.detail << lines - 1 << " trace rows identical, mAP " << std::setprecision(17) << second.fused->map;
}

// --- 8 ---------------------------------------------------------------------

void sn_range(Outcome& o) {
    std::mt19937_64 rng(8);
    // Log-uniform magnitudes over 1e-6..1e4 plus exact zeros.
    std::uniform_real_distribution<double> expo(-6.0, 4.0);
    std::bernoulli_distribution zero(0.05);
    std::size_t checked = 0;
    double hi = 0.0, lo = 1.0;
    for (std::size_t len : {1u, 2u, 4u, 7u, 16u}) {
        DirectionalMap p;
        p.values = Tensor4(Shape{64, len, 1, 32});
        p.source_d = len;
        for (double& v : p.values.data()) v = zero(rng) ? 0.0 : std::pow(10.0, expo(rng));
        const DirectionalMap z = spatial_norm_forward(p, 4);
        for (double v : z.values.data()) {
            ++checked;
            hi = std::max(hi, v);
            lo = std::min(lo, v);
        }
    }
    o.require(checked >= 10000, "at least 1e4 outputs");
    o.require(lo >= 0.0 && hi < 1.0, "outputs in [0, 1)");
    o.detail << checked << " outputs, min " << lo << " max " << std::setprecision(17) << hi;
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria = {
        {1, "full-size backbone shapes", 10, table1_shapes},
        {2, "directional pooling vs oracle", 1, pooling_oracle},
        {3, "backward-pass fidelity", 300, gradient_suite},
        {4, "pooling adjointness and partition", 10, adjoint_and_partition},
        {5, "evaluation oracle equivalence", 30, evaluation_oracle},
        {6, "desk-scale re-ID", 1200, desk_scale_reid},
        {7, "determinism", 1200, determinism},
        {8, "spatial norm range", 10, sn_range},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));

    int failures = 0;
    for (const Criterion& c : criteria) {
        if (!selected.empty() && !selected.contains(c.id)) continue;
        Outcome o;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            c.run(o);
        } catch (const std::exception& e) {
            o.require(false, std::string("exception: ") + e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (secs > c.budget_s) o.require(false, "over time budget");
        if (!o.pass) ++failures;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << c.id << "  " << c.title << "  ("
                  << std::fixed << std::setprecision(2) << secs << " s)  " << std::defaultfloat << o.detail.str()
                  << std::endl;
    }
    if (first_run) {
        std::error_code ec;
        fs::remove_all(first_run->dir, ec);
    }
    return failures == 0 ? 0 : 1;
}
