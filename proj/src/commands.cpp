#include "qdfl/commands.hpp"

#include <fstream>
#include <ostream>

#include "qdfl/gradsuite.hpp"

namespace qdfl {

namespace fs = std::filesystem;

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
    if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const FormatError*>(&e)) return kExitData;
    if (dynamic_cast<const DivergenceError*>(&e)) return kExitDivergence;
    if (dynamic_cast<const ProtocolError*>(&e)) return kExitProtocol;
    return kExitFailure;
}

TrainSummary cmd_train(const fs::path& config_path, std::ostream& log) {
    const RunConfig cfg = load_run_config(config_path, &log);
    if (!fs::exists(cfg.manifest)) throw DataError("manifest not found: " + cfg.manifest.string());
    const Manifest manifest = load_manifest(cfg.manifest);
    const std::size_t input_size = cfg.network(0).input_size;

    const TrainingSet data = make_training_set(manifest, [&](const Record& r) {
        try {
            return load_image(manifest.resolve(r), input_size);
        } catch (const Error& e) {
            throw DataError("training image " + r.sample_id + ": " + e.what());
        }
    });
    log << "train: " << data.images.size() << " images, " << data.class_names.size() << " identities, "
        << cfg.train.steps << " steps per branch\n";

    const std::size_t every = std::max<std::size_t>(1, cfg.train.steps / 10);
    TrainResult result = train(data, cfg.network(data.class_names.size()), cfg.train, [&](const TraceRow& row) {
        if (row.step % every == 0 || row.step == cfg.train.steps)
            log << "  branch " << row.branch << " step " << row.step << " lr " << row.lr << " loss " << row.loss
                << '\n';
    });

    ModelMetadata meta{cfg.fingerprint(), cfg.train.steps, result.final_loss};
    save_model(cfg.model_out, result.model, meta);
    std::ofstream trace(cfg.trace_out);
    if (!trace) throw Error("cannot open " + cfg.trace_out.string() + " for writing");
    write_trace_csv(trace, result.trace);
    log << "train: wrote " << cfg.model_out.string() << " and " << cfg.trace_out.string() << '\n';
    return {cfg.model_out, cfg.trace_out, cfg.train.steps, result.final_loss};
}

ExtractSummary cmd_extract(const fs::path& model_path, const fs::path& manifest_path, const fs::path& out_path,
                           std::ostream& log) {
    ModelFile file = load_model(model_path);
    if (!fs::exists(manifest_path)) throw DataError("manifest not found: " + manifest_path.string());
    const Manifest manifest = load_manifest(manifest_path);
    const std::size_t size = file.model.spec.input_size;
    constexpr std::size_t kBatch = 16;

    ExtractSummary summary;
    DescriptorTable table;
    std::vector<std::string> order;
    std::vector<Tensor4> pending;
    std::vector<std::string> pending_ids;
    auto flush = [&] {
        if (pending.empty()) return;
        std::vector<TensorRef> refs(pending.begin(), pending.end());
        const auto descriptors = file.model.extract(batch_concat(refs));
        for (std::size_t i = 0; i < descriptors.size(); ++i) {
            table[pending_ids[i]] = descriptors[i].values;
            order.push_back(pending_ids[i]);
        }
        pending.clear();
        pending_ids.clear();
    };
    for (const Record& r : manifest.records) {
        try {
            pending.push_back(load_image(manifest.resolve(r), size));
            pending_ids.push_back(r.sample_id);
        } catch (const Error& e) {
            summary.failed.push_back(r.sample_id + ": " + e.what());
            log << "extract: skipping " << r.sample_id << ": " << e.what() << '\n';
        }
        if (pending.size() == kBatch) flush();
    }
    flush();
    summary.succeeded = order.size();
    if (order.empty()) throw DataError("extract: no record could be processed");
    summary.descriptor_length = table.at(order.front()).size();
    save_descriptors(out_path, table, order);
    log << "extract: " << summary.succeeded << " succeeded, " << summary.failed.size() << " failed, length "
        << summary.descriptor_length << '\n';
    return summary;
}

EvalReport cmd_eval(const fs::path& features_path, const fs::path& manifest_path, Protocol protocol,
                    std::ostream& out, const std::optional<fs::path>& cmc_csv) {
    const DescriptorTable table = load_descriptors(features_path);
    if (!fs::exists(manifest_path)) throw DataError("manifest not found: " + manifest_path.string());
    const Manifest manifest = load_manifest(manifest_path);
    const EvalReport report = evaluate(manifest, table, protocol);
    out << summary_line(report) << '\n';
    if (report.n_skipped > 0) out << "skipped " << report.n_skipped << " queries without a relevant gallery entry\n";
    if (cmc_csv) {
        std::ofstream csv(*cmc_csv);
        if (!csv) throw Error("cannot open " + cmc_csv->string() + " for writing");
        write_cmc_csv(csv, report);
    }
    return report;
}

Manifest cmd_synth(const SynthOptions& opts, const fs::path& out_dir, std::ostream& log) {
    Manifest m = write_synthetic_dataset(opts, out_dir);
    log << "synth: wrote " << m.records.size() << " images to " << out_dir.string() << '\n';
    return m;
}

bool cmd_gradcheck(const std::string& profile, std::optional<double> tolerance, std::size_t n_probes,
                   std::uint64_t seed, std::ostream& out) {
    if (profile != "toy") throw ConfigError("gradcheck: only the toy profile is supported");
    if (tolerance && !(*tolerance > 0.0)) throw ConfigError("gradcheck: tolerance must be positive");
    std::vector<GradCase> cases = layer_grad_cases(seed);
    for (GradCase& c : network_grad_cases(seed)) cases.push_back(std::move(c));
    const auto results = run_grad_suite(cases, n_probes, seed, tolerance, &out);
    bool ok = true;
    for (const auto& r : results) ok = ok && r.passed(n_probes);
    out << (ok ? "gradcheck: all cases passed\n" : "gradcheck: FAILED\n");
    return ok;
}

}  // namespace qdfl
