#include <CLI11.hpp>

#include <iostream>

#include "qdfl/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Quadruple directional feature learning: train, extract, evaluate"};
    app.require_subcommand(1);

    std::string config;
    auto* train = app.add_subcommand("train", "Train one network per branch from a config file");
    train->add_option("--config", config, "key = value config file")->required();

    std::string model, manifest, out;
    auto* extract = app.add_subcommand("extract", "Write one descriptor per manifest record");
    extract->add_option("--model", model, "model file")->required();
    extract->add_option("--manifest", manifest, "manifest CSV")->required();
    extract->add_option("--out", out, "descriptor archive (QDT1)")->required();

    std::string features, protocol = "plain", cmc_out;
    auto* eval = app.add_subcommand("eval", "mAP and CMC of a descriptor archive");
    eval->add_option("--features", features, "descriptor archive")->required();
    eval->add_option("--manifest", manifest, "manifest CSV")->required();
    eval->add_option("--protocol", protocol, "veri or plain")->check(CLI::IsMember({"veri", "plain"}));
    eval->add_option("--cmc-out", cmc_out, "CMC CSV (default: <features>.cmc.csv)");

    qdfl::SynthOptions synth_opts;
    std::string synth_dir;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic identity dataset");
    synth->add_option("--ids", synth_opts.ids, "identities")->required();
    synth->add_option("--per-id", synth_opts.per_id, "images per identity")->required();
    synth->add_option("--size", synth_opts.size, "image side in pixels")->required();
    synth->add_option("--seed", synth_opts.seed, "generator seed")->required();
    synth->add_option("--out", synth_dir, "output directory")->required();

    std::string profile = "toy";
    double tolerance = 0.0;
    std::size_t probes = 200;
    std::uint64_t grad_seed = 0;
    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every backward pass");
    gradcheck->add_option("--profile", profile, "network profile")->check(CLI::IsMember({"toy"}));
    auto* tol_opt = gradcheck->add_option("--tolerance", tolerance, "relative error bound for every case");
    gradcheck->add_option("--probes", probes, "probes per case");
    gradcheck->add_option("--seed", grad_seed, "probe seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : qdfl::kExitConfig;
    }

    try {
        if (*train) {
            qdfl::cmd_train(config, std::cerr);
        } else if (*extract) {
            const auto summary = qdfl::cmd_extract(model, manifest, out, std::cerr);
            std::cout << "extracted " << summary.succeeded << " failed " << summary.failed.size() << '\n';
            for (const auto& f : summary.failed) std::cout << "  " << f << '\n';
        } else if (*eval) {
            const std::filesystem::path cmc = cmc_out.empty() ? std::filesystem::path(features + ".cmc.csv")
                                                              : std::filesystem::path(cmc_out);
            qdfl::cmd_eval(features, manifest, qdfl::protocol_from_name(protocol), std::cout, cmc);
        } else if (*synth) {
            qdfl::cmd_synth(synth_opts, synth_dir, std::cerr);
        } else if (*gradcheck) {
            const std::optional<double> tol = tol_opt->count() > 0 ? std::optional<double>(tolerance) : std::nullopt;
            if (!qdfl::cmd_gradcheck(profile, tol, probes, grad_seed, std::cout)) return qdfl::kExitGradcheck;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return qdfl::exit_code_for(e);
    }
    return qdfl::kExitOk;
}
