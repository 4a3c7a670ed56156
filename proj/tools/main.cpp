// hybridvfl command line: run experiments, summarize results, audit transcripts.
#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "hybridvfl/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Vertical federated learning simulator with transformer fusion"};
    app.require_subcommand(1);
    // config file sections mirror the subcommands, e.g. [run]; flags override it
    app.set_config("--config", "", "Read options from an INI file ([run] section)");

    // ---- run ----
    auto* run_cmd = app.add_subcommand("run", "Train a model variant and write result files");
    std::string variant = "HybridVFL";
    std::string data = "synthetic";
    std::string seeds_csv = "0,1,2,3,4";
    hvfl::ExperimentConfig cfg;
    run_cmd->add_option("--variant", variant,
                        "CentralImageOnly | CentralMultimodal | ConcatVFL | HybridVFL");
    run_cmd->add_option("--data", data, "synthetic | ham");
    run_cmd->add_option("--epochs", cfg.epochs, "Training epochs");
    run_cmd->add_option("--batch", cfg.batch, "Batch size");
    run_cmd->add_option("--lr", cfg.lr, "SGD learning rate");
    run_cmd->add_option("--lambda-cons", cfg.lambda_cons,
                        "Consistency coefficient (HybridVFL only)");
    run_cmd->add_option("--seeds", seeds_csv, "Comma-separated run seeds");
    run_cmd->add_option("--out", cfg.out_dir, "Output directory (flag or config file)");
    run_cmd->add_option("--jobs", cfg.jobs, "Parallel runs (0 = hardware)");
    run_cmd->add_option("--n", cfg.synthetic.n, "Synthetic: sample count");
    run_cmd->add_option("--classes", cfg.synthetic.k, "Synthetic: class count");
    run_cmd->add_option("--image-hw", cfg.synthetic.image_hw, "Synthetic: image side");
    run_cmd->add_option("--tab-p", cfg.synthetic.tab_p, "Synthetic: tabular width");
    run_cmd->add_option("--interaction", cfg.synthetic.interaction_strength,
                        "Synthetic: fraction of jointly-labeled samples");
    run_cmd->add_option("--noise", cfg.synthetic.noise, "Synthetic: noise level");
    run_cmd->add_option("--data-seed", cfg.synthetic.seed, "Synthetic: base dataset seed");
    run_cmd->add_option("--metadata", cfg.ham_metadata, "HAM-style metadata csv");
    run_cmd->add_option("--image-dir", cfg.ham_image_dir, "HAM-style image directory");
    run_cmd->add_option("--target-size", cfg.ham_target_size, "HAM-style image resize");

    // ---- summarize ----
    auto* sum_cmd = app.add_subcommand("summarize", "Aggregate run results into summary.csv");
    std::string in_dir;
    sum_cmd->add_option("--in", in_dir, "Directory with <variant>_seed<k> runs")->required();

    // ---- audit ----
    auto* audit_cmd = app.add_subcommand("audit", "Check a transcript dump");
    std::string transcript_path;
    audit_cmd->add_option("--transcript", transcript_path, "Transcript log file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run_cmd->parsed()) {
            cfg.variant = hvfl::parse_variant(variant);
            if (data == "synthetic") {
                cfg.data = hvfl::DataSource::Synthetic;
            } else if (data == "ham") {
                cfg.data = hvfl::DataSource::Ham;
            } else {
                throw hvfl::ConfigError("unknown data source '" + data + "'");
            }
            cfg.seeds.clear();
            std::string tok;
            std::istringstream ss(seeds_csv);
            while (std::getline(ss, tok, ',')) {
                if (!tok.empty()) cfg.seeds.push_back(std::stoull(tok));
            }
            hvfl::run(cfg);
            std::cout << "wrote results for " << hvfl::variant_name(cfg.variant) << " ("
                      << cfg.seeds.size() << " seeds) under " << cfg.out_dir << "\n";
        } else if (sum_cmd->parsed()) {
            std::cout << hvfl::summarize(in_dir);
            std::cout << "wrote " << in_dir << "/summary.csv\n";
        } else if (audit_cmd->parsed()) {
            hvfl::AuditReport report = hvfl::audit_transcript_records(transcript_path);
            std::cout << report.to_text();
            return report.passed ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
