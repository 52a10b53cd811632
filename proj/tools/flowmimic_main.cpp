#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "flowmimic/pipeline.hpp"
#include "json.hpp"

using namespace flowmimic;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string profile;
    std::string out;
    int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "JSON configuration document");
    cmd->add_option("--seed", o.seed, "Master seed override")->check(CLI::NonNegativeNumber);
    cmd->add_option("--profile", o.profile, "Configuration profile")
        ->check(CLI::IsMember({"desk", "paper"}));
    cmd->add_option("--out", o.out, "Run directory override");
}

// Command-line flags override the document: the profile is injected before
// parsing so it picks the defaults being overlaid, seed and out afterwards.
ExperimentConfig build_config(const CommonOpts& o) {
    nlohmann::json doc = nlohmann::json::object();
    if (!o.config_path.empty()) {
        std::ifstream in(o.config_path);
        if (!in) throw ConfigError("cannot open config file: " + o.config_path);
        try {
            in >> doc;
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config is not valid JSON: ") + e.what());
        }
        if (!doc.is_object()) throw ConfigError("config must be a JSON object");
    }
    if (!o.profile.empty()) doc["profile"] = o.profile;
    ExperimentConfig cfg = parse_config(doc.dump());
    if (o.seed >= 0) {
        cfg.seed = static_cast<uint64_t>(o.seed);
        cfg.sync_derived();
    }
    if (!o.out.empty()) cfg.out_dir = o.out;
    cfg.validate();
    return cfg;
}

void print_report(const EvalReport& r, const std::map<std::string, std::string>& tags = {}) {
    std::cout << metric_line("asr", r.asr, tags) << '\n'
              << metric_line("mean_steps", r.steps.mean, tags) << '\n'
              << metric_line("bandwidth_kl", r.bandwidth_kl, tags) << '\n'
              << metric_line("detector_f1", r.detector_f1, tags) << '\n';
}

std::vector<AblationMode> parse_modes(const std::string& csv) {
    std::vector<AblationMode> modes;
    std::string token;
    for (size_t i = 0; i <= csv.size(); ++i) {
        if (i == csv.size() || csv[i] == ',') {
            if (!token.empty()) modes.push_back(ablation_mode_from_string(token));
            token.clear();
        } else {
            token.push_back(csv[i]);
        }
    }
    if (modes.empty()) throw ConfigError("--modes must name at least one ablation mode");
    return modes;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flowmimic: benign-pattern mimicry and hard-label evasion workbench"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string modes_csv = "S1,S2_S,S2_F,full";

    const std::vector<std::pair<std::string, std::string>> stages = {
        {"gen-data", "Synthesize the benign and malicious corpora"},
        {"build-vocab", "Fit the token vocabulary on the benign training flows"},
        {"pretrain", "Train the masked two-stream encoder"},
        {"train-detector", "Train and calibrate the detector"},
        {"attack-train", "Train the evasion agent against the detector oracle"},
        {"attack-infer", "Transform the held-out malicious flows"},
        {"eval", "Score the adversarial flows and write report.json"},
    };
    for (const auto& [name, desc] : stages) add_common(app.add_subcommand(name, desc), opts);

    CLI::App* ablate = app.add_subcommand("ablate", "Re-run inference under reduced pipelines");
    add_common(ablate, opts);
    ablate->add_option("--modes", modes_csv, "Comma-separated modes: S1,S2_S,S2_F,full");

    add_common(app.add_subcommand("pipeline", "Run every stage in order"), opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        const ExperimentConfig cfg = build_config(opts);
        const std::string name = app.get_subcommands().front()->get_name();
        if (name == "pipeline") {
            print_report(run_pipeline(cfg));
        } else if (name == "ablate") {
            const auto reports = run_ablation(cfg, parse_modes(modes_csv));
            for (const auto& [mode, rep] : reports) print_report(rep, {{"mode", mode}});
        } else if (name == "eval") {
            print_report(run_stage(name, cfg));
        } else {
            run_stage(name, cfg);
            std::cout << "stage " << name << " complete; artifacts in " << cfg.out_dir << '\n';
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const StageError& e) {
        std::cerr << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
