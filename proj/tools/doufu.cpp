// Command-line driver: doufu <stage> --config <path> [--workspace <dir>] [--variant <name>]

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "doufu/pipeline.hpp"

int main(int argc, char** argv) {
    using namespace doufu;
    CLI::App app{"Trajectory representation pipeline: synthetic data, features, segment pre-training, fusion models, evaluation"};
    app.require_subcommand(1, 1);

    std::string config_path, workspace, variant;
    for (const char* stage : {"gen", "featurize", "pretrain", "train", "embed", "eval", "all", "compare"}) {
        auto* sub = app.add_subcommand(stage);
        sub->add_option("--config", config_path, "INI experiment config")->required();
        sub->add_option("--workspace", workspace, "workspace directory (overrides the config)");
        if (std::string(stage) == "train" || std::string(stage) == "embed" || std::string(stage) == "eval")
            sub->add_option("--variant", variant, "restrict the stage to one model variant");
    }
    CLI11_PARSE(app, argc, argv);
    const std::string stage = app.get_subcommands().front()->get_name();

    try {
        auto cfg = pipeline::load_config(config_path);
        if (!workspace.empty()) cfg.workspace = workspace;
        std::optional<model::Variant> only;
        if (!variant.empty()) {
            try {
                only = model::parse_variant(variant);
            } catch (const ValidationError& e) {
                throw ConfigError(e.what());
            }
        }
        pipeline::run_stage(stage, cfg, std::cerr, only);
    } catch (const std::exception& e) {
        std::cerr << "doufu " << stage << ": " << e.what() << '\n';
        return pipeline::exit_code(e);
    }
    return 0;
}
