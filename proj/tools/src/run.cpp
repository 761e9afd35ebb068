#include <iostream>

#include <CLI11.hpp>
#include <forge/error.hpp>

#include "cli.hpp"

namespace forge::cli {

int run(int argc, char** argv) {
  CLI::App app{"forge: extract, compress and audit geometric heads from frozen weight tensors"};
  app.set_version_flag("--version", std::string(FORGE_VERSION));
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out = "forge_out", manifest_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  app.add_option("--config", config_path, "Config file (sectioned key = value text)");
  app.add_option("--seed", seed, "Seed for the command's own section");
  app.add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", out, "Workspace directory for inputs and artifacts");

  std::vector<std::string> command;
  auto leaf = [&](CLI::App* sub, std::vector<std::string> path) {
    sub->fallthrough();
    sub->callback([&command, path] { command = path; });
  };

  leaf(app.add_subcommand("synth", "Generate the synthetic tensor, cells and anchor panels"), {"synth"});

  auto* op = app.add_subcommand("op", "Build feature operators")->require_subcommand(1);
  op->fallthrough();
  leaf(op->add_subcommand("build-drift", "Two-block drift operator"), {"op", "build-drift"});
  leaf(op->add_subcommand("compose", "Weighted sum of single-head operators"), {"op", "compose"});
  leaf(op->add_subcommand("svd", "Truncated-SVD surrogate"), {"op", "svd"});
  leaf(op->add_subcommand("prune", "Hard sparse surrogate"), {"op", "prune"});

  std::string variant;
  std::optional<int> dim;
  auto* head = app.add_subcommand("head", "Train, gate and transfer LET heads")->require_subcommand(1);
  head->fallthrough();
  auto* train = head->add_subcommand("train", "Train a head");
  train->add_option("--variant", variant, "anchor|cell|hybrid")->check(CLI::IsMember({"anchor", "cell", "hybrid"}));
  train->add_option("--dim", dim, "Latent dimension")->check(CLI::PositiveNumber);
  leaf(train, {"head", "train"});
  leaf(head->add_subcommand("gate", "Evaluate quality gates and freeze"), {"head", "gate"});
  leaf(head->add_subcommand("transfer", "Frozen zero-shot transfer"), {"head", "transfer"});

  leaf(app.add_subcommand("scan", "Rank single-head operators by zero-shot transfer"), {"scan"});
  leaf(app.add_subcommand("compress", "Fit compact weights and SVD surrogates"), {"compress"});

  std::string mode = "loo";
  auto* ablate = app.add_subcommand("ablate", "Factor ablation with frozen head and probes");
  ablate->add_option("--mode", mode, "loo|subset|core")->check(CLI::IsMember({"loo", "subset", "core"}));
  ablate->fallthrough();
  ablate->callback([&] { command = {"ablate", mode}; });

  auto* bench = app.add_subcommand("bench", "Benchmark campaigns")->require_subcommand(1);
  bench->fallthrough();
  leaf(bench->add_subcommand("run", "Grouped donor-holdout campaign"), {"bench", "run"});

  auto* audit = app.add_subcommand("audit", "Geometric audits")->require_subcommand(1);
  audit->fallthrough();
  for (const char* m : {"ripple", "lens", "intervene", "topology", "dims", "axis"})
    leaf(audit->add_subcommand(m, std::string("Audit: ") + m), {"audit", m});

  leaf(app.add_subcommand("report", "Summarise every manifest in the workspace"), {"report"});

  auto* rerun = app.add_subcommand("rerun", "Re-execute a manifest and compare output checksums");
  rerun->add_option("manifest", manifest_path, "Manifest file")->required();
  rerun->fallthrough();
  rerun->callback([&] { command = {"rerun"}; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    Invocation inv;
    if (command == std::vector<std::string>{"rerun"}) {
      const bool out_given = app.get_option("--out")->count() > 0;
      inv = from_manifest(manifest_path, out_given ? std::optional<std::filesystem::path>(out) : std::nullopt);
      if (workers) inv.workers = workers;
    } else {
      inv.command = command;
      if (!config_path.empty()) inv.config = Config::load(config_path);
      inv.out = out;
      inv.seed = seed;
      inv.workers = workers;
      if (!variant.empty()) inv.config.set("head", "variant", {variant});
      if (dim) inv.config.set("head", "dim", {std::to_string(*dim)});
    }
    execute(std::move(inv));
    return 0;
  } catch (const ConfigError& e) {
    for (const auto& d : e.diagnostics()) std::cerr << "config error: " << d << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.kind()) << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace forge::cli
