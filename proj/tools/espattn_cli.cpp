#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "espattn/cli.hpp"
#include "espattn/matrix.hpp"

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw espattn::ParameterError("cannot read config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  using espattn::cli::RunConfig;

  CLI::App app{
      "Doubly-stochastic attention toolbox: sliced-transport, entropic, and "
      "classic kernels with benchmarks, invariant checks, gradient checks, and "
      "a trainable demo"};
  app.get_formatter()->column_width(28);

  RunConfig cfg;
  std::string config_path;

  app.add_option("--command", cfg.command,
                 "bench | gradcheck | invariants | plan-dump | train | anneal-demo");
  app.add_option("--attention", cfg.attention, "esp | sinkhorn | softmax | diff");
  app.add_option("--n", cfg.n, "query token count (0 = command default)");
  app.add_option("--m", cfg.m, "key token count / projection rows (0 = default)");
  app.add_option("--d", cfg.d, "feature dimension (0 = command default)");
  app.add_option("--slices", cfg.slices, "random slice count (0 = axis-aligned)");
  app.add_option("--sort-temp", cfg.sort_temp, "soft sort temperature");
  app.add_option("--tau", cfg.tau, "slice-weight inverse temperature");
  app.add_option("--epsilon", cfg.epsilon, "entropic regularizer");
  app.add_option("--iters", cfg.iters, "balancing iteration count");
  app.add_option("--seed", cfg.seed, "rng seed");
  app.add_option("--repeats", cfg.repeats, "timed repetitions per benchmark cell");
  app.add_option("--epochs", cfg.epochs, "training epochs");
  app.add_option("--threads", cfg.threads, "worker threads (0 = ESP_THREADS or auto)");
  app.add_option("--out", cfg.out, "write the artifact here instead of stdout");
  app.add_option("--config", config_path, "key=value file; explicit flags win");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return espattn::cli::kUsage;
  }

  try {
    if (!config_path.empty()) {
      RunConfig merged = espattn::cli::parse_config_text(read_file(config_path));
      // flags given on the command line override the file
      if (app.count("--command")) merged.command = cfg.command;
      if (app.count("--attention")) merged.attention = cfg.attention;
      if (app.count("--n")) merged.n = cfg.n;
      if (app.count("--m")) merged.m = cfg.m;
      if (app.count("--d")) merged.d = cfg.d;
      if (app.count("--slices")) merged.slices = cfg.slices;
      if (app.count("--sort-temp")) merged.sort_temp = cfg.sort_temp;
      if (app.count("--tau")) merged.tau = cfg.tau;
      if (app.count("--epsilon")) merged.epsilon = cfg.epsilon;
      if (app.count("--iters")) merged.iters = cfg.iters;
      if (app.count("--seed")) merged.seed = cfg.seed;
      if (app.count("--repeats")) merged.repeats = cfg.repeats;
      if (app.count("--epochs")) merged.epochs = cfg.epochs;
      if (app.count("--threads")) merged.threads = cfg.threads;
      if (app.count("--out")) merged.out = cfg.out;
      cfg = merged;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return espattn::cli::kUsage;
  }

  if (cfg.command.empty()) {
    std::cerr << "missing --command (try --help)\n";
    return espattn::cli::kUsage;
  }
  return espattn::cli::run_command(cfg);
}
