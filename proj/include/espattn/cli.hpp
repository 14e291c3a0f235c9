#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace espattn::cli {

// Exit codes shared by every command.
enum ExitCode : int {
  kOk = 0,
  kUsage = 2,
  kInvariantFailure = 3,
  kDivergence = 4,
};

// Zero means "command default" for the size fields so each command can fill
// in its own grid.
struct RunConfig {
  std::string command;
  std::string attention = "esp";  // esp | sinkhorn | softmax | diff
  std::size_t n = 0;
  std::size_t m = 0;
  std::size_t d = 0;
  std::size_t slices = 0;
  double sort_temp = 1e-3;
  double tau = 1.0;
  double epsilon = 0.1;
  std::size_t iters = 5;
  std::uint64_t seed = 1;
  std::size_t repeats = 10;
  std::size_t epochs = 200;
  std::size_t threads = 0;  // 0 = ESP_THREADS or hardware default
  std::string out;          // output path; empty = stdout
};

std::string serialize(const RunConfig& cfg);
RunConfig parse_config_text(const std::string& text);  // flat key=value lines

// Applies the worker count (flag beats ESP_THREADS beats hardware) and
// returns what will actually be used.
int resolve_threads(const RunConfig& cfg);

struct BenchRow {
  std::string method;
  std::size_t n = 0;
  std::string setting;  // sort mode for esp, iteration count for sinkhorn
  double mean_ms = 0.0;
  double std_ms = 0.0;
  std::size_t repeats = 0;
  int threads = 1;
  // per-repeat samples; index r is the same timing round across every cell
  // that shares an n, so cells can be compared pairwise per round
  std::vector<double> samples_ms;
};

std::vector<BenchRow> run_bench_rows(const RunConfig& cfg);
std::string bench_csv(const std::vector<BenchRow>& rows);

struct InvariantCase {
  std::string suite;
  std::string name;
  bool pass = false;
  double measured = 0.0;
  double bound = 0.0;
};

std::vector<InvariantCase> run_invariant_suites(const RunConfig& cfg);
std::string invariants_jsonl(const std::vector<InvariantCase>& cases);

struct CommandResult {
  int exit_code = kOk;
  std::string output;
};

CommandResult cmd_bench(const RunConfig& cfg);
CommandResult cmd_plan_dump(const RunConfig& cfg);
CommandResult cmd_invariants(const RunConfig& cfg);
CommandResult cmd_gradcheck(const RunConfig& cfg);
CommandResult cmd_train(const RunConfig& cfg);
CommandResult cmd_anneal_demo(const RunConfig& cfg);

// Dispatches on cfg.command, writes the artifact to cfg.out (or stdout), and
// maps thrown errors onto the exit codes above.
int run_command(const RunConfig& cfg);

}  // namespace espattn::cli
