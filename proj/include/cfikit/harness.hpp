#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cfikit/machine.hpp"
#include "cfikit/monitor.hpp"
#include "cfikit/rewriter.hpp"

namespace cfikit::harness {

enum class Outcome : uint8_t { Completed, CfiViolation, Fault, BudgetExhausted };

const char* outcome_name(Outcome o);
int outcome_exit_code(Outcome o);  // 0, 10, 11, 12

// Attack scripts inject events into a run, one rule per line:
//   <trigger> <action>
//   trigger: at-cycle <n> | at-pc <hex> | at-symbol <name>
//   action:  write8 <addr> <val> | write16 <addr> <val> | write32 <addr> <val>
//          | set-reg r<n> <val> | raise-irq <n>
// Each rule fires once. Writes go through the non-secure access policy,
// so an attack touching protected memory faults the run.
struct AttackAction {
  enum class Kind { Write8, Write16, Write32, SetReg, RaiseIrq } kind;
  uint32_t addr = 0;   // write target
  uint32_t value = 0;  // write/set-reg value, irq number
  uint8_t reg = 0;
};

struct AttackRule {
  enum class Trigger { AtCycle, AtPc, AtSymbol } trigger;
  uint64_t cycle = 0;
  uint32_t pc = 0;
  std::string symbol;
  AttackAction action;
};

struct ScriptError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<AttackRule> parse_attack_script(const std::string& text);
std::vector<AttackRule> load_attack_script(const std::string& path);

struct RunOptions {
  uint64_t max_cycles = 1000000;
  std::vector<AttackRule> attacks;
  monitor::MonitorConfig monitor;
  bool trace = false;
};

struct RunReport {
  Outcome outcome = Outcome::Completed;
  uint64_t cycles = 0;
  bool monitored = false;
  monitor::MonitorStats stats;
  std::optional<monitor::Violation> violation;
  std::vector<uint32_t> output;
  sim::Fault fault = sim::Fault::None;
  std::string fault_detail;
  std::vector<sim::TraceEntry> trace;
};

// Session keeps the machine alive after the run so callers can inspect
// final memory and register state.
struct Session {
  std::unique_ptr<sim::Machine> machine;
  std::unique_ptr<monitor::BranchMonitor> monitor;
  RunReport report;
};

// Binds the control-flow supervisor automatically when the manifest
// carries dispatch tables.
Session run_image(const image::FirmwareImage& img, const RunOptions& opts = {});

struct MemMismatch {
  uint32_t addr = 0;
  uint8_t baseline = 0;
  uint8_t candidate = 0;
};

// Differential comparison over the non-secure writable regions. In the
// region holding the final stack pointer only live stack contents (at
// or above the higher of the two final sps) are compared; scratch below
// the stack pointer is dead by definition.
std::vector<MemMismatch> compare_memory(const sim::Machine& baseline,
                                        const sim::Machine& candidate,
                                        size_t limit = 16);

struct BenchResult {
  rewrite::InstrumentReport report;
  uint64_t baseline_cycles = 0;
  uint64_t instrumented_cycles = 0;
  double overhead() const {
    return baseline_cycles == 0
               ? 0.0
               : static_cast<double>(instrumented_cycles) /
                         static_cast<double>(baseline_cycles) -
                     1.0;
  }
};

// Runs the image plain and instrumented; both runs must complete.
BenchResult bench_image(const image::FirmwareImage& baseline,
                        uint64_t max_cycles = 1000000);

}  // namespace cfikit::harness
