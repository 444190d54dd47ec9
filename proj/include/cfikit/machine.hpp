#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cfikit/image.hpp"
#include "cfikit/isa.hpp"

namespace cfikit::sim {

using image::Manifest;
using image::Region;
using image::RegionSecurity;

enum class Security : uint8_t { NonSecure, Secure };
enum class Mode : uint8_t { Thread, Handler };
enum class StackSel : uint8_t { Main, Process };
enum class AccessKind : uint8_t { Fetch, Load, Store };

enum class Fault : uint8_t {
  None,
  MemFault,     // permission violation or unmapped access
  UsageFault,   // undefined instruction / unsupported condition
  SecureFault,  // illegal secure/non-secure crossing
  HardFault,    // bad ERV, exception bookkeeping mismatch, bad vector
};

const char* fault_name(Fault f);

// Exception numbers. 0 means Thread mode (no exception active).
inline constexpr uint32_t EXC_SVC = 11;
inline constexpr uint32_t EXC_IRQ_BASE = 16;

// Exception return values. Two variants are defined: return to Handler
// mode and return to Thread mode on the Main stack (the Process-stack
// variant exists for completeness but is never produced while spsel is
// fixed to Main).
inline constexpr uint32_t ERV_HANDLER_MAIN = 0xFFFFFFF1;
inline constexpr uint32_t ERV_THREAD_MAIN = 0xFFFFFFF9;
inline constexpr uint32_t ERV_THREAD_PROCESS = 0xFFFFFFFD;

inline bool is_exc_return(uint32_t addr) { return addr > 0xF0000000u; }

// Hardware-pushed context frame, eight words: r0 r1 r2 r3 r12 lr pc xpsr.
inline constexpr uint32_t FRAME_WORDS = 8;
inline constexpr uint32_t FRAME_BYTES = 32;
inline constexpr uint32_t FRAME_OFF_R12 = 0x10;
inline constexpr uint32_t FRAME_OFF_LR = 0x14;
inline constexpr uint32_t FRAME_OFF_PC = 0x18;
inline constexpr uint32_t FRAME_OFF_XPSR = 0x1C;

// xpsr model: ipsr in bits 8:0, Thumb bit 24, Z bit 30, N bit 31.
inline constexpr uint32_t XPSR_THUMB = 1u << 24;
inline constexpr uint32_t XPSR_Z = 1u << 30;
inline constexpr uint32_t XPSR_N = 1u << 31;

struct MachineState {
  uint32_t r[13] = {};  // r0-r12
  uint32_t sp_main_ns = 0;
  uint32_t sp_process_ns = 0;
  uint32_t sp_main_s = 0;
  uint32_t lr = 0;
  uint32_t pc = 0;
  uint32_t ipsr = 0;
  Mode mode = Mode::Thread;
  Security security = Security::NonSecure;
  StackSel spsel = StackSel::Main;
  bool flag_n = false;
  bool flag_z = false;
  uint64_t cycles = 0;
  bool halted = false;
  Fault fault = Fault::None;
  std::string fault_detail;
};

class MemoryMap {
 public:
  struct Backing {
    Region region;
    std::vector<uint8_t> bytes;
  };

  void add_region(const Region& region);
  const Backing* find(uint32_t addr) const;
  Backing* find(uint32_t addr);

  // Access policy. NonSecure state may never touch Secure regions; NSC
  // regions are fetchable from NonSecure (the sg entry check is enforced
  // at execute time) but not loadable or storable. Returns the fault
  // classification, never traps.
  Fault check_access(Security sec, uint32_t addr, uint32_t len,
                     AccessKind kind) const;

  // Raw accessors bypass the policy; they serve the loader, the trace
  // layer and test assertions.
  uint8_t raw_read8(uint32_t addr) const;
  void raw_write8(uint32_t addr, uint8_t value);
  uint16_t raw_read16(uint32_t addr) const;
  uint32_t raw_read32(uint32_t addr) const;
  void raw_write16(uint32_t addr, uint16_t value);
  void raw_write32(uint32_t addr, uint32_t value);

  std::vector<Backing>& backings() { return backings_; }
  const std::vector<Backing>& backings() const { return backings_; }

 private:
  std::vector<Backing> backings_;
};

// Verdict returned by a bound supervisor-call handler.
enum class SvcVerdict : uint8_t { Resume, Halt };

struct TraceEntry {
  uint64_t cycle;
  Security security;
  Mode mode;
  uint32_t pc;
  std::string disasm;
};

struct MachineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Deterministic single-core simulator. One instance is single-threaded;
// step() is the only mutator of machine state.
class Machine {
 public:
  Machine(const Manifest& manifest, const std::vector<image::Section>& sections);

  void step();
  void run(uint64_t max_cycles);

  void raise_exception(uint32_t exc_number);
  void exception_return(uint32_t erv);

  // Attack-model store: attempted as a NonSecure data store through the
  // access policy. On a fault the machine halts with that fault.
  void external_store(uint32_t addr, uint32_t value, unsigned bytes);

  uint32_t reg(uint8_t index) const;
  void set_reg(uint8_t index, uint32_t value);
  uint32_t active_sp() const;
  void set_active_sp(uint32_t value);

  uint32_t read_word(uint32_t addr) const { return mem_.raw_read32(addr); }

  bool running() const {
    return !state_.halted && state_.fault == Fault::None && !violation_halt_;
  }

  MachineState& state() { return state_; }
  const MachineState& state() const { return state_; }
  MemoryMap& memory() { return mem_; }
  const MemoryMap& memory() const { return mem_; }
  const Manifest& manifest() const { return manifest_; }

  // Supervisor-call binding; invoked after exception entry with the
  // svc comment field. A Resume verdict performs the exception return.
  std::function<SvcVerdict(Machine&, uint8_t)> svc_handler;

  std::function<void(const TraceEntry&)> trace_hook;

  const std::vector<uint32_t>& output_log() const { return output_log_; }
  uint64_t svc_entries() const { return svc_entries_; }
  uint32_t min_sp_seen() const { return min_sp_seen_; }
  bool violation_halt() const { return violation_halt_; }
  void halt_with_violation() { violation_halt_ = true; }

  const std::vector<uint32_t>& active_exceptions() const {
    return active_exceptions_;
  }

 private:
  void fault(Fault f, const std::string& detail);
  bool check_or_fault(uint32_t addr, uint32_t len, AccessKind kind);
  uint32_t load32(uint32_t addr, bool& ok);
  void store32(uint32_t addr, uint32_t value, bool& ok);
  void write_pc_value(uint32_t value, bool via_interworking);
  void execute(const isa::Instruction& instr, uint32_t instr_addr);
  void set_nz(uint32_t value);
  bool condition_holds(uint8_t cond, bool& supported) const;

  Manifest manifest_;
  MemoryMap mem_;
  MachineState state_;
  std::vector<uint32_t> active_exceptions_;
  std::vector<uint32_t> output_log_;
  std::optional<uint32_t> output_port_;
  uint64_t svc_entries_ = 0;
  uint32_t min_sp_seen_ = 0xFFFFFFFF;
  bool violation_halt_ = false;
};

}  // namespace cfikit::sim
