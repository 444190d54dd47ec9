#include "cfikit/machine.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>

namespace cfikit::sim {

using isa::Instruction;
using isa::Kind;

const char* fault_name(Fault f) {
  switch (f) {
    case Fault::None: return "none";
    case Fault::MemFault: return "mem-fault";
    case Fault::UsageFault: return "usage-fault";
    case Fault::SecureFault: return "secure-fault";
    case Fault::HardFault: return "hard-fault";
  }
  return "?";
}

void MemoryMap::add_region(const Region& region) {
  Backing b;
  b.region = region;
  b.bytes.assign(region.size, 0);
  backings_.push_back(std::move(b));
}

const MemoryMap::Backing* MemoryMap::find(uint32_t addr) const {
  for (const auto& b : backings_) {
    if (b.region.contains(addr)) return &b;
  }
  return nullptr;
}

MemoryMap::Backing* MemoryMap::find(uint32_t addr) {
  return const_cast<Backing*>(
      static_cast<const MemoryMap*>(this)->find(addr));
}

Fault MemoryMap::check_access(Security sec, uint32_t addr, uint32_t len,
                              AccessKind kind) const {
  const Backing* b = find(addr);
  if (!b || !b->region.contains(addr, len)) return Fault::MemFault;
  const Region& r = b->region;

  if (sec == Security::NonSecure) {
    if (r.security == RegionSecurity::Secure) return Fault::SecureFault;
    if (r.security == RegionSecurity::NSC && kind != AccessKind::Fetch) {
      return Fault::SecureFault;
    }
  }

  switch (kind) {
    case AccessKind::Fetch:
      if (!(r.perms & image::PERM_X)) return Fault::MemFault;
      break;
    case AccessKind::Load:
      if (!(r.perms & image::PERM_R)) return Fault::MemFault;
      break;
    case AccessKind::Store:
      if (!(r.perms & image::PERM_W)) return Fault::MemFault;
      break;
  }
  return Fault::None;
}

uint8_t MemoryMap::raw_read8(uint32_t addr) const {
  const Backing* b = find(addr);
  if (!b) throw MachineError("raw read of unmapped address");
  return b->bytes[addr - b->region.base];
}

void MemoryMap::raw_write8(uint32_t addr, uint8_t value) {
  Backing* b = find(addr);
  if (!b) throw MachineError("raw write of unmapped address");
  b->bytes[addr - b->region.base] = value;
}

uint16_t MemoryMap::raw_read16(uint32_t addr) const {
  return static_cast<uint16_t>(raw_read8(addr) | (raw_read8(addr + 1) << 8));
}

uint32_t MemoryMap::raw_read32(uint32_t addr) const {
  return raw_read16(addr) | (static_cast<uint32_t>(raw_read16(addr + 2)) << 16);
}

void MemoryMap::raw_write16(uint32_t addr, uint16_t value) {
  raw_write8(addr, static_cast<uint8_t>(value & 0xFF));
  raw_write8(addr + 1, static_cast<uint8_t>(value >> 8));
}

void MemoryMap::raw_write32(uint32_t addr, uint32_t value) {
  raw_write16(addr, static_cast<uint16_t>(value & 0xFFFF));
  raw_write16(addr + 2, static_cast<uint16_t>(value >> 16));
}

Machine::Machine(const Manifest& manifest,
                 const std::vector<image::Section>& sections)
    : manifest_(manifest) {
  manifest_.validate();
  for (const auto& r : manifest_.regions) mem_.add_region(r);
  for (const auto& s : sections) {
    for (size_t i = 0; i < s.bytes.size(); ++i) {
      uint32_t addr = s.base + static_cast<uint32_t>(i);
      MemoryMap::Backing* b = mem_.find(addr);
      if (!b) {
        throw MachineError("image section outside declared regions");
      }
      b->bytes[addr - b->region.base] = s.bytes[i];
    }
  }

  if (const Region* io = manifest_.region_named("io")) {
    output_port_ = io->base;
  }

  // Initial main stack pointer: vector table word 0 when present,
  // otherwise the top of the highest non-secure writable region.
  if (manifest_.vectors) {
    state_.sp_main_ns = mem_.raw_read32(manifest_.vectors->addr) & ~3u;
  } else {
    uint32_t top = 0;
    for (const auto& r : manifest_.regions) {
      if (r.security == RegionSecurity::NonSecure &&
          (r.perms & image::PERM_W)) {
        top = std::max(top, r.end());
      }
    }
    state_.sp_main_ns = top & ~3u;
  }
  for (const auto& r : manifest_.regions) {
    if (r.security == RegionSecurity::Secure && (r.perms & image::PERM_W)) {
      state_.sp_main_s = r.end() & ~3u;
      break;
    }
  }
  state_.pc = manifest_.entry & ~1u;
  min_sp_seen_ = state_.sp_main_ns;
}

uint32_t Machine::reg(uint8_t index) const {
  if (index < 13) return state_.r[index];
  if (index == isa::REG_SP) return active_sp();
  if (index == isa::REG_LR) return state_.lr;
  return state_.pc;
}

void Machine::set_reg(uint8_t index, uint32_t value) {
  if (index < 13) {
    state_.r[index] = value;
  } else if (index == isa::REG_SP) {
    set_active_sp(value);
  } else if (index == isa::REG_LR) {
    state_.lr = value;
  } else {
    state_.pc = value & ~1u;
  }
}

uint32_t Machine::active_sp() const {
  if (state_.security == Security::Secure) return state_.sp_main_s;
  // In Handler mode the core always uses the Main stack; spsel stays
  // pinned to Main in Thread mode as well.
  if (state_.mode == Mode::Thread && state_.spsel == StackSel::Process) {
    return state_.sp_process_ns;
  }
  return state_.sp_main_ns;
}

void Machine::set_active_sp(uint32_t value) {
  if (state_.security == Security::Secure) {
    state_.sp_main_s = value;
    return;
  }
  if (state_.mode == Mode::Thread && state_.spsel == StackSel::Process) {
    state_.sp_process_ns = value;
  } else {
    state_.sp_main_ns = value;
    min_sp_seen_ = std::min(min_sp_seen_, value);
  }
}

void Machine::fault(Fault f, const std::string& detail) {
  state_.fault = f;
  state_.fault_detail = detail;
}

bool Machine::check_or_fault(uint32_t addr, uint32_t len, AccessKind kind) {
  Fault f = mem_.check_access(state_.security, addr, len, kind);
  if (f != Fault::None) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s at 0x%08x",
                  kind == AccessKind::Fetch   ? "fetch"
                  : kind == AccessKind::Load ? "load"
                                             : "store",
                  addr);
    fault(f, buf);
    return false;
  }
  return true;
}

uint32_t Machine::load32(uint32_t addr, bool& ok) {
  ok = check_or_fault(addr, 4, AccessKind::Load);
  return ok ? mem_.raw_read32(addr) : 0;
}

void Machine::store32(uint32_t addr, uint32_t value, bool& ok) {
  ok = check_or_fault(addr, 4, AccessKind::Store);
  if (!ok) return;
  mem_.raw_write32(addr, value);
  if (output_port_ && addr == *output_port_) output_log_.push_back(value);
}

void Machine::external_store(uint32_t addr, uint32_t value, unsigned bytes) {
  Fault f = mem_.check_access(Security::NonSecure, addr, bytes, AccessKind::Store);
  if (f != Fault::None) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "external store at 0x%08x", addr);
    fault(f, buf);
    return;
  }
  switch (bytes) {
    case 1: mem_.raw_write8(addr, static_cast<uint8_t>(value)); break;
    case 2: mem_.raw_write16(addr, static_cast<uint16_t>(value)); break;
    default:
      mem_.raw_write32(addr, value);
      if (output_port_ && addr == *output_port_) output_log_.push_back(value);
      break;
  }
}

void Machine::raise_exception(uint32_t exc_number) {
  // Push the eight-word context frame on the currently active stack.
  uint32_t sp = active_sp() - FRAME_BYTES;
  Fault f = mem_.check_access(state_.security, sp, FRAME_BYTES, AccessKind::Store);
  if (f != Fault::None) {
    fault(Fault::HardFault, "context frame push failed");
    return;
  }
  uint32_t xpsr = state_.ipsr | XPSR_THUMB;
  if (state_.flag_n) xpsr |= XPSR_N;
  if (state_.flag_z) xpsr |= XPSR_Z;
  const uint32_t words[FRAME_WORDS] = {state_.r[0], state_.r[1], state_.r[2],
                                       state_.r[3], state_.r[12], state_.lr,
                                       state_.pc & ~1u, xpsr};
  for (uint32_t i = 0; i < FRAME_WORDS; ++i) {
    mem_.raw_write32(sp + 4 * i, words[i]);
  }

  state_.lr = state_.mode == Mode::Handler ? ERV_HANDLER_MAIN : ERV_THREAD_MAIN;
  set_active_sp(sp);
  state_.mode = Mode::Handler;
  state_.ipsr = exc_number;
  active_exceptions_.push_back(exc_number);
  state_.cycles += 12;
  if (exc_number == EXC_SVC) ++svc_entries_;

  if (exc_number == EXC_SVC && svc_handler) {
    // The branch monitor is bound here; it manipulates the stacked frame
    // and the machine performs the exception return on a Resume verdict.
    return;
  }

  if (!manifest_.vectors || exc_number >= manifest_.vectors->count) {
    fault(Fault::HardFault, "exception number outside vector table");
    return;
  }
  uint32_t vec_addr = manifest_.vectors->addr + 4 * exc_number;
  uint32_t handler = mem_.raw_read32(vec_addr) & ~1u;
  if (mem_.check_access(state_.security, handler, 2, AccessKind::Fetch) !=
      Fault::None) {
    fault(Fault::HardFault, "vector entry outside executable memory");
    return;
  }
  state_.pc = handler;
}

void Machine::exception_return(uint32_t erv) {
  if (state_.mode != Mode::Handler) {
    fault(Fault::HardFault, "exception return outside handler mode");
    return;
  }
  if (erv != ERV_HANDLER_MAIN && erv != ERV_THREAD_MAIN &&
      erv != ERV_THREAD_PROCESS) {
    fault(Fault::HardFault, "malformed exception return value");
    return;
  }
  if (active_exceptions_.empty() || active_exceptions_.back() != state_.ipsr) {
    fault(Fault::HardFault, "exception return ipsr mismatch");
    return;
  }

  uint32_t sp = active_sp();
  if (mem_.check_access(state_.security, sp, FRAME_BYTES, AccessKind::Load) !=
      Fault::None) {
    fault(Fault::HardFault, "context frame unstack failed");
    return;
  }
  uint32_t words[FRAME_WORDS];
  for (uint32_t i = 0; i < FRAME_WORDS; ++i) {
    words[i] = mem_.raw_read32(sp + 4 * i);
  }

  active_exceptions_.pop_back();
  uint32_t frame_ipsr = words[7] & 0x1FF;
  if (erv == ERV_HANDLER_MAIN) {
    if (active_exceptions_.empty() || active_exceptions_.back() != frame_ipsr) {
      fault(Fault::HardFault, "nested exception return bookkeeping mismatch");
      return;
    }
    state_.mode = Mode::Handler;
  } else {
    if (!active_exceptions_.empty() || frame_ipsr != 0) {
      fault(Fault::HardFault, "thread-mode return with active exceptions");
      return;
    }
    state_.mode = Mode::Thread;
  }
  set_active_sp(sp + FRAME_BYTES);
  state_.ipsr = frame_ipsr;
  state_.r[0] = words[0];
  state_.r[1] = words[1];
  state_.r[2] = words[2];
  state_.r[3] = words[3];
  state_.r[12] = words[4];
  state_.lr = words[5];
  state_.pc = words[6] & ~1u;
  state_.flag_n = (words[7] & XPSR_N) != 0;
  state_.flag_z = (words[7] & XPSR_Z) != 0;
  state_.cycles += 12;
}

void Machine::set_nz(uint32_t value) {
  state_.flag_n = (value & 0x80000000u) != 0;
  state_.flag_z = value == 0;
}

bool Machine::condition_holds(uint8_t cond, bool& supported) const {
  supported = true;
  switch (cond) {
    case isa::COND_EQ: return state_.flag_z;
    case isa::COND_NE: return !state_.flag_z;
    case isa::COND_MI: return state_.flag_n;
    case isa::COND_PL: return !state_.flag_n;
    default: supported = false; return false;
  }
}

void Machine::write_pc_value(uint32_t value, bool via_interworking) {
  if (via_interworking && is_exc_return(value)) {
    if (state_.mode != Mode::Handler) {
      // An ERV loaded outside Handler mode lands in an inaccessible
      // address range.
      fault(Fault::HardFault, "exception return value written to pc in thread mode");
      return;
    }
    exception_return(value);
    return;
  }
  state_.pc = value & ~1u;
  state_.cycles += 2;  // pipeline refill
}

void Machine::step() {
  if (!running()) return;

  uint32_t pc = state_.pc;
  if (!check_or_fault(pc, 2, AccessKind::Fetch)) return;

  uint8_t buf[4] = {mem_.raw_read8(pc), mem_.raw_read8(pc + 1), 0, 0};
  size_t len = 2;
  if (mem_.check_access(state_.security, pc + 2, 2, AccessKind::Fetch) ==
      Fault::None) {
    buf[2] = mem_.raw_read8(pc + 2);
    buf[3] = mem_.raw_read8(pc + 3);
    len = 4;
  }

  Instruction instr;
  try {
    instr = isa::decode(std::span<const uint8_t>(buf, len), 0);
  } catch (const isa::DecodeError&) {
    fault(Fault::UsageFault, "truncated 32-bit instruction");
    return;
  }

  // Non-secure execution may enter NSC memory only through sg.
  const MemoryMap::Backing* b = mem_.find(pc);
  if (state_.security == Security::NonSecure &&
      b->region.security == RegionSecurity::NSC &&
      instr.kind != Kind::Sg) {
    fault(Fault::SecureFault, "non-sg instruction fetched in NSC region");
    return;
  }

  if (trace_hook) {
    trace_hook({state_.cycles, state_.security, state_.mode, pc,
                isa::disassemble(instr)});
  }

  execute(instr, pc);
}

void Machine::execute(const Instruction& instr, uint32_t addr) {
  bool ok = true;
  switch (instr.kind) {
    case Kind::MovImm:
      state_.r[instr.rd] = static_cast<uint32_t>(instr.imm);
      set_nz(state_.r[instr.rd]);
      state_.pc = addr + 2;
      state_.cycles += 1;
      break;
    case Kind::AddImm:
      state_.r[instr.rd] += static_cast<uint32_t>(instr.imm);
      set_nz(state_.r[instr.rd]);
      state_.pc = addr + 2;
      state_.cycles += 1;
      break;
    case Kind::SubImm:
      state_.r[instr.rd] -= static_cast<uint32_t>(instr.imm);
      set_nz(state_.r[instr.rd]);
      state_.pc = addr + 2;
      state_.cycles += 1;
      break;
    case Kind::CmpImm:
      set_nz(state_.r[instr.rd] - static_cast<uint32_t>(instr.imm));
      state_.pc = addr + 2;
      state_.cycles += 1;
      break;
    case Kind::LdrImm: {
      uint32_t value = load32(state_.r[instr.rn] + instr.imm, ok);
      if (!ok) return;
      state_.r[instr.rd] = value;
      state_.pc = addr + 2;
      state_.cycles += 2;  // 1 + one register moved
      break;
    }
    case Kind::StrImm:
      store32(state_.r[instr.rn] + instr.imm, state_.r[instr.rd], ok);
      if (!ok) return;
      state_.pc = addr + 2;
      state_.cycles += 2;
      break;
    case Kind::Push: {
      unsigned count = static_cast<unsigned>(std::popcount(instr.reglist)) +
                       (instr.pclr ? 1 : 0);
      uint32_t sp = active_sp() - 4 * count;
      uint32_t slot = sp;
      for (int r = 0; r < 8; ++r) {
        if (instr.reglist & (1 << r)) {
          store32(slot, state_.r[r], ok);
          if (!ok) return;
          slot += 4;
        }
      }
      if (instr.pclr) {
        store32(slot, state_.lr, ok);
        if (!ok) return;
      }
      set_active_sp(sp);
      state_.pc = addr + 2;
      state_.cycles += 1 + count;
      break;
    }
    case Kind::Pop: {
      unsigned count = static_cast<unsigned>(std::popcount(instr.reglist)) +
                       (instr.pclr ? 1 : 0);
      uint32_t slot = active_sp();
      for (int r = 0; r < 8; ++r) {
        if (instr.reglist & (1 << r)) {
          uint32_t value = load32(slot, ok);
          if (!ok) return;
          state_.r[r] = value;
          slot += 4;
        }
      }
      uint32_t new_pc = 0;
      if (instr.pclr) {
        new_pc = load32(slot, ok);
        if (!ok) return;
        slot += 4;
      }
      set_active_sp(slot);
      state_.cycles += 1 + count;
      if (instr.pclr) {
        write_pc_value(new_pc, true);
      } else {
        state_.pc = addr + 2;
      }
      break;
    }
    case Kind::BCond: {
      bool supported;
      bool taken = condition_holds(instr.cond, supported);
      if (!supported) {
        fault(Fault::UsageFault, "unsupported condition code");
        return;
      }
      state_.cycles += 1;
      if (taken) {
        state_.pc = addr + 4 + instr.imm;
        state_.cycles += 2;
      } else {
        state_.pc = addr + 2;
      }
      break;
    }
    case Kind::B:
      state_.pc = addr + 4 + instr.imm;
      state_.cycles += 1 + 2;
      break;
    case Kind::BlImm:
      state_.lr = (addr + 4) | 1;
      state_.pc = addr + 4 + instr.imm;
      state_.cycles += 2 + 2;  // 32-bit instruction plus refill
      break;
    case Kind::BlxReg: {
      uint32_t target = reg(instr.rm);
      if (is_exc_return(target)) {
        // blx cannot perform an exception return; the target range is
        // inaccessible.
        fault(Fault::HardFault, "blx to exception return range");
        return;
      }
      state_.lr = (addr + 2) | 1;
      state_.pc = target & ~1u;
      state_.cycles += 1 + 2;
      break;
    }
    case Kind::BxReg: {
      uint32_t target = reg(instr.rm);
      state_.cycles += 1;
      write_pc_value(target, true);
      break;
    }
    case Kind::Svc:
      state_.pc = addr + 2;
      state_.cycles += 1;
      raise_exception(EXC_SVC);
      if (state_.fault != Fault::None) return;
      if (svc_handler) {
        SvcVerdict verdict = svc_handler(*this, static_cast<uint8_t>(instr.imm));
        if (state_.fault != Fault::None) return;
        if (verdict == SvcVerdict::Resume) {
          exception_return(state_.lr);
        } else {
          violation_halt_ = true;
        }
      }
      break;
    case Kind::Nop:
      state_.pc = addr + 2;
      state_.cycles += 1;
      break;
    case Kind::Sg: {
      const MemoryMap::Backing* b = mem_.find(addr);
      if (state_.security == Security::NonSecure &&
          b->region.security == RegionSecurity::NSC) {
        state_.security = Security::Secure;
      }
      state_.pc = addr + 2;
      state_.cycles += 1;
      break;
    }
    case Kind::Bxns: {
      if (state_.security != Security::Secure) {
        fault(Fault::UsageFault, "bxns outside secure state");
        return;
      }
      uint32_t target = reg(instr.rm);
      state_.security = Security::NonSecure;
      state_.pc = target & ~1u;
      state_.cycles += 1 + 2;
      break;
    }
    case Kind::Halt:
      state_.halted = true;
      state_.cycles += 1;
      break;
    case Kind::Undefined:
      fault(Fault::UsageFault, "undefined instruction");
      return;
  }
}

void Machine::run(uint64_t max_cycles) {
  while (running() && state_.cycles < max_cycles) step();
}

}  // namespace cfikit::sim
