#include "cfikit/monitor.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>

namespace cfikit::monitor {

using sim::Machine;
using sim::SvcVerdict;

namespace {

uint32_t frame_word(const Machine& m, uint32_t frame, uint32_t index) {
  return m.memory().raw_read32(frame + 4 * index);
}

void set_frame_word(Machine& m, uint32_t frame, uint32_t index,
                    uint32_t value) {
  m.memory().raw_write32(frame + 4 * index, value);
}

bool same_code_addr(uint32_t a, uint32_t b) { return (a | 1u) == (b | 1u); }

std::string hex(uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%x", v);
  return buf;
}

}  // namespace

std::optional<uint32_t> btbl_lookup(const BranchTable& table, uint32_t site) {
  auto it = std::lower_bound(
      table.begin(), table.end(), site,
      [](const rewrite::BranchTableEntry& e, uint32_t s) { return e.site < s; });
  if (it == table.end() || it->site != site) return std::nullopt;
  return it->dest;
}

bool is_call_target(const CallTargetTable& table, uint32_t addr) {
  return std::binary_search(table.begin(), table.end(), addr & ~1u);
}

BranchMonitor::BranchMonitor(Machine& machine, MonitorConfig config)
    : config_(config) {
  const auto& m = machine.manifest();
  const auto* bt = m.table_named("btbl");
  const auto* ct = m.table_named("cttbl");
  const auto* dt = m.table_named("dispatch");
  if (!bt || !ct || !dt)
    throw sim::MachineError("monitor: image has no dispatch tables");
  btbl_ = rewrite::read_branch_table(machine.memory(), *bt);
  cttbl_ = rewrite::read_call_target_table(machine.memory(), *ct);
  dispatch_ = rewrite::read_dispatch_table(machine.memory(), *dt);

  if (config_.shadow_base == 0) {
    for (const auto& r : m.regions) {
      if (r.security == image::RegionSecurity::Secure &&
          (r.perms & image::PERM_W)) {
        config_.shadow_base = r.base;
        config_.shadow_capacity =
            std::min<uint32_t>(config_.shadow_capacity, r.size / 4);
        break;
      }
    }
    if (config_.shadow_base == 0)
      throw sim::MachineError("monitor: no secure rw region for shadow stack");
  }

  machine.svc_handler = [this](Machine& mm, uint8_t comment) {
    return on_svc(mm, comment);
  };
}

bool BranchMonitor::shadow_push(Machine& m, uint32_t value) {
  if (stats_.shadow_depth >= config_.shadow_capacity) return false;
  m.memory().raw_write32(config_.shadow_base + 4 * stats_.shadow_depth, value);
  ++stats_.shadow_depth;
  stats_.shadow_max_depth =
      std::max(stats_.shadow_max_depth, stats_.shadow_depth);
  return true;
}

std::optional<uint32_t> BranchMonitor::shadow_pop(Machine& m) {
  if (stats_.shadow_depth == 0) return std::nullopt;
  --stats_.shadow_depth;
  return m.memory().raw_read32(config_.shadow_base + 4 * stats_.shadow_depth);
}

SvcVerdict BranchMonitor::flag(Machine& m, DispatchClass cls, uint32_t site,
                               uint32_t expected, uint32_t observed,
                               const std::string& detail) {
  violation_ = Violation{m.state().cycles, site, cls, expected, observed,
                         detail};
  m.halt_with_violation();
  return SvcVerdict::Halt;
}

SvcVerdict BranchMonitor::on_svc(Machine& m, uint8_t comment) {
  ++stats_.traps;
  uint32_t frame = m.active_sp();
  uint32_t site = frame_word(m, frame, 6) - 2;

  const auto* d = rewrite::find_descriptor(dispatch_, comment);
  if (!d)
    return flag(m, DispatchClass::DirectCall, site, 0, comment,
                "unknown dispatch comment " + hex(comment));

  switch (d->cls) {
    case DispatchClass::DirectCall:
      return on_direct_call(m, frame);
    case DispatchClass::IndirectCall:
      return on_indirect_call(m, frame, *d);
    case DispatchClass::ReturnBxLr:
      return on_return_bx_lr(m, frame, *d);
    case DispatchClass::ReturnPop:
      return on_return_pop(m, frame, *d);
    case DispatchClass::ExceptionEntry:
      return on_exception_entry(m, frame, *d);
  }
  return flag(m, DispatchClass::DirectCall, site, 0, comment,
              "corrupt dispatch class");
}

SvcVerdict BranchMonitor::on_direct_call(Machine& m, uint32_t frame) {
  ++stats_.direct_calls;
  uint32_t site = frame_word(m, frame, 6) - 2;
  auto dest = btbl_lookup(btbl_, site);
  if (!dest)
    return flag(m, DispatchClass::DirectCall, site, 0, site,
                "call site " + hex(site) + " missing from branch table");
  uint32_t ret = (site + 4) | 1u;
  if (!shadow_push(m, ret))
    return flag(m, DispatchClass::DirectCall, site, 0, ret,
                "shadow stack overflow");
  set_frame_word(m, frame, 5, ret);
  set_frame_word(m, frame, 6, *dest & ~1u);
  return SvcVerdict::Resume;
}

SvcVerdict BranchMonitor::on_indirect_call(Machine& m, uint32_t frame,
                                           const rewrite::DispatchDescriptor& d) {
  ++stats_.indirect_calls;
  uint32_t site = frame_word(m, frame, 6) - 2;

  uint32_t value;
  if (d.reg <= 3) {
    value = frame_word(m, frame, d.reg);
  } else if (d.reg == 12) {
    value = frame_word(m, frame, 4);
  } else if (d.reg == isa::REG_LR) {
    value = frame_word(m, frame, 5);
  } else if (d.reg <= 11) {
    value = m.reg(d.reg);
  } else {
    return flag(m, DispatchClass::IndirectCall, site, 0, d.reg,
                "invalid call register");
  }

  uint32_t target = value & ~1u;
  if (!is_call_target(cttbl_, target))
    return flag(m, DispatchClass::IndirectCall, site, 0, target,
                "indirect call to " + hex(target) +
                    " is not a subroutine entry");
  uint32_t ret = (site + 2) | 1u;
  if (!shadow_push(m, ret))
    return flag(m, DispatchClass::IndirectCall, site, 0, ret,
                "shadow stack overflow");
  set_frame_word(m, frame, 5, ret);
  set_frame_word(m, frame, 6, target);
  return SvcVerdict::Resume;
}

SvcVerdict BranchMonitor::on_return_bx_lr(Machine& m, uint32_t frame,
                                          const rewrite::DispatchDescriptor& d) {
  ++stats_.returns;
  uint32_t site = frame_word(m, frame, 6) - 2;
  uint32_t cand = frame_word(m, frame, 5);

  auto expected = shadow_pop(m);
  if (!expected)
    return flag(m, DispatchClass::ReturnBxLr, site, 0, cand,
                "shadow stack underflow");

  if (sim::is_exc_return(cand)) {
    // Returning from an exception handler: the interrupted context's
    // frame sits right above ours and its stacked pc must still match
    // the address recorded at exception entry.
    uint32_t outer_pc = frame_word(m, frame, 8 + 6);
    if (!same_code_addr(outer_pc, *expected))
      return flag(m, DispatchClass::ReturnBxLr, site, *expected, outer_pc,
                  "tampered exception frame: stacked pc " + hex(outer_pc) +
                      " expected " + hex(*expected));
    set_frame_word(m, frame, 6, d.trampoline & ~1u);
    return SvcVerdict::Resume;
  }

  if (!same_code_addr(cand, *expected))
    return flag(m, DispatchClass::ReturnBxLr, site, *expected, cand,
                "return address " + hex(cand) + " expected " +
                    hex(*expected));

  if (config_.bx_lr_fast_path) {
    set_frame_word(m, frame, 6, cand & ~1u);
  } else {
    set_frame_word(m, frame, 5, cand);
    set_frame_word(m, frame, 6, d.trampoline & ~1u);
  }
  return SvcVerdict::Resume;
}

SvcVerdict BranchMonitor::on_return_pop(Machine& m, uint32_t frame,
                                        const rewrite::DispatchDescriptor& d) {
  ++stats_.returns;
  uint32_t site = frame_word(m, frame, 6) - 2;
  uint32_t k = static_cast<uint32_t>(std::popcount(d.reglist));
  uint32_t cand = frame_word(m, frame, 8 + k);

  auto expected = shadow_pop(m);
  if (!expected)
    return flag(m, DispatchClass::ReturnPop, site, 0, cand,
                "shadow stack underflow");

  if (sim::is_exc_return(cand)) {
    uint32_t outer_pc = frame_word(m, frame, 8 + k + 1 + 6);
    if (!same_code_addr(outer_pc, *expected))
      return flag(m, DispatchClass::ReturnPop, site, *expected, outer_pc,
                  "tampered exception frame: stacked pc " + hex(outer_pc) +
                      " expected " + hex(*expected));
    set_frame_word(m, frame, 6, d.trampoline & ~1u);
    return SvcVerdict::Resume;
  }

  if (!same_code_addr(cand, *expected))
    return flag(m, DispatchClass::ReturnPop, site, *expected, cand,
                "return address " + hex(cand) + " expected " +
                    hex(*expected));

  set_frame_word(m, frame, 6, d.trampoline & ~1u);
  return SvcVerdict::Resume;
}

SvcVerdict BranchMonitor::on_exception_entry(Machine& m, uint32_t frame,
                                             const rewrite::DispatchDescriptor& d) {
  ++stats_.exception_entries;
  uint32_t site = frame_word(m, frame, 6) - 2;
  if (!same_code_addr(site | 1u, d.trampoline | 1u))
    return flag(m, DispatchClass::ExceptionEntry, site, d.trampoline, site,
                "exception dispatch from " + hex(site) +
                    " instead of its vector stub");
  // Record the interrupted context's resume point; the matching return
  // validates the stacked pc against it.
  uint32_t outer_pc = frame_word(m, frame, 8 + 6);
  if (!shadow_push(m, outer_pc))
    return flag(m, DispatchClass::ExceptionEntry, site, 0, outer_pc,
                "shadow stack overflow");
  set_frame_word(m, frame, 6, d.handler & ~1u);
  return SvcVerdict::Resume;
}

}  // namespace cfikit::monitor
