#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "cfikit/machine.hpp"
#include "cfikit/rewriter.hpp"

namespace cfikit::monitor {

using rewrite::BranchTable;
using rewrite::CallTargetTable;
using rewrite::DispatchClass;
using rewrite::DispatchDescriptorTable;

// Binary search over the site-sorted branch table.
std::optional<uint32_t> btbl_lookup(const BranchTable& table, uint32_t site);

bool is_call_target(const CallTargetTable& table, uint32_t addr);

struct MonitorConfig {
  // Shadow stack placement. Zero base means: take the first secure
  // read-write region from the manifest.
  uint32_t shadow_base = 0;
  uint32_t shadow_capacity = 256;

  // When set, validated bx-lr returns resume at the return address
  // directly instead of bouncing through the return trampoline.
  bool bx_lr_fast_path = true;
};

struct Violation {
  uint64_t cycle = 0;
  uint32_t site = 0;
  DispatchClass cls = DispatchClass::DirectCall;
  uint32_t expected = 0;
  uint32_t observed = 0;
  std::string detail;
};

struct MonitorStats {
  uint64_t traps = 0;
  uint64_t direct_calls = 0;
  uint64_t indirect_calls = 0;
  uint64_t returns = 0;
  uint64_t exception_entries = 0;
  uint32_t shadow_depth = 0;
  uint32_t shadow_max_depth = 0;
};

// Control-flow supervisor dispatched from the svc binding. State that
// must survive the guest (the shadow stack) lives in secure memory; the
// bookkeeping mirrors it on the host side.
class BranchMonitor {
 public:
  BranchMonitor(sim::Machine& machine, MonitorConfig config = {});

  sim::SvcVerdict on_svc(sim::Machine& m, uint8_t comment);

  const MonitorStats& stats() const { return stats_; }
  const std::optional<Violation>& violation() const { return violation_; }

  const BranchTable& branch_table() const { return btbl_; }
  const CallTargetTable& call_targets() const { return cttbl_; }
  const DispatchDescriptorTable& descriptors() const { return dispatch_; }

 private:
  bool shadow_push(sim::Machine& m, uint32_t value);
  std::optional<uint32_t> shadow_pop(sim::Machine& m);
  sim::SvcVerdict flag(sim::Machine& m, DispatchClass cls, uint32_t site,
                       uint32_t expected, uint32_t observed,
                       const std::string& detail);

  sim::SvcVerdict on_direct_call(sim::Machine& m, uint32_t frame);
  sim::SvcVerdict on_indirect_call(sim::Machine& m, uint32_t frame,
                                   const rewrite::DispatchDescriptor& d);
  sim::SvcVerdict on_return_bx_lr(sim::Machine& m, uint32_t frame,
                                  const rewrite::DispatchDescriptor& d);
  sim::SvcVerdict on_return_pop(sim::Machine& m, uint32_t frame,
                                const rewrite::DispatchDescriptor& d);
  sim::SvcVerdict on_exception_entry(sim::Machine& m, uint32_t frame,
                                     const rewrite::DispatchDescriptor& d);

  MonitorConfig config_;
  BranchTable btbl_;
  CallTargetTable cttbl_;
  DispatchDescriptorTable dispatch_;
  MonitorStats stats_;
  std::optional<Violation> violation_;
};

}  // namespace cfikit::monitor
