#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfikit/image.hpp"
#include "cfikit/isa.hpp"

namespace cfikit::sim {
class MemoryMap;
}

namespace cfikit::rewrite {

struct BranchTableEntry {
  uint32_t site = 0;  // address of the original direct call
  uint32_t dest = 0;  // absolute destination address
};

// Sorted strictly by site address; 8 bytes per record on the wire.
using BranchTable = std::vector<BranchTableEntry>;

// Sorted unique subroutine entry addresses.
using CallTargetTable = std::vector<uint32_t>;

enum class DispatchClass : uint8_t {
  DirectCall = 1,
  IndirectCall = 2,
  ReturnBxLr = 3,
  ReturnPop = 4,
  ExceptionEntry = 5,
};

const char* dispatch_class_name(DispatchClass cls);

struct DispatchDescriptor {
  uint8_t comment = 0;
  DispatchClass cls = DispatchClass::DirectCall;
  uint8_t reg = 0;          // IndirectCall: register operand
  uint8_t reglist = 0;      // ReturnPop: r0-r7 list (pc implied)
  uint32_t trampoline = 0;  // trampoline address, 0 if none
  uint32_t handler = 0;     // ExceptionEntry: original handler address
};

// Comment value 0 is reserved; descriptors are keyed by comment.
using DispatchDescriptorTable = std::vector<DispatchDescriptor>;

const DispatchDescriptor* find_descriptor(const DispatchDescriptorTable& table,
                                          uint8_t comment);

struct InstrumentReport {
  size_t total_instructions = 0;
  size_t rewritten_sites = 0;
  size_t direct_call_sites = 0;
  size_t indirect_call_sites = 0;
  size_t return_sites = 0;
  size_t vectors_rewritten = 0;
  size_t trampoline_bytes = 0;
  size_t branch_table_bytes = 0;
  size_t call_target_table_bytes = 0;
  size_t dispatch_table_bytes = 0;

  double ratio() const {
    return total_instructions == 0
               ? 0.0
               : static_cast<double>(rewritten_sites) /
                     static_cast<double>(total_instructions);
  }
};

struct InstrumentResult {
  image::FirmwareImage image;  // manifest carries the table sidecar entries
  BranchTable branch_table;
  CallTargetTable call_targets;
  DispatchDescriptorTable descriptors;
  InstrumentReport report;
};

struct RewriteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Layout-preserving instrumentation pipeline: replaces every call,
// indirect branch and effective return in the main-program ranges with
// an svc dispatch, rewrites the exception vector to trampolines, and
// emits the lookup tables into the reserved regions. The output image
// has exactly the input's section layout.
InstrumentResult instrument_image(const image::FirmwareImage& input);

CallTargetTable build_call_target_table(const image::Manifest& manifest);

// One trampoline per distinct effective-return form, placed sequentially
// in the executable reserve; fills in DispatchDescriptor::trampoline.
// Returns the number of code bytes emitted.
size_t synthesize_trampolines(image::FirmwareImage& img,
                              const image::NamedRange& reserve,
                              DispatchDescriptorTable& descriptors);

// Runtime loaders used by the monitor; tables live in read-only
// non-secure memory, little-endian.
BranchTable read_branch_table(const sim::MemoryMap& mem,
                              const image::NamedRange& range);
CallTargetTable read_call_target_table(const sim::MemoryMap& mem,
                                       const image::NamedRange& range);
DispatchDescriptorTable read_dispatch_table(const sim::MemoryMap& mem,
                                            const image::NamedRange& range);

}  // namespace cfikit::rewrite
