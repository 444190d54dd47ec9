#include "cfikit/rewriter.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "cfikit/machine.hpp"

namespace cfikit::rewrite {

using image::FirmwareImage;
using image::Manifest;
using image::NamedRange;
using isa::BranchClass;
using isa::Instruction;
using isa::Kind;

const char* dispatch_class_name(DispatchClass cls) {
  switch (cls) {
    case DispatchClass::DirectCall: return "direct-call";
    case DispatchClass::IndirectCall: return "indirect-call";
    case DispatchClass::ReturnBxLr: return "return-bx-lr";
    case DispatchClass::ReturnPop: return "return-pop";
    case DispatchClass::ExceptionEntry: return "exception-entry";
  }
  return "?";
}

const DispatchDescriptor* find_descriptor(const DispatchDescriptorTable& table,
                                          uint8_t comment) {
  for (const auto& d : table) {
    if (d.comment == comment) return &d;
  }
  return nullptr;
}

namespace {

struct Site {
  uint32_t addr = 0;
  Instruction instr;
  BranchClass cls = BranchClass::NotABranch;
};

// Decodes one main-program range, skipping declared literal pools.
void scan_range(const FirmwareImage& img, const image::AddressRange& range,
                std::vector<Site>& sites, size_t& total, size_t& svc_count) {
  const Manifest& m = img.manifest;
  uint32_t addr = range.base;
  while (addr < range.end()) {
    if (m.in_pool(addr)) {
      addr += 2;
      continue;
    }
    const uint8_t* p0 = img.byte_at(addr);
    const uint8_t* p1 = img.byte_at(addr + 1);
    if (!p0 || !p1) {
      throw RewriteError("main range not backed by image bytes at 0x" +
                         std::to_string(addr));
    }
    uint8_t buf[4] = {*p0, *p1, 0, 0};
    size_t len = 2;
    if (addr + 4 <= range.end() && img.byte_at(addr + 2) && !m.in_pool(addr + 2)) {
      buf[2] = *img.byte_at(addr + 2);
      buf[3] = *img.byte_at(addr + 3);
      len = 4;
    }
    Instruction instr;
    try {
      instr = isa::decode(std::span<const uint8_t>(buf, len), 0);
    } catch (const isa::DecodeError&) {
      char msg[80];
      std::snprintf(msg, sizeof msg,
                    "truncated instruction at 0x%08x in main range", addr);
      throw RewriteError(msg);
    }
    if (instr.kind == Kind::Undefined) {
      char msg[96];
      std::snprintf(msg, sizeof msg,
                    "undecodable bytes at 0x%08x in main range "
                    "(missing pool declaration?)",
                    addr);
      throw RewriteError(msg);
    }
    ++total;
    if (instr.kind == Kind::Svc) ++svc_count;
    BranchClass cls = isa::classify(instr);
    if (cls == BranchClass::DirectCall || cls == BranchClass::IndirectCall ||
        cls == BranchClass::EffectiveReturnBxLr ||
        cls == BranchClass::EffectiveReturnPop) {
      sites.push_back({addr, instr, cls});
    }
    addr += static_cast<uint32_t>(instr.width());
  }
}

class CommentAllocator {
 public:
  uint8_t allocate() {
    if (next_ > 255) throw RewriteError("more than 255 dispatch descriptors");
    return static_cast<uint8_t>(next_++);
  }

 private:
  unsigned next_ = 1;  // comment 0 reserved
};

class TrampolineWriter {
 public:
  TrampolineWriter(FirmwareImage& img, const NamedRange& reserve,
                   size_t start_offset = 0)
      : img_(img),
        reserve_(reserve),
        cursor_(reserve.base + static_cast<uint32_t>(start_offset)) {}

  uint32_t emit(const std::vector<uint16_t>& halfwords) {
    uint32_t addr = cursor_;
    if (cursor_ + 2 * halfwords.size() > reserve_.base + reserve_.size) {
      throw RewriteError("trampoline reserve region exhausted");
    }
    for (uint16_t hw : halfwords) {
      img_.write16(cursor_, hw);
      cursor_ += 2;
    }
    return addr;
  }

  size_t bytes_used() const { return cursor_ - reserve_.base; }

 private:
  FirmwareImage& img_;
  NamedRange reserve_;
  uint32_t cursor_;
};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xFF));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xFF));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xFF));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xFF));
}

}  // namespace

CallTargetTable build_call_target_table(const Manifest& manifest) {
  CallTargetTable table;
  for (const auto& sym : manifest.symbols) {
    uint32_t addr = sym.addr & ~1u;
    if (!manifest.in_main(addr)) continue;
    const image::Region* r = manifest.region_at(addr);
    if (!r || !(r->perms & image::PERM_X)) {
      throw RewriteError("symbol " + sym.name + " outside executable range");
    }
    table.push_back(addr);
  }
  std::sort(table.begin(), table.end());
  table.erase(std::unique(table.begin(), table.end()), table.end());
  return table;
}

size_t synthesize_trampolines(FirmwareImage& img, const NamedRange& reserve,
                              DispatchDescriptorTable& descriptors) {
  TrampolineWriter writer(img, reserve);
  for (auto& d : descriptors) {
    if (d.cls == DispatchClass::ReturnBxLr) {
      d.trampoline = writer.emit(isa::encode_halfwords(isa::bx_reg(isa::REG_LR)));
    } else if (d.cls == DispatchClass::ReturnPop) {
      d.trampoline = writer.emit(isa::encode_halfwords(isa::pop(d.reglist, true)));
    }
  }
  return writer.bytes_used();
}

InstrumentResult instrument_image(const FirmwareImage& input) {
  const Manifest& m = input.manifest;
  m.validate();
  if (m.instrumented()) {
    throw RewriteError("image is already instrumented (table entries present)");
  }
  // Scan.
  std::vector<Site> sites;
  size_t total = 0, svc_count = 0;
  for (const auto& range : m.main) {
    scan_range(input, range, sites, total, svc_count);
  }
  if (total > 0 && svc_count * 5 > total) {
    throw RewriteError("image is already instrumented (svc density heuristic)");
  }

  InstrumentResult result;
  result.image = input;
  FirmwareImage& img = result.image;

  // Locate the reserved regions: trampolines go into a reserve inside an
  // executable region, tables into a reserve inside a non-executable one.
  const NamedRange* tramp_reserve = nullptr;
  const NamedRange* table_reserve = nullptr;
  for (const auto& res : m.reserves) {
    const image::Region* r = m.region_at(res.base);
    if (r->perms & image::PERM_X) {
      if (!tramp_reserve) tramp_reserve = &res;
    } else if (!table_reserve) {
      table_reserve = &res;
    }
  }
  bool needs_space = !sites.empty() || (m.vectors && m.vectors->count > 2);
  if (needs_space && (!tramp_reserve || !table_reserve)) {
    throw RewriteError(
        "manifest must reserve one executable and one data region for "
        "trampolines and tables");
  }

  // Descriptor allocation. The direct-call form shares one comment (the
  // stacked pc disambiguates the site); each indirect-call register and
  // each effective-return form gets its own.
  CommentAllocator comments;
  DispatchDescriptorTable& descriptors = result.descriptors;
  std::map<uint8_t, uint8_t> indirect_comment;   // register -> comment
  std::map<uint8_t, uint8_t> pop_comment;        // reglist -> comment
  uint8_t direct_comment = 0, bxlr_comment = 0;
  auto descriptor_for = [&](const Site& s) -> uint8_t {
    switch (s.cls) {
      case BranchClass::DirectCall:
        if (direct_comment == 0) {
          direct_comment = comments.allocate();
          descriptors.push_back(
              {direct_comment, DispatchClass::DirectCall, 0, 0, 0, 0});
        }
        return direct_comment;
      case BranchClass::IndirectCall: {
        uint8_t reg = s.instr.rm;
        auto it = indirect_comment.find(reg);
        if (it == indirect_comment.end()) {
          uint8_t c = comments.allocate();
          indirect_comment[reg] = c;
          descriptors.push_back(
              {c, DispatchClass::IndirectCall, reg, 0, 0, 0});
          return c;
        }
        return it->second;
      }
      case BranchClass::EffectiveReturnBxLr:
        if (bxlr_comment == 0) {
          bxlr_comment = comments.allocate();
          descriptors.push_back(
              {bxlr_comment, DispatchClass::ReturnBxLr, 0, 0, 0, 0});
        }
        return bxlr_comment;
      case BranchClass::EffectiveReturnPop: {
        uint8_t list = s.instr.reglist;
        auto it = pop_comment.find(list);
        if (it == pop_comment.end()) {
          uint8_t c = comments.allocate();
          pop_comment[list] = c;
          descriptors.push_back({c, DispatchClass::ReturnPop, 0, list, 0, 0});
          return c;
        }
        return it->second;
      }
      default: throw RewriteError("non-branch site recorded");
    }
  };

  // Rewrite the sites in place.
  BranchTable& btbl = result.branch_table;
  for (const Site& s : sites) {
    uint8_t comment = descriptor_for(s);
    uint16_t svc_hw = isa::encode_halfwords(isa::svc(comment))[0];
    img.write16(s.addr, svc_hw);
    if (s.cls == BranchClass::DirectCall) {
      uint32_t dest = s.addr + 4 + static_cast<uint32_t>(s.instr.imm);
      if (!m.in_main(dest)) {
        char msg[96];
        std::snprintf(msg, sizeof msg,
                      "direct call at 0x%08x targets 0x%08x outside the "
                      "main program",
                      s.addr, dest);
        throw RewriteError(msg);
      }
      btbl.push_back({s.addr, dest});
      img.write16(s.addr + 2, 0xB000);  // nop padding for the second halfword
      ++result.report.direct_call_sites;
    } else if (s.cls == BranchClass::IndirectCall) {
      ++result.report.indirect_call_sites;
    } else {
      ++result.report.return_sites;
    }
  }
  std::sort(btbl.begin(), btbl.end(),
            [](const BranchTableEntry& a, const BranchTableEntry& b) {
              return a.site < b.site;
            });

  result.call_targets = build_call_target_table(m);

  // Return trampolines.
  size_t tramp_bytes = 0;
  if (tramp_reserve) {
    tramp_bytes = synthesize_trampolines(img, *tramp_reserve, descriptors);
  }

  // Exception vector rewrite: every entry except the initial stack
  // pointer, the reset vector and the supervisor-call vector (the
  // monitor lives there) is redirected to a trampoline that traps before
  // branching on to the original handler.
  if (m.vectors && tramp_reserve) {
    // Continue appending after the return trampolines.
    TrampolineWriter writer(img, *tramp_reserve, tramp_bytes);
    for (uint32_t i = 2; i < m.vectors->count; ++i) {
      if (i == sim::EXC_SVC) continue;
      uint32_t vec_addr = m.vectors->addr + 4 * i;
      uint32_t orig = img.read32(vec_addr);
      if (orig == 0) continue;
      uint32_t handler = orig & ~1u;
      const image::Region* r = m.region_at(handler);
      if (!r || !(r->perms & image::PERM_X)) {
        char msg[80];
        std::snprintf(msg, sizeof msg,
                      "vector entry %u is not a valid code address", i);
        throw RewriteError(msg);
      }
      uint8_t c = comments.allocate();
      // svc first, then a fixed branch to the original handler when the
      // offset is encodable (the monitor redirects to the handler in
      // either case; the branch keeps the trampoline self-contained).
      std::vector<uint16_t> body = isa::encode_halfwords(isa::svc(c));
      uint32_t branch_addr = 0;
      {
        // Placeholder; patched after the trampoline address is known.
        body.push_back(0);
      }
      uint32_t tramp = writer.emit(body);
      branch_addr = tramp + 2;
      int64_t off = static_cast<int64_t>(handler) -
                    (static_cast<int64_t>(branch_addr) + 4);
      uint16_t second;
      if (off >= -2048 && off <= 2046 && (off % 2) == 0) {
        second = isa::encode_halfwords(isa::b(static_cast<int32_t>(off)))[0];
      } else {
        second = isa::encode_halfwords(isa::halt())[0];
      }
      img.write16(branch_addr, second);
      descriptors.push_back(
          {c, DispatchClass::ExceptionEntry, 0, 0, tramp, handler});
      img.write32(vec_addr, tramp | (orig & 1));
      ++result.report.vectors_rewritten;
    }
    tramp_bytes = writer.bytes_used();
  }

  // Serialize the tables into the data reserve: branch table, call
  // target table, then dispatch descriptors, all little-endian.
  Manifest& out_manifest = img.manifest;
  if (table_reserve) {
    std::vector<uint8_t> blob;
    size_t btbl_off = blob.size();
    for (const auto& e : btbl) {
      put_u32(blob, e.site);
      put_u32(blob, e.dest);
    }
    size_t btbl_size = blob.size() - btbl_off;
    size_t ct_off = blob.size();
    for (uint32_t a : result.call_targets) put_u32(blob, a);
    size_t ct_size = blob.size() - ct_off;
    size_t disp_off = blob.size();
    for (const auto& d : descriptors) {
      put_u32(blob, d.comment);
      put_u32(blob, static_cast<uint32_t>(d.cls));
      uint32_t operand = 0;
      switch (d.cls) {
        case DispatchClass::IndirectCall: operand = d.reg; break;
        case DispatchClass::ReturnPop: operand = d.reglist; break;
        case DispatchClass::ExceptionEntry: operand = d.handler; break;
        default: break;
      }
      put_u32(blob, operand);
      put_u32(blob, d.trampoline);
    }
    size_t disp_size = blob.size() - disp_off;
    if (blob.size() > table_reserve->size) {
      throw RewriteError("table reserve region exhausted");
    }
    for (size_t i = 0; i < blob.size(); ++i) {
      uint8_t* p = img.byte_at(table_reserve->base + static_cast<uint32_t>(i));
      if (!p) throw RewriteError("table reserve not backed by image bytes");
      *p = blob[i];
    }
    uint32_t base = table_reserve->base;
    out_manifest.tables.push_back(
        {"btbl", base + static_cast<uint32_t>(btbl_off),
         static_cast<uint32_t>(btbl_size)});
    out_manifest.tables.push_back(
        {"cttbl", base + static_cast<uint32_t>(ct_off),
         static_cast<uint32_t>(ct_size)});
    out_manifest.tables.push_back(
        {"dispatch", base + static_cast<uint32_t>(disp_off),
         static_cast<uint32_t>(disp_size)});
    result.report.branch_table_bytes = btbl_size;
    result.report.call_target_table_bytes = ct_size;
    result.report.dispatch_table_bytes = disp_size;
  }
  if (tramp_reserve && tramp_bytes > 0) {
    out_manifest.tables.push_back({"trampolines", tramp_reserve->base,
                                   static_cast<uint32_t>(tramp_bytes)});
  }

  result.report.total_instructions = total;
  result.report.rewritten_sites = sites.size();
  result.report.trampoline_bytes = tramp_bytes;
  return result;
}

namespace {

uint32_t mem_read32(const sim::MemoryMap& mem, uint32_t addr) {
  return mem.raw_read32(addr);
}

}  // namespace

BranchTable read_branch_table(const sim::MemoryMap& mem,
                              const NamedRange& range) {
  BranchTable table;
  for (uint32_t off = 0; off + 8 <= range.size; off += 8) {
    table.push_back({mem_read32(mem, range.base + off),
                     mem_read32(mem, range.base + off + 4)});
  }
  return table;
}

CallTargetTable read_call_target_table(const sim::MemoryMap& mem,
                                       const NamedRange& range) {
  CallTargetTable table;
  for (uint32_t off = 0; off + 4 <= range.size; off += 4) {
    table.push_back(mem_read32(mem, range.base + off));
  }
  return table;
}

DispatchDescriptorTable read_dispatch_table(const sim::MemoryMap& mem,
                                            const NamedRange& range) {
  DispatchDescriptorTable table;
  for (uint32_t off = 0; off + 16 <= range.size; off += 16) {
    DispatchDescriptor d;
    d.comment = static_cast<uint8_t>(mem_read32(mem, range.base + off));
    d.cls = static_cast<DispatchClass>(mem_read32(mem, range.base + off + 4));
    uint32_t operand = mem_read32(mem, range.base + off + 8);
    d.trampoline = mem_read32(mem, range.base + off + 12);
    switch (d.cls) {
      case DispatchClass::IndirectCall: d.reg = static_cast<uint8_t>(operand); break;
      case DispatchClass::ReturnPop: d.reglist = static_cast<uint8_t>(operand); break;
      case DispatchClass::ExceptionEntry: d.handler = operand; break;
      default: break;
    }
    table.push_back(d);
  }
  return table;
}

}  // namespace cfikit::rewrite
