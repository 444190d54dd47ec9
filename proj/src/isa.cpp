#include "cfikit/isa.hpp"

#include <cstdio>

namespace cfikit::isa {

namespace {

int32_t sign_extend(uint32_t value, unsigned bits) {
  uint32_t mask = 1u << (bits - 1);
  return static_cast<int32_t>((value ^ mask) - mask);
}

uint16_t read_halfword(std::span<const uint8_t> bytes, size_t offset) {
  return static_cast<uint16_t>(bytes[offset] | (bytes[offset + 1] << 8));
}

Instruction undefined(uint16_t raw) {
  Instruction i;
  i.kind = Kind::Undefined;
  i.raw = raw;
  return i;
}

}  // namespace

Instruction decode(std::span<const uint8_t> bytes, size_t offset) {
  if (offset % 2 != 0 || offset + 2 > bytes.size()) {
    throw DecodeError("decode offset out of range or misaligned");
  }
  uint16_t hw = read_halfword(bytes, offset);

  switch (hw >> 11) {
    case 0b00100: return mov_imm((hw >> 8) & 7, hw & 0xFF);
    case 0b00101: return cmp_imm((hw >> 8) & 7, hw & 0xFF);
    case 0b00110: return add_imm((hw >> 8) & 7, hw & 0xFF);
    case 0b00111: return sub_imm((hw >> 8) & 7, hw & 0xFF);
    case 0b01100:
      return str_imm(hw & 7, (hw >> 3) & 7,
                     static_cast<uint8_t>(((hw >> 6) & 0x1F) * 4));
    case 0b01101:
      return ldr_imm(hw & 7, (hw >> 3) & 7,
                     static_cast<uint8_t>(((hw >> 6) & 0x1F) * 4));
    case 0b11100: return b(sign_extend(hw & 0x7FF, 11) * 2);
    default: break;
  }

  if ((hw & 0xFF80) == 0x4700 || (hw & 0xFF80) == 0x4780) {
    uint8_t rm = (hw >> 3) & 0xF;
    uint8_t low = hw & 7;
    bool link = (hw & 0x0080) != 0;
    if (!link && low == 0) return bx_reg(rm);
    if (!link && low == 4) return bxns(rm);
    if (link && low == 0) return blx_reg(rm);
    return undefined(hw);
  }

  if (hw == 0xB000) return nop();
  if (hw == 0xBEAB) return halt();
  if (hw == 0xE97F) return sg();

  if ((hw & 0xFE00) == 0xB400) return push(hw & 0xFF, (hw & 0x0100) != 0);
  if ((hw & 0xFE00) == 0xBC00) return pop(hw & 0xFF, (hw & 0x0100) != 0);

  if ((hw & 0xFF00) == 0xDF00) return svc(hw & 0xFF);
  if ((hw & 0xF000) == 0xD000) {
    uint8_t cond = (hw >> 8) & 0xF;
    if (cond <= 13) return b_cond(cond, sign_extend(hw & 0xFF, 8) * 2);
    return undefined(hw);
  }

  if ((hw & 0xF800) == 0xF000) {
    // 32-bit bl prefix; requires the suffix halfword.
    if (offset + 4 > bytes.size()) {
      throw DecodeError("truncated 32-bit instruction at end of region");
    }
    uint16_t lo = read_halfword(bytes, offset + 2);
    if ((lo & 0xF800) != 0xF800) return undefined(hw);
    uint32_t h = ((hw & 0x7FFu) << 11) | (lo & 0x7FFu);
    return bl_imm(sign_extend(h, 22) * 2);
  }
  if ((hw & 0xF800) == 0xF800) {
    // A bl suffix halfword decoded on its own. Classic dual-halfword bl
    // leaves this pattern executable at a 2-byte offset into the pair;
    // it decodes as a branch, the unintended-instruction hazard of
    // variable-width Thumb code.
    return b(sign_extend(hw & 0x7FF, 11) * 2);
  }

  return undefined(hw);
}

std::vector<uint16_t> encode_halfwords(const Instruction& instr) {
  auto imm8 = [&](const char* what) -> uint16_t {
    if (instr.imm < 0 || instr.imm > 0xFF) {
      throw EncodeError(std::string(what) + ": immediate out of range 0-255");
    }
    return static_cast<uint16_t>(instr.imm);
  };
  auto low_reg = [&](uint8_t r, const char* what) -> uint16_t {
    if (r > 7) throw EncodeError(std::string(what) + ": register must be r0-r7");
    return r;
  };
  auto any_reg = [&](uint8_t r, const char* what) -> uint16_t {
    if (r > 15) throw EncodeError(std::string(what) + ": bad register index");
    return r;
  };

  switch (instr.kind) {
    case Kind::MovImm:
      return {static_cast<uint16_t>(0x2000 | (low_reg(instr.rd, "mov") << 8) |
                                    imm8("mov"))};
    case Kind::CmpImm:
      return {static_cast<uint16_t>(0x2800 | (low_reg(instr.rd, "cmp") << 8) |
                                    imm8("cmp"))};
    case Kind::AddImm:
      return {static_cast<uint16_t>(0x3000 | (low_reg(instr.rd, "add") << 8) |
                                    imm8("add"))};
    case Kind::SubImm:
      return {static_cast<uint16_t>(0x3800 | (low_reg(instr.rd, "sub") << 8) |
                                    imm8("sub"))};
    case Kind::StrImm:
    case Kind::LdrImm: {
      const char* what = instr.kind == Kind::StrImm ? "str" : "ldr";
      if (instr.imm < 0 || instr.imm > 124 || instr.imm % 4 != 0) {
        throw EncodeError(std::string(what) +
                          ": offset must be a multiple of 4 in 0-124");
      }
      uint16_t base = instr.kind == Kind::StrImm ? 0x6000 : 0x6800;
      return {static_cast<uint16_t>(base | ((instr.imm / 4) << 6) |
                                    (low_reg(instr.rn, what) << 3) |
                                    low_reg(instr.rd, what))};
    }
    case Kind::Push:
      return {static_cast<uint16_t>(0xB400 | (instr.pclr ? 0x0100 : 0) |
                                    instr.reglist)};
    case Kind::Pop:
      return {static_cast<uint16_t>(0xBC00 | (instr.pclr ? 0x0100 : 0) |
                                    instr.reglist)};
    case Kind::B: {
      if (instr.imm % 2 != 0) throw EncodeError("b: offset must be even");
      int32_t h = instr.imm / 2;
      if (h < -1024 || h > 1023) throw EncodeError("b: offset out of range");
      return {static_cast<uint16_t>(0xE000 | (h & 0x7FF))};
    }
    case Kind::BCond: {
      if (instr.cond > 13) throw EncodeError("bcond: condition out of range");
      if (instr.imm % 2 != 0) throw EncodeError("bcond: offset must be even");
      int32_t h = instr.imm / 2;
      if (h < -128 || h > 127) throw EncodeError("bcond: offset out of range");
      return {static_cast<uint16_t>(0xD000 | (instr.cond << 8) | (h & 0xFF))};
    }
    case Kind::BlImm: {
      if (instr.imm % 2 != 0) throw EncodeError("bl: offset must be even");
      int32_t h = instr.imm / 2;
      if (h < -(1 << 21) || h >= (1 << 21)) {
        throw EncodeError("bl: offset out of range (+-4MB)");
      }
      return {static_cast<uint16_t>(0xF000 | ((h >> 11) & 0x7FF)),
              static_cast<uint16_t>(0xF800 | (h & 0x7FF))};
    }
    case Kind::BxReg:
      return {static_cast<uint16_t>(0x4700 | (any_reg(instr.rm, "bx") << 3))};
    case Kind::Bxns:
      return {static_cast<uint16_t>(0x4704 | (any_reg(instr.rm, "bxns") << 3))};
    case Kind::BlxReg:
      return {static_cast<uint16_t>(0x4780 | (any_reg(instr.rm, "blx") << 3))};
    case Kind::Svc:
      return {static_cast<uint16_t>(0xDF00 | imm8("svc"))};
    case Kind::Nop: return {0xB000};
    case Kind::Sg: return {0xE97F};
    case Kind::Halt: return {0xBEAB};
    case Kind::Undefined:
      throw EncodeError("cannot encode an undefined instruction");
  }
  throw EncodeError("unreachable instruction kind");
}

std::vector<uint8_t> encode(const Instruction& instr) {
  std::vector<uint8_t> out;
  for (uint16_t hw : encode_halfwords(instr)) {
    out.push_back(static_cast<uint8_t>(hw & 0xFF));
    out.push_back(static_cast<uint8_t>(hw >> 8));
  }
  return out;
}

BranchClass classify(const Instruction& instr) {
  switch (instr.kind) {
    case Kind::BlImm: return BranchClass::DirectCall;
    case Kind::BlxReg: return BranchClass::IndirectCall;
    case Kind::BxReg:
      return instr.rm == REG_LR ? BranchClass::EffectiveReturnBxLr
                                : BranchClass::IndirectCall;
    case Kind::Pop:
      return instr.pclr ? BranchClass::EffectiveReturnPop
                        : BranchClass::NotABranch;
    case Kind::B:
    case Kind::BCond: return BranchClass::DirectJump;
    default: return BranchClass::NotABranch;
  }
}

namespace {

std::string reglist_str(uint8_t list, bool extra, const char* extra_name) {
  std::string out = "{";
  bool first = true;
  for (int r = 0; r < 8; ++r) {
    if (list & (1 << r)) {
      if (!first) out += ", ";
      out += "r" + std::to_string(r);
      first = false;
    }
  }
  if (extra) {
    if (!first) out += ", ";
    out += extra_name;
  }
  return out + "}";
}

std::string reg_name(uint8_t r) {
  switch (r) {
    case REG_SP: return "sp";
    case REG_LR: return "lr";
    case REG_PC: return "pc";
    default: return "r" + std::to_string(r);
  }
}

const char* cond_name(uint8_t cond) {
  static const char* names[] = {"eq", "ne", "cs", "cc", "mi", "pl", "vs",
                                "vc", "hi", "ls", "ge", "lt", "gt", "le"};
  return cond <= 13 ? names[cond] : "??";
}

}  // namespace

std::string disassemble(const Instruction& i) {
  char buf[64];
  switch (i.kind) {
    case Kind::MovImm:
      std::snprintf(buf, sizeof buf, "mov r%u, #%d", i.rd, i.imm);
      return buf;
    case Kind::AddImm:
      std::snprintf(buf, sizeof buf, "add r%u, #%d", i.rd, i.imm);
      return buf;
    case Kind::SubImm:
      std::snprintf(buf, sizeof buf, "sub r%u, #%d", i.rd, i.imm);
      return buf;
    case Kind::CmpImm:
      std::snprintf(buf, sizeof buf, "cmp r%u, #%d", i.rd, i.imm);
      return buf;
    case Kind::LdrImm:
      std::snprintf(buf, sizeof buf, "ldr r%u, [r%u, #%d]", i.rd, i.rn, i.imm);
      return buf;
    case Kind::StrImm:
      std::snprintf(buf, sizeof buf, "str r%u, [r%u, #%d]", i.rd, i.rn, i.imm);
      return buf;
    case Kind::Push: return "push " + reglist_str(i.reglist, i.pclr, "lr");
    case Kind::Pop: return "pop " + reglist_str(i.reglist, i.pclr, "pc");
    case Kind::BCond:
      std::snprintf(buf, sizeof buf, "b%s %+d", cond_name(i.cond), i.imm);
      return buf;
    case Kind::B:
      std::snprintf(buf, sizeof buf, "b %+d", i.imm);
      return buf;
    case Kind::BlImm:
      std::snprintf(buf, sizeof buf, "bl %+d", i.imm);
      return buf;
    case Kind::BlxReg: return "blx " + reg_name(i.rm);
    case Kind::BxReg: return "bx " + reg_name(i.rm);
    case Kind::Bxns: return "bxns " + reg_name(i.rm);
    case Kind::Svc:
      std::snprintf(buf, sizeof buf, "svc #%d", i.imm);
      return buf;
    case Kind::Nop: return "nop";
    case Kind::Sg: return "sg";
    case Kind::Halt: return "halt";
    case Kind::Undefined:
      std::snprintf(buf, sizeof buf, "undef 0x%04X", i.raw);
      return buf;
  }
  return "??";
}

Instruction mov_imm(uint8_t rd, uint8_t imm) {
  Instruction i;
  i.kind = Kind::MovImm;
  i.rd = rd;
  i.imm = imm;
  return i;
}

Instruction add_imm(uint8_t rd, uint8_t imm) {
  Instruction i;
  i.kind = Kind::AddImm;
  i.rd = rd;
  i.imm = imm;
  return i;
}

Instruction sub_imm(uint8_t rd, uint8_t imm) {
  Instruction i;
  i.kind = Kind::SubImm;
  i.rd = rd;
  i.imm = imm;
  return i;
}

Instruction cmp_imm(uint8_t rd, uint8_t imm) {
  Instruction i;
  i.kind = Kind::CmpImm;
  i.rd = rd;
  i.imm = imm;
  return i;
}

Instruction ldr_imm(uint8_t rt, uint8_t rn, uint8_t byte_off) {
  Instruction i;
  i.kind = Kind::LdrImm;
  i.rd = rt;
  i.rn = rn;
  i.imm = byte_off;
  return i;
}

Instruction str_imm(uint8_t rt, uint8_t rn, uint8_t byte_off) {
  Instruction i;
  i.kind = Kind::StrImm;
  i.rd = rt;
  i.rn = rn;
  i.imm = byte_off;
  return i;
}

Instruction push(uint8_t reglist, bool lr) {
  Instruction i;
  i.kind = Kind::Push;
  i.reglist = reglist;
  i.pclr = lr;
  return i;
}

Instruction pop(uint8_t reglist, bool pc) {
  Instruction i;
  i.kind = Kind::Pop;
  i.reglist = reglist;
  i.pclr = pc;
  return i;
}

Instruction b_cond(uint8_t cond, int32_t byte_off) {
  Instruction i;
  i.kind = Kind::BCond;
  i.cond = cond;
  i.imm = byte_off;
  return i;
}

Instruction b(int32_t byte_off) {
  Instruction i;
  i.kind = Kind::B;
  i.imm = byte_off;
  return i;
}

Instruction bl_imm(int32_t byte_off) {
  Instruction i;
  i.kind = Kind::BlImm;
  i.imm = byte_off;
  return i;
}

Instruction blx_reg(uint8_t rm) {
  Instruction i;
  i.kind = Kind::BlxReg;
  i.rm = rm;
  return i;
}

Instruction bx_reg(uint8_t rm) {
  Instruction i;
  i.kind = Kind::BxReg;
  i.rm = rm;
  return i;
}

Instruction svc(uint8_t comment) {
  Instruction i;
  i.kind = Kind::Svc;
  i.imm = comment;
  return i;
}

Instruction nop() {
  Instruction i;
  i.kind = Kind::Nop;
  return i;
}

Instruction bxns(uint8_t rm) {
  Instruction i;
  i.kind = Kind::Bxns;
  i.rm = rm;
  return i;
}

Instruction sg() {
  Instruction i;
  i.kind = Kind::Sg;
  return i;
}

Instruction halt() {
  Instruction i;
  i.kind = Kind::Halt;
  return i;
}

}  // namespace cfikit::isa
