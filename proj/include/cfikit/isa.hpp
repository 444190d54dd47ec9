#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfikit::isa {

// Register indices follow the ARM convention: r0-r12 general purpose,
// sp=13, lr=14, pc=15.
inline constexpr uint8_t REG_SP = 13;
inline constexpr uint8_t REG_LR = 14;
inline constexpr uint8_t REG_PC = 15;

enum class Kind : uint8_t {
  MovImm,
  AddImm,
  SubImm,
  CmpImm,
  LdrImm,
  StrImm,
  Push,
  Pop,
  BCond,
  B,
  BlImm,
  BlxReg,
  BxReg,
  Svc,
  Nop,
  Bxns,
  Sg,
  Halt,
  Undefined,
};

// Condition codes for BCond. Only eq/ne/mi/pl are executable by the
// simulator (the flag model carries N and Z only); the remaining codes
// up to 13 are encodable so round-trip tests cover the full field.
enum Cond : uint8_t {
  COND_EQ = 0x0,
  COND_NE = 0x1,
  COND_MI = 0x4,
  COND_PL = 0x5,
};

struct Instruction {
  Kind kind = Kind::Undefined;
  uint8_t rd = 0;        // destination / transfer register
  uint8_t rn = 0;        // base register (ldr/str)
  uint8_t rm = 0;        // register operand (bx/blx/bxns)
  int32_t imm = 0;       // immediate or branch byte offset
  uint8_t reglist = 0;   // r0-r7 bits for push/pop
  bool pclr = false;     // push: lr included; pop: pc included
  uint8_t cond = 0;      // BCond condition
  uint16_t raw = 0;      // original halfword for Undefined

  int width() const { return kind == Kind::BlImm ? 4 : 2; }
  bool operator==(const Instruction&) const = default;
};

enum class BranchClass : uint8_t {
  DirectCall,
  IndirectCall,
  EffectiveReturnBxLr,
  EffectiveReturnPop,
  DirectJump,
  NotABranch,
};

struct DecodeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EncodeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Decodes the instruction starting at `offset` (2-byte aligned, in range).
// Unknown encodings come back as Kind::Undefined with `raw` holding the
// halfword; a 32-bit prefix truncated by the end of the buffer throws.
Instruction decode(std::span<const uint8_t> bytes, size_t offset);

// Little-endian halfword(s). Throws EncodeError on out-of-range operands.
std::vector<uint8_t> encode(const Instruction& instr);

// Convenience for tests and the assembler: encoded form as halfwords.
std::vector<uint16_t> encode_halfwords(const Instruction& instr);

BranchClass classify(const Instruction& instr);

std::string disassemble(const Instruction& instr);

// Factory helpers keep operand packing in one place.
Instruction mov_imm(uint8_t rd, uint8_t imm);
Instruction add_imm(uint8_t rd, uint8_t imm);
Instruction sub_imm(uint8_t rd, uint8_t imm);
Instruction cmp_imm(uint8_t rd, uint8_t imm);
Instruction ldr_imm(uint8_t rt, uint8_t rn, uint8_t byte_off);
Instruction str_imm(uint8_t rt, uint8_t rn, uint8_t byte_off);
Instruction push(uint8_t reglist, bool lr);
Instruction pop(uint8_t reglist, bool pc);
Instruction b_cond(uint8_t cond, int32_t byte_off);
Instruction b(int32_t byte_off);
Instruction bl_imm(int32_t byte_off);
Instruction blx_reg(uint8_t rm);
Instruction bx_reg(uint8_t rm);
Instruction svc(uint8_t comment);
Instruction nop();
Instruction bxns(uint8_t rm);
Instruction sg();
Instruction halt();

}  // namespace cfikit::isa
