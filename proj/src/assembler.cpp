#include "cfikit/assembler.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <vector>

#include "cfikit/isa.hpp"

namespace cfikit::assembler {

namespace {

using image::FirmwareImage;
using image::Manifest;
using image::Section;

struct Chunk {
  uint32_t base = 0;
  std::vector<uint8_t> bytes;
  uint32_t end() const { return base + static_cast<uint32_t>(bytes.size()); }
};

// Deferred until labels are known.
struct PendingInstr {
  uint32_t addr = 0;
  int line = 0;
  std::string mnemonic;
  std::string operands;
};

struct PendingWord {
  uint32_t addr = 0;
  int line = 0;
  std::string token;
};

struct PendingRange {
  enum class Kind { Bootstrap, Main, Pool } kind;
  int line = 0;
  std::string start, end;
};

[[noreturn]] void fail(int line, const std::string& msg) {
  throw AsmError("line " + std::to_string(line) + ": " + msg);
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(c));
  return s;
}

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string t;
  while (in >> t) out.push_back(t);
  return out;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  cur = trim(cur);
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::optional<uint32_t> parse_number(const std::string& tok) {
  std::string t = tok;
  if (!t.empty() && t[0] == '#') t = t.substr(1);
  if (t.empty()) return std::nullopt;
  try {
    size_t pos = 0;
    unsigned long v = std::stoul(t, &pos, 0);
    if (pos != t.size() || v > 0xFFFFFFFFul) return std::nullopt;
    return static_cast<uint32_t>(v);
  } catch (...) {
    return std::nullopt;
  }
}

std::optional<uint8_t> parse_reg(const std::string& tok) {
  std::string t = lower(trim(tok));
  if (t == "sp") return isa::REG_SP;
  if (t == "lr") return isa::REG_LR;
  if (t == "pc") return isa::REG_PC;
  if (t.size() >= 2 && t[0] == 'r') {
    auto n = parse_number(t.substr(1));
    if (n && *n <= 12) return static_cast<uint8_t>(*n);
  }
  return std::nullopt;
}

bool valid_label(const std::string& s) {
  if (s.empty()) return false;
  for (size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '_' ||
              (c == '.' && i == 0);
    if (!ok) return false;
  }
  return !std::isdigit(static_cast<unsigned char>(s[0]));
}

class Assembler {
 public:
  FirmwareImage run(const std::string& source) {
    std::istringstream in(source);
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
      ++line;
      parse_line(raw, line);
    }
    return finalize();
  }

 private:
  Manifest manifest_;
  std::vector<Chunk> chunks_;
  std::map<std::string, uint32_t> labels_;
  std::vector<PendingInstr> instrs_;
  std::vector<PendingWord> words_;
  std::vector<PendingRange> ranges_;
  std::string entry_token_;
  int entry_line_ = 0;
  std::optional<uint32_t> addr_;
  bool emitting_ = false;  // current chunk open

  uint32_t here(int line) const {
    if (!addr_) fail(line, "code before .org");
    return *addr_;
  }

  void emit(int line, const std::vector<uint8_t>& bytes) {
    uint32_t a = here(line);
    if (!emitting_ || chunks_.empty() || chunks_.back().end() != a) {
      chunks_.push_back({a, {}});
      emitting_ = true;
    }
    auto& c = chunks_.back();
    c.bytes.insert(c.bytes.end(), bytes.begin(), bytes.end());
    addr_ = a + static_cast<uint32_t>(bytes.size());
  }

  void reserve_space(int line, uint32_t n) {
    emit(line, std::vector<uint8_t>(n, 0));
  }

  void parse_line(std::string text, int line) {
    size_t cut = text.find_first_of("@;");
    if (cut != std::string::npos) text = text.substr(0, cut);
    text = trim(text);
    while (!text.empty()) {
      size_t colon = text.find(':');
      if (colon == std::string::npos) break;
      std::string head = trim(text.substr(0, colon));
      if (!valid_label(head)) break;
      if (labels_.count(head)) fail(line, "duplicate label " + head);
      labels_[head] = here(line);
      text = trim(text.substr(colon + 1));
    }
    if (text.empty()) return;
    if (text[0] == '.') {
      // Mnemonics never start with '.', so a leading dot that is not a
      // known directive is a stray local label.
      directive(text, line);
      return;
    }
    size_t sp = text.find_first_of(" \t");
    std::string mnem = lower(sp == std::string::npos ? text : text.substr(0, sp));
    std::string ops = sp == std::string::npos ? "" : trim(text.substr(sp));
    uint32_t a = here(line);
    uint32_t size = mnem == "bl" ? 4 : 2;
    instrs_.push_back({a, line, mnem, ops});
    reserve_space(line, size);
  }

  void directive(const std::string& text, int line) {
    auto toks = split_ws(text);
    const std::string& d = toks[0];
    auto need = [&](size_t n) {
      if (toks.size() != n + 1)
        fail(line, d + " expects " + std::to_string(n) + " operands");
    };
    auto num = [&](const std::string& t) {
      auto v = parse_number(t);
      if (!v) fail(line, "bad number " + t);
      return *v;
    };
    if (d == ".org") {
      need(1);
      addr_ = num(toks[1]);
      emitting_ = false;
    } else if (d == ".word") {
      need(1);
      uint32_t a = here(line);
      if (a % 4) fail(line, ".word at unaligned address");
      words_.push_back({a, line, toks[1]});
      reserve_space(line, 4);
    } else if (d == ".region") {
      need(5);
      image::Region r;
      r.name = toks[1];
      r.base = num(toks[2]);
      r.size = num(toks[3]);
      for (char c : lower(toks[4])) {
        if (c == 'r') r.perms |= image::PERM_R;
        else if (c == 'w') r.perms |= image::PERM_W;
        else if (c == 'x') r.perms |= image::PERM_X;
        else if (c != '-') fail(line, "bad perms " + toks[4]);
      }
      std::string sec = lower(toks[5]);
      if (sec == "ns") r.security = image::RegionSecurity::NonSecure;
      else if (sec == "s") r.security = image::RegionSecurity::Secure;
      else if (sec == "nsc") r.security = image::RegionSecurity::NSC;
      else fail(line, "bad security " + toks[5]);
      manifest_.regions.push_back(r);
    } else if (d == ".entry") {
      need(1);
      entry_token_ = toks[1];
      entry_line_ = line;
    } else if (d == ".vectors") {
      need(2);
      manifest_.vectors = image::VectorTable{num(toks[1]), num(toks[2])};
    } else if (d == ".bootstrap" || d == ".main" || d == ".pool") {
      need(2);
      PendingRange::Kind k = d == ".bootstrap" ? PendingRange::Kind::Bootstrap
                             : d == ".main"    ? PendingRange::Kind::Main
                                               : PendingRange::Kind::Pool;
      ranges_.push_back({k, line, toks[1], toks[2]});
    } else if (d == ".reserve") {
      need(3);
      manifest_.reserves.push_back({toks[1], num(toks[2]), num(toks[3])});
    } else {
      fail(line, "unknown directive " + d);
    }
  }

  uint32_t resolve(const std::string& tok, int line) const {
    auto it = labels_.find(tok);
    if (it != labels_.end()) return it->second;
    auto v = parse_number(tok);
    if (!v) fail(line, "unresolved symbol " + tok);
    return *v;
  }

  isa::Instruction encode_one(const PendingInstr& pi) const {
    const auto& m = pi.mnemonic;
    int line = pi.line;
    auto ops = split_commas(pi.operands);
    auto reg_at = [&](size_t i) {
      if (i >= ops.size()) fail(line, m + ": missing register operand");
      auto r = parse_reg(ops[i]);
      if (!r) fail(line, m + ": bad register " + ops[i]);
      return *r;
    };
    auto imm_at = [&](size_t i) -> uint8_t {
      if (i >= ops.size()) fail(line, m + ": missing immediate");
      auto v = parse_number(ops[i]);
      if (!v) fail(line, m + ": bad immediate " + ops[i]);
      if (*v > 255) fail(line, m + ": immediate out of range 0-255");
      return static_cast<uint8_t>(*v);
    };
    auto branch_off = [&](size_t i) {
      if (i >= ops.size()) fail(line, m + ": missing target");
      uint32_t dest = resolve(ops[i], line);
      return static_cast<int32_t>(dest) - static_cast<int32_t>(pi.addr + 4);
    };
    auto reglist = [&](bool& special, const char* special_name) {
      special = false;
      std::string body = trim(pi.operands);
      if (body.size() < 2 || body.front() != '{' || body.back() != '}')
        fail(line, m + ": expected {reglist}");
      uint8_t bits = 0;
      for (auto& t : split_commas(body.substr(1, body.size() - 2))) {
        auto r = parse_reg(t);
        if (!r) fail(line, m + ": bad register " + t);
        if ((*r == isa::REG_LR && std::string(special_name) == "lr") ||
            (*r == isa::REG_PC && std::string(special_name) == "pc")) {
          special = true;
        } else if (*r <= 7) {
          bits |= static_cast<uint8_t>(1u << *r);
        } else {
          fail(line, m + ": register " + t + " not allowed in list");
        }
      }
      return bits;
    };
    auto mem_operand = [&](uint8_t& rn, uint8_t& off) {
      // forms: rt, [rn]   or   rt, [rn, #imm]
      size_t lb = pi.operands.find('[');
      size_t rb = pi.operands.find(']');
      if (lb == std::string::npos || rb == std::string::npos || rb < lb)
        fail(line, m + ": expected [base, #offset]");
      auto inner = split_commas(pi.operands.substr(lb + 1, rb - lb - 1));
      if (inner.empty() || inner.size() > 2)
        fail(line, m + ": expected [base, #offset]");
      auto r = parse_reg(inner[0]);
      if (!r || *r > 7) fail(line, m + ": bad base register");
      rn = *r;
      uint32_t v = 0;
      if (inner.size() == 2) {
        auto n = parse_number(inner[1]);
        if (!n) fail(line, m + ": bad offset " + inner[1]);
        v = *n;
      }
      if (v > 124 || v % 4) fail(line, m + ": offset out of range");
      off = static_cast<uint8_t>(v);
    };

    try {
      if (m == "mov") return isa::mov_imm(reg_at(0), static_cast<uint8_t>(imm_at(1)));
      if (m == "add") return isa::add_imm(reg_at(0), static_cast<uint8_t>(imm_at(1)));
      if (m == "sub") return isa::sub_imm(reg_at(0), static_cast<uint8_t>(imm_at(1)));
      if (m == "cmp") return isa::cmp_imm(reg_at(0), static_cast<uint8_t>(imm_at(1)));
      if (m == "ldr" || m == "str") {
        uint8_t rt = reg_at(0);
        if (rt > 7) fail(line, m + ": transfer register must be r0-r7");
        uint8_t rn = 0, off = 0;
        mem_operand(rn, off);
        return m == "ldr" ? isa::ldr_imm(rt, rn, off) : isa::str_imm(rt, rn, off);
      }
      if (m == "push") {
        bool lr = false;
        uint8_t bits = reglist(lr, "lr");
        return isa::push(bits, lr);
      }
      if (m == "pop") {
        bool pc = false;
        uint8_t bits = reglist(pc, "pc");
        return isa::pop(bits, pc);
      }
      if (m == "b") return isa::b(branch_off(0));
      if (m == "beq") return isa::b_cond(isa::COND_EQ, branch_off(0));
      if (m == "bne") return isa::b_cond(isa::COND_NE, branch_off(0));
      if (m == "bmi") return isa::b_cond(isa::COND_MI, branch_off(0));
      if (m == "bpl") return isa::b_cond(isa::COND_PL, branch_off(0));
      if (m == "bl") return isa::bl_imm(branch_off(0));
      if (m == "blx") return isa::blx_reg(reg_at(0));
      if (m == "bx") return isa::bx_reg(reg_at(0));
      if (m == "bxns") return isa::bxns(reg_at(0));
      if (m == "svc") return isa::svc(static_cast<uint8_t>(imm_at(0)));
      if (m == "nop") return isa::nop();
      if (m == "sg") return isa::sg();
      if (m == "halt") return isa::halt();
    } catch (const isa::EncodeError& e) {
      fail(line, m + ": " + e.what());
    }
    fail(line, "unknown mnemonic " + m);
  }

  FirmwareImage finalize() {
    FirmwareImage img;
    std::sort(chunks_.begin(), chunks_.end(),
              [](const Chunk& a, const Chunk& b) { return a.base < b.base; });
    for (size_t i = 0; i + 1 < chunks_.size(); ++i) {
      if (chunks_[i].end() > chunks_[i + 1].base)
        throw AsmError("overlapping emission at 0x" +
                       std::to_string(chunks_[i + 1].base));
    }
    for (auto& c : chunks_) {
      if (!img.sections.empty() &&
          img.sections.back().base + img.sections.back().bytes.size() == c.base) {
        auto& s = img.sections.back();
        s.bytes.insert(s.bytes.end(), c.bytes.begin(), c.bytes.end());
      } else {
        img.sections.push_back({c.base, std::move(c.bytes)});
      }
    }

    // Reserves are written by later pipeline stages, so back them with
    // zero-filled storage unless code already covers them.
    for (const auto& r : manifest_.reserves) {
      bool covered = false;
      for (const auto& s : img.sections) {
        if (r.base >= s.base &&
            r.base + r.size <= s.base + s.bytes.size()) {
          covered = true;
          break;
        }
      }
      if (!covered) img.sections.push_back({r.base, std::vector<uint8_t>(r.size, 0)});
    }

    for (const auto& pi : instrs_) {
      std::vector<uint8_t> enc;
      try {
        enc = isa::encode(encode_one(pi));
      } catch (const isa::EncodeError& e) {
        fail(pi.line, pi.mnemonic + ": " + e.what());
      }
      for (size_t i = 0; i < enc.size(); ++i) *img_byte(img, pi.addr + static_cast<uint32_t>(i), pi.line) = enc[i];
    }
    for (const auto& w : words_) {
      uint32_t v = resolve(w.token, w.line);
      for (int i = 0; i < 4; ++i)
        *img_byte(img, w.addr + i, w.line) = static_cast<uint8_t>(v >> (8 * i));
    }

    for (const auto& r : ranges_) {
      uint32_t a = resolve(r.start, r.line);
      uint32_t b = resolve(r.end, r.line);
      if (b <= a) fail(r.line, "empty range");
      image::AddressRange range{a, b - a};
      switch (r.kind) {
        case PendingRange::Kind::Bootstrap: manifest_.bootstrap.push_back(range); break;
        case PendingRange::Kind::Main: manifest_.main.push_back(range); break;
        case PendingRange::Kind::Pool: manifest_.pools.push_back(range); break;
      }
    }

    if (!entry_token_.empty())
      manifest_.entry = resolve(entry_token_, entry_line_) | 1u;

    for (const auto& [name, addr] : labels_) {
      if (name[0] == '.') continue;
      const auto* reg = region_of(addr);
      if (reg && (reg->perms & image::PERM_X))
        manifest_.symbols.push_back({name, addr});
    }
    std::sort(manifest_.symbols.begin(), manifest_.symbols.end(),
              [](const image::Symbol& a, const image::Symbol& b) {
                return a.addr < b.addr;
              });

    img.manifest = manifest_;
    img.manifest.validate();
    return img;
  }

  const image::Region* region_of(uint32_t addr) const {
    for (const auto& r : manifest_.regions)
      if (r.contains(addr)) return &r;
    return nullptr;
  }

  static uint8_t* img_byte(FirmwareImage& img, uint32_t addr, int line) {
    uint8_t* p = img.byte_at(addr);
    if (!p) fail(line, "emission outside any section");
    return p;
  }
};

}  // namespace

image::FirmwareImage assemble(const std::string& source) {
  return Assembler{}.run(source);
}

image::FirmwareImage assemble_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw AsmError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return assemble(buf.str());
}

}  // namespace cfikit::assembler
