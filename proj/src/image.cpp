#include "cfikit/image.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace cfikit::image {

namespace {

uint32_t parse_hex(const std::string& tok, const std::string& ctx) {
  std::string t = tok;
  if (t.rfind("0x", 0) == 0 || t.rfind("0X", 0) == 0) t = t.substr(2);
  if (t.empty()) throw ManifestError(ctx + ": empty hex value");
  uint64_t v = 0;
  for (char c : t) {
    int d;
    if (c >= '0' && c <= '9') d = c - '0';
    else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
    else if (c >= 'A' && c <= 'F') d = c - 'A' + 10;
    else throw ManifestError(ctx + ": bad hex value '" + tok + "'");
    v = v * 16 + d;
    if (v > 0xFFFFFFFFull) throw ManifestError(ctx + ": value too large");
  }
  return static_cast<uint32_t>(v);
}

uint32_t parse_count(const std::string& tok, const std::string& ctx) {
  uint64_t v = 0;
  if (tok.empty()) throw ManifestError(ctx + ": empty count");
  for (char c : tok) {
    if (c < '0' || c > '9')
      throw ManifestError(ctx + ": bad count '" + tok + "'");
    v = v * 10 + (c - '0');
    if (v > 0xFFFFFFFFull) throw ManifestError(ctx + ": count too large");
  }
  return static_cast<uint32_t>(v);
}

uint8_t parse_perms(const std::string& tok, const std::string& ctx) {
  uint8_t p = 0;
  for (char c : tok) {
    switch (c) {
      case 'r': p |= PERM_R; break;
      case 'w': p |= PERM_W; break;
      case 'x': p |= PERM_X; break;
      case '-': break;
      default: throw ManifestError(ctx + ": bad perms '" + tok + "'");
    }
  }
  return p;
}

RegionSecurity parse_security(const std::string& tok, const std::string& ctx) {
  if (tok == "ns") return RegionSecurity::NonSecure;
  if (tok == "s") return RegionSecurity::Secure;
  if (tok == "nsc") return RegionSecurity::NSC;
  throw ManifestError(ctx + ": bad security '" + tok + "'");
}

std::string perms_str(uint8_t p) {
  std::string s;
  s += (p & PERM_R) ? 'r' : '-';
  s += (p & PERM_W) ? 'w' : '-';
  s += (p & PERM_X) ? 'x' : '-';
  return s;
}

const char* security_str(RegionSecurity s) {
  switch (s) {
    case RegionSecurity::NonSecure: return "ns";
    case RegionSecurity::Secure: return "s";
    case RegionSecurity::NSC: return "nsc";
  }
  return "?";
}

std::string hex(uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%x", v);
  return buf;
}

}  // namespace

const Region* Manifest::region_at(uint32_t addr) const {
  for (const auto& r : regions) {
    if (r.contains(addr)) return &r;
  }
  return nullptr;
}

const Region* Manifest::region_named(const std::string& name) const {
  for (const auto& r : regions) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

std::optional<uint32_t> Manifest::symbol_addr(const std::string& name) const {
  for (const auto& s : symbols) {
    if (s.name == name) return s.addr;
  }
  return std::nullopt;
}

const NamedRange* Manifest::table_named(const std::string& name) const {
  for (const auto& t : tables) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

bool Manifest::in_main(uint32_t addr) const {
  return std::any_of(main.begin(), main.end(),
                     [&](const AddressRange& r) { return r.contains(addr); });
}

bool Manifest::in_bootstrap(uint32_t addr) const {
  return std::any_of(bootstrap.begin(), bootstrap.end(),
                     [&](const AddressRange& r) { return r.contains(addr); });
}

bool Manifest::in_pool(uint32_t addr) const {
  return std::any_of(pools.begin(), pools.end(),
                     [&](const AddressRange& r) { return r.contains(addr); });
}

void Manifest::validate() const {
  for (size_t i = 0; i < regions.size(); ++i) {
    const Region& a = regions[i];
    if (a.size == 0) throw ManifestError("region " + a.name + " is empty");
    if (a.base + static_cast<uint64_t>(a.size) > 0x100000000ull) {
      throw ManifestError("region " + a.name + " wraps the address space");
    }
    if ((a.perms & PERM_W) && (a.perms & PERM_X)) {
      throw ManifestError("region " + a.name + " is both writable and executable");
    }
    for (size_t j = i + 1; j < regions.size(); ++j) {
      const Region& b = regions[j];
      if (a.base < b.end() && b.base < a.end()) {
        throw ManifestError("regions " + a.name + " and " + b.name + " overlap");
      }
    }
  }
  for (const auto& s : symbols) {
    const Region* r = region_at(s.addr & ~1u);
    if (!r || !(r->perms & PERM_X)) {
      throw ManifestError("symbol " + s.name + " outside executable regions");
    }
  }
  for (const auto& res : reserves) {
    const Region* r = region_at(res.base);
    if (!r || !r->contains(res.base, res.size)) {
      throw ManifestError("reserve " + res.name + " not inside a region");
    }
  }
  for (const auto& m : main) {
    for (const auto& b : bootstrap) {
      if (m.base < b.end() && b.base < m.end()) {
        throw ManifestError("main and bootstrap ranges overlap");
      }
    }
  }
}

Manifest Manifest::parse(std::istream& in) {
  Manifest m;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string kw;
    if (!(ls >> kw)) continue;
    std::string ctx = "manifest line " + std::to_string(lineno);
    auto next = [&]() -> std::string {
      std::string tok;
      if (!(ls >> tok)) throw ManifestError(ctx + ": missing operand");
      return tok;
    };
    if (kw == "region") {
      Region r;
      r.name = next();
      r.base = parse_hex(next(), ctx);
      r.size = parse_hex(next(), ctx);
      r.perms = parse_perms(next(), ctx);
      r.security = parse_security(next(), ctx);
      m.regions.push_back(r);
    } else if (kw == "entry") {
      m.entry = parse_hex(next(), ctx);
    } else if (kw == "sym") {
      Symbol s;
      s.name = next();
      s.addr = parse_hex(next(), ctx);
      m.symbols.push_back(s);
    } else if (kw == "vectors") {
      VectorTable v;
      v.addr = parse_hex(next(), ctx);
      v.count = parse_count(next(), ctx);
      m.vectors = v;
    } else if (kw == "bootstrap" || kw == "main" || kw == "pool") {
      AddressRange r;
      r.base = parse_hex(next(), ctx);
      r.size = parse_hex(next(), ctx);
      if (kw == "bootstrap") m.bootstrap.push_back(r);
      else if (kw == "main") m.main.push_back(r);
      else m.pools.push_back(r);
    } else if (kw == "reserve" || kw == "table") {
      NamedRange r;
      r.name = next();
      r.base = parse_hex(next(), ctx);
      r.size = parse_hex(next(), ctx);
      if (kw == "reserve") m.reserves.push_back(r);
      else m.tables.push_back(r);
    } else {
      throw ManifestError(ctx + ": unknown directive '" + kw + "'");
    }
  }
  return m;
}

Manifest Manifest::parse_string(const std::string& text) {
  std::istringstream in(text);
  return parse(in);
}

Manifest Manifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest " + path);
  return parse(in);
}

std::string Manifest::serialize() const {
  std::ostringstream out;
  for (const auto& r : regions) {
    out << "region " << r.name << ' ' << hex(r.base) << ' ' << hex(r.size)
        << ' ' << perms_str(r.perms) << ' ' << security_str(r.security) << '\n';
  }
  out << "entry " << hex(entry) << '\n';
  if (vectors) {
    out << "vectors " << hex(vectors->addr) << ' ' << vectors->count << '\n';
  }
  for (const auto& r : bootstrap) {
    out << "bootstrap " << hex(r.base) << ' ' << hex(r.size) << '\n';
  }
  for (const auto& r : main) {
    out << "main " << hex(r.base) << ' ' << hex(r.size) << '\n';
  }
  for (const auto& r : pools) {
    out << "pool " << hex(r.base) << ' ' << hex(r.size) << '\n';
  }
  for (const auto& r : reserves) {
    out << "reserve " << r.name << ' ' << hex(r.base) << ' ' << hex(r.size)
        << '\n';
  }
  for (const auto& s : symbols) {
    out << "sym " << s.name << ' ' << hex(s.addr) << '\n';
  }
  for (const auto& t : tables) {
    out << "table " << t.name << ' ' << hex(t.base) << ' ' << hex(t.size)
        << '\n';
  }
  return out.str();
}

void Manifest::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ManifestError("cannot write manifest " + path);
  out << serialize();
}

size_t FirmwareImage::total_bytes() const {
  size_t n = 0;
  for (const auto& s : sections) n += s.bytes.size();
  return n;
}

uint8_t* FirmwareImage::byte_at(uint32_t addr) {
  for (auto& s : sections) {
    if (addr >= s.base && addr - s.base < s.bytes.size()) {
      return &s.bytes[addr - s.base];
    }
  }
  return nullptr;
}

const uint8_t* FirmwareImage::byte_at(uint32_t addr) const {
  return const_cast<FirmwareImage*>(this)->byte_at(addr);
}

uint16_t FirmwareImage::read16(uint32_t addr) const {
  const uint8_t* p = byte_at(addr);
  const uint8_t* q = byte_at(addr + 1);
  if (!p || !q) throw ImageError("read16 outside image sections");
  return static_cast<uint16_t>(*p | (*q << 8));
}

uint32_t FirmwareImage::read32(uint32_t addr) const {
  return read16(addr) | (static_cast<uint32_t>(read16(addr + 2)) << 16);
}

void FirmwareImage::write16(uint32_t addr, uint16_t value) {
  uint8_t* p = byte_at(addr);
  uint8_t* q = byte_at(addr + 1);
  if (!p || !q) throw ImageError("write16 outside image sections");
  *p = static_cast<uint8_t>(value & 0xFF);
  *q = static_cast<uint8_t>(value >> 8);
}

void FirmwareImage::write32(uint32_t addr, uint32_t value) {
  write16(addr, static_cast<uint16_t>(value & 0xFFFF));
  write16(addr + 2, static_cast<uint16_t>(value >> 16));
}

namespace {

void put_u32(std::ostream& out, uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
               static_cast<char>((v >> 16) & 0xFF),
               static_cast<char>((v >> 24) & 0xFF)};
  out.write(b, 4);
}

uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw ImageError("truncated image file");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

std::vector<Section> FirmwareImage::load_sections(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "CFI1") {
    throw ImageError(path + ": not a firmware image (bad magic)");
  }
  uint32_t count = get_u32(in);
  std::vector<Section> sections;
  for (uint32_t i = 0; i < count; ++i) {
    Section s;
    s.base = get_u32(in);
    uint32_t size = get_u32(in);
    s.bytes.resize(size);
    in.read(reinterpret_cast<char*>(s.bytes.data()), size);
    if (!in) throw ImageError(path + ": truncated section");
    sections.push_back(std::move(s));
  }
  return sections;
}

void FirmwareImage::save_sections(const std::vector<Section>& sections,
                                  const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write image " + path);
  out.write("CFI1", 4);
  put_u32(out, static_cast<uint32_t>(sections.size()));
  for (const auto& s : sections) {
    put_u32(out, s.base);
    put_u32(out, static_cast<uint32_t>(s.bytes.size()));
    out.write(reinterpret_cast<const char*>(s.bytes.data()),
              static_cast<std::streamsize>(s.bytes.size()));
  }
}

}  // namespace cfikit::image
