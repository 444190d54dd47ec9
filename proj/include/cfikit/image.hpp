#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfikit::image {

enum class RegionSecurity : uint8_t { NonSecure, Secure, NSC };

inline constexpr uint8_t PERM_R = 1;
inline constexpr uint8_t PERM_W = 2;
inline constexpr uint8_t PERM_X = 4;

struct Region {
  std::string name;
  uint32_t base = 0;
  uint32_t size = 0;
  uint8_t perms = 0;
  RegionSecurity security = RegionSecurity::NonSecure;

  bool contains(uint32_t addr) const {
    return addr >= base && addr - base < size;
  }
  bool contains(uint32_t addr, uint32_t len) const {
    return len > 0 && contains(addr) && addr - base + len <= size;
  }
  uint32_t end() const { return base + size; }
};

struct Symbol {
  std::string name;
  uint32_t addr = 0;
};

struct AddressRange {
  uint32_t base = 0;
  uint32_t size = 0;
  bool contains(uint32_t addr) const {
    return addr >= base && addr - base < size;
  }
  uint32_t end() const { return base + size; }
};

struct NamedRange {
  std::string name;
  uint32_t base = 0;
  uint32_t size = 0;
};

struct VectorTable {
  uint32_t addr = 0;
  uint32_t count = 0;
};

struct ManifestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Line-based firmware manifest. One directive per line:
//   region <name> <hex-base> <hex-size> <perms:rwx> <sec:ns|s|nsc>
//   entry <hex>
//   sym <name> <hex>
//   vectors <hex> <count>
//   bootstrap <hex-base> <hex-size>
//   main <hex-base> <hex-size>
//   pool <hex-base> <hex-size>
//   reserve <name> <hex-base> <hex-size>
//   table <name> <hex-base> <hex-size>      (emitted by the rewriter)
struct Manifest {
  std::vector<Region> regions;
  uint32_t entry = 0;
  std::vector<Symbol> symbols;
  std::optional<VectorTable> vectors;
  std::vector<AddressRange> bootstrap;
  std::vector<AddressRange> main;
  std::vector<AddressRange> pools;
  std::vector<NamedRange> reserves;
  std::vector<NamedRange> tables;  // sidecar output; presence marks an
                                   // instrumented image

  bool instrumented() const { return !tables.empty(); }

  const Region* region_at(uint32_t addr) const;
  const Region* region_named(const std::string& name) const;
  std::optional<uint32_t> symbol_addr(const std::string& name) const;
  const NamedRange* table_named(const std::string& name) const;
  bool in_main(uint32_t addr) const;
  bool in_bootstrap(uint32_t addr) const;
  bool in_pool(uint32_t addr) const;

  // Checks region disjointness, the W^X region rules, and that symbols
  // land in executable regions. Throws ManifestError.
  void validate() const;

  static Manifest parse(std::istream& in);
  static Manifest parse_string(const std::string& text);
  static Manifest load(const std::string& path);
  std::string serialize() const;
  void save(const std::string& path) const;
};

struct Section {
  uint32_t base = 0;
  std::vector<uint8_t> bytes;
};

struct ImageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat firmware image: a set of byte sections positioned in the address
// space plus the manifest describing the layout.
struct FirmwareImage {
  std::vector<Section> sections;
  Manifest manifest;

  size_t total_bytes() const;
  uint8_t* byte_at(uint32_t addr);
  const uint8_t* byte_at(uint32_t addr) const;
  uint16_t read16(uint32_t addr) const;
  uint32_t read32(uint32_t addr) const;
  void write16(uint32_t addr, uint16_t value);
  void write32(uint32_t addr, uint32_t value);

  // Container format: "CFI1", u32 section count, then per section
  // u32 base, u32 size, raw bytes. All little-endian.
  static std::vector<Section> load_sections(const std::string& path);
  static void save_sections(const std::vector<Section>& sections,
                            const std::string& path);
};

}  // namespace cfikit::image
