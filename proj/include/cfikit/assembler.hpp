#pragma once

#include <stdexcept>
#include <string>

#include "cfikit/image.hpp"

namespace cfikit::assembler {

struct AsmError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Two-pass assembler for the firmware dialect. The source carries both
// the code and the layout directives, so the result is a complete image
// with its manifest:
//
//   .region <name> <hex-base> <hex-size> <perms:rwx> <sec:ns|s|nsc>
//   .entry <label|hex>
//   .vectors <hex> <count>
//   .bootstrap <start> <end>        (labels or hex, end exclusive)
//   .main <start> <end>
//   .pool <start> <end>
//   .reserve <name> <hex-base> <hex-size>
//   .org <hex>
//   .word <label|hex>
//
// Labels end with ':'. Labels starting with '.' are local: usable as
// branch targets but kept out of the symbol table. Comments run from
// '@' or ';' to end of line.
image::FirmwareImage assemble(const std::string& source);
image::FirmwareImage assemble_file(const std::string& path);

}  // namespace cfikit::assembler
