#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <set>

#include "cfikit/assembler.hpp"
#include "cfikit/harness.hpp"
#include "cfikit/monitor.hpp"
#include "cfikit/rewriter.hpp"

using namespace cfikit;
using harness::Outcome;
using monitor::btbl_lookup;
using rewrite::DispatchClass;

namespace {

const char* kLayout =
    ".region lit 0x0 0x100 r-- ns\n"
    ".region flash 0x8000 0x2000 r-x ns\n"
    ".region tables 0xa000 0x800 r-- ns\n"
    ".region ram 0x20000000 0x400 rw- ns\n"
    ".region shadow 0x30000000 0x400 rw- s\n"
    ".region io 0x40000000 0x10 rw- ns\n"
    ".reserve tramp 0x9000 0x200\n"
    ".reserve tbl 0xa000 0x800\n";

std::string vectors17(const char* irq_sym = "irq") {
  std::string s =
      ".vectors 0x8000 17\n"
      ".entry start\n"
      ".org 0x8000\n"
      ".word 0x20000400\n"
      ".word start\n";
  for (int i = 2; i < 17; ++i)
    s += std::string(".word ") + (i == 16 ? irq_sym : "0") + "\n";
  return s;
}

// Benign program exercising direct calls, an indirect call, both return
// forms, and port output. Literal pool at address 0 carries addresses
// the 8-bit mov immediate cannot.
std::string benign_body() {
  return
      ".org 0x0\n"
      ".word f\n"           // [0x0]
      ".word 0x40000000\n"  // [0x4] output port
      ".word g\n"           // [0x8]
      ".org 0x8100\n"
      "start: bl f\n"
      "bl g\n"
      "mov r0, #0\n"
      "ldr r3, [r0, #0]\n"
      "blx r3\n"
      "mov r0, #0\n"
      "ldr r1, [r0, #4]\n"
      "mov r2, #7\n"
      "str r2, [r1]\n"
      "halt\n"
      "f: nop\n"
      "bx lr\n"
      "g: push {r4, lr}\n"
      "mov r4, #1\n"
      "pop {r4, pc}\n"
      "irq: bx lr\n"
      "end:\n"
      ".main 0x8100 end\n";
}

image::FirmwareImage benign_image() {
  return assembler::assemble(std::string(kLayout) + vectors17() + benign_body());
}

}  // namespace

TEST_CASE("branch table binary search matches a linear scan") {
  std::mt19937 rng(1234);
  for (int trial = 0; trial < 5; ++trial) {
    std::set<uint32_t> sites;
    while (sites.size() < 200) sites.insert((rng() % 0xFFFF) * 2 + 0x8000);
    rewrite::BranchTable table;
    for (uint32_t s : sites)
      table.push_back({s, 0x8000 + static_cast<uint32_t>(rng() % 0x1000)});

    auto linear = [&](uint32_t q) -> std::optional<uint32_t> {
      for (const auto& e : table)
        if (e.site == q) return e.dest;
      return std::nullopt;
    };
    for (const auto& e : table) {
      for (int32_t d : {-2, 0, 2}) {
        uint32_t q = e.site + d;
        CHECK(btbl_lookup(table, q) == linear(q));
      }
    }
    CHECK(!btbl_lookup(table, 0));
    CHECK(!btbl_lookup(table, 0xFFFFFFFE));
  }
}

TEST_CASE("benign instrumented run completes with a balanced shadow stack") {
  auto img = benign_image();
  auto plain = harness::run_image(img);
  REQUIRE(plain.report.outcome == Outcome::Completed);
  CHECK(!plain.report.monitored);

  auto inst = rewrite::instrument_image(img);
  auto run = harness::run_image(inst.image);
  REQUIRE(run.report.outcome == Outcome::Completed);
  CHECK(run.report.monitored);
  CHECK(run.report.output == plain.report.output);

  const auto& st = run.monitor->stats();
  CHECK(st.traps == run.machine->svc_entries());
  CHECK(st.direct_calls == 2);
  CHECK(st.indirect_calls == 1);
  CHECK(st.returns == 3);
  CHECK(st.shadow_depth == 0);
  CHECK(st.shadow_max_depth == 1);
  CHECK(!run.monitor->violation());
}

TEST_CASE("shadow stack slots live in secure memory") {
  auto inst = rewrite::instrument_image(benign_image());
  auto s = harness::run_image(inst.image);
  REQUIRE(s.report.outcome == Outcome::Completed);
  // slots are not scrubbed on pop, so slot 0 still holds the last value
  // pushed there: the indirect call's return address (site 0x810c + 2 | 1)
  CHECK(s.machine->memory().raw_read32(0x30000000) == 0x810F);
}

TEST_CASE("corrupted return address on the program stack is caught") {
  auto img = benign_image();
  uint32_t g = *img.manifest.symbol_addr("g");
  uint32_t f = *img.manifest.symbol_addr("f");
  auto inst = rewrite::instrument_image(img);

  harness::RunOptions opts;
  // g pushes {r4, lr}; the stored lr lands at 0x200003fc. Redirect it
  // at the push site toward f.
  char buf[96];
  std::snprintf(buf, sizeof buf, "at-pc 0x%x write32 0x200003fc 0x%x", g + 2,
                f | 1);
  opts.attacks = harness::parse_attack_script(buf);

  auto run = harness::run_image(inst.image, opts);
  CHECK(run.report.outcome == Outcome::CfiViolation);
  REQUIRE(run.monitor->violation());
  CHECK(run.monitor->violation()->cls == DispatchClass::ReturnPop);
  CHECK((run.monitor->violation()->observed | 1u) == (f | 1u));

  // same attack, uninstrumented image: hijack succeeds silently
  auto plain = harness::run_image(img, opts);
  CHECK(plain.report.outcome == Outcome::Completed);
}

TEST_CASE("indirect call policing") {
  auto img = benign_image();
  uint32_t f = *img.manifest.symbol_addr("f");
  uint32_t g = *img.manifest.symbol_addr("g");
  auto inst = rewrite::instrument_image(img);
  uint32_t blx_site = 0;
  for (const auto& d : inst.descriptors)
    if (d.cls == DispatchClass::IndirectCall) blx_site = 1;
  REQUIRE(blx_site == 1);

  auto attack = [&](uint32_t target) {
    harness::RunOptions opts;
    char buf[64];
    // retarget r3 right at the blx site 0x810c, after the pool load
    std::snprintf(buf, sizeof buf, "at-pc 0x810c set-reg r3 0x%x", target);
    opts.attacks = harness::parse_attack_script(buf);
    return harness::run_image(inst.image, opts);
  };

  // mid-function address
  auto mid = attack(f + 2);
  CHECK(mid.report.outcome == Outcome::CfiViolation);
  CHECK(mid.monitor->violation()->cls == DispatchClass::IndirectCall);

  // address outside the call target table entirely
  auto wild = attack(0x9000);
  CHECK(wild.report.outcome == Outcome::CfiViolation);

  // another legitimate entry: allowed by design (function-reuse stays
  // possible, entry-point integrity is what is enforced)
  auto reuse = attack(g | 1);
  CHECK(reuse.report.outcome == Outcome::Completed);
}

TEST_CASE("stray svc comments are rejected") {
  auto img = assembler::assemble(std::string(kLayout) + vectors17("0") +
                                 ".org 0x8100\n"
                                 "start: bl f\n"
                                 "nop\n"
                                 "nop\n"
                                 "nop\n"
                                 "svc #250\n"
                                 "halt\n"
                                 "f: bx lr\n"
                                 "end:\n"
                                 ".main 0x8100 end\n");
  auto inst = rewrite::instrument_image(img);
  auto run = harness::run_image(inst.image);
  CHECK(run.report.outcome == Outcome::CfiViolation);
  REQUIRE(run.monitor->violation());
  CHECK(run.monitor->violation()->observed == 250);
}

TEST_CASE("shadow stack overflow halts the run") {
  // unbounded self-call
  auto img = assembler::assemble(std::string(kLayout) + vectors17("0") +
                                 ".org 0x8100\n"
                                 "start: bl start\n"
                                 "halt\n"
                                 "end:\n"
                                 ".main 0x8100 end\n");
  auto inst = rewrite::instrument_image(img);
  harness::RunOptions opts;
  opts.monitor.shadow_capacity = 16;
  auto run = harness::run_image(inst.image, opts);
  CHECK(run.report.outcome == Outcome::CfiViolation);
  CHECK(run.monitor->stats().shadow_max_depth == 16);
}

TEST_CASE("interrupt entry and return are mediated and validated") {
  auto img = benign_image();
  auto inst = rewrite::instrument_image(img);

  harness::RunOptions opts;
  opts.attacks = harness::parse_attack_script("at-cycle 40 raise-irq 0");
  auto run = harness::run_image(inst.image, opts);
  REQUIRE(run.report.outcome == Outcome::Completed);
  CHECK(run.monitor->stats().exception_entries == 1);
  CHECK(run.monitor->stats().returns == 4);  // three calls + handler return

  auto plain = harness::run_image(img);
  CHECK(run.report.output == plain.report.output);
}

TEST_CASE("tampered exception frame pc is caught on handler return") {
  auto img = benign_image();
  uint32_t irq = *img.manifest.symbol_addr("irq");
  auto inst = rewrite::instrument_image(img);

  // Arrange the interrupt at pc 0x810e, where the main thread runs with
  // an empty stack: the hardware frame sits at the stack top and its
  // stored pc lives at 0x200003f8.
  harness::RunOptions opts;
  char buf[112];
  std::snprintf(
      buf, sizeof buf,
      "at-pc 0x810e raise-irq 0\nat-pc 0x%x write32 0x200003f8 0x8150", irq);
  opts.attacks = harness::parse_attack_script(buf);

  auto run = harness::run_image(inst.image, opts);
  CHECK(run.report.outcome == Outcome::CfiViolation);
  REQUIRE(run.monitor->violation());
  CHECK(run.monitor->violation()->cls == DispatchClass::ReturnBxLr);
  CHECK(run.monitor->violation()->observed == 0x8150);
}

TEST_CASE("violation stops the guest before any further effect") {
  auto img = benign_image();
  uint32_t g = *img.manifest.symbol_addr("g");
  auto inst = rewrite::instrument_image(img);

  harness::RunOptions opts;
  char buf[96];
  // point the stored return address at the output sequence tail
  std::snprintf(buf, sizeof buf, "at-pc 0x%x write32 0x200003fc 0x810d", g + 2);
  opts.attacks = harness::parse_attack_script(buf);
  auto run = harness::run_image(inst.image, opts);
  CHECK(run.report.outcome == Outcome::CfiViolation);
  CHECK(run.report.output.empty());  // gadget output never happened
}
