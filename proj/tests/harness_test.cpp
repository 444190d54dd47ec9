#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "cfikit/assembler.hpp"
#include "cfikit/harness.hpp"
#include "cfikit/rewriter.hpp"

using namespace cfikit;
using harness::AttackAction;
using harness::AttackRule;
using harness::Outcome;
using harness::parse_attack_script;
using harness::ScriptError;

namespace {

const char* kLayout =
    ".region lit 0x0 0x100 r-- ns\n"
    ".region flash 0x8000 0x2000 r-x ns\n"
    ".region tables 0xa000 0x800 r-- ns\n"
    ".region ram 0x20000000 0x400 rw- ns\n"
    ".region data 0x21000000 0x100 rw- ns\n"
    ".region shadow 0x30000000 0x400 rw- s\n"
    ".region io 0x40000000 0x10 rw- ns\n"
    ".reserve tramp 0x9000 0x200\n"
    ".reserve tbl 0xa000 0x800\n";

std::string vectors17(const char* irq_sym = "0") {
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

image::FirmwareImage tiny(const std::string& body) {
  return assembler::assemble(std::string(kLayout) + vectors17() +
                             ".org 0x8100\n" + body);
}

}  // namespace

TEST_CASE("outcomes map to names and exit codes") {
  CHECK(std::string(harness::outcome_name(Outcome::Completed)) == "completed");
  CHECK(std::string(harness::outcome_name(Outcome::CfiViolation)) ==
        "cfi-violation");
  CHECK(std::string(harness::outcome_name(Outcome::Fault)) == "fault");
  CHECK(std::string(harness::outcome_name(Outcome::BudgetExhausted)) ==
        "budget-exhausted");
  CHECK(harness::outcome_exit_code(Outcome::Completed) == 0);
  CHECK(harness::outcome_exit_code(Outcome::CfiViolation) == 10);
  CHECK(harness::outcome_exit_code(Outcome::Fault) == 11);
  CHECK(harness::outcome_exit_code(Outcome::BudgetExhausted) == 12);
}

TEST_CASE("attack scripts parse triggers and actions") {
  auto rules = parse_attack_script(
      "# comment line\n"
      "at-cycle 100 write32 0x20000000 0xdeadbeef\n"
      "at-pc 0x8104 set-reg r3 0x8119   # trailing comment\n"
      "at-symbol handler raise-irq 2\n"
      "\n"
      "at-cycle 5 write8 0x20000001 0xff\n"
      "at-cycle 6 write16 0x20000002 0xabcd\n");
  REQUIRE(rules.size() == 5);
  CHECK(rules[0].trigger == AttackRule::Trigger::AtCycle);
  CHECK(rules[0].cycle == 100);
  CHECK(rules[0].action.kind == AttackAction::Kind::Write32);
  CHECK(rules[0].action.addr == 0x20000000);
  CHECK(rules[0].action.value == 0xdeadbeef);
  CHECK(rules[1].trigger == AttackRule::Trigger::AtPc);
  CHECK(rules[1].pc == 0x8104);
  CHECK(rules[1].action.kind == AttackAction::Kind::SetReg);
  CHECK(rules[1].action.reg == 3);
  CHECK(rules[2].trigger == AttackRule::Trigger::AtSymbol);
  CHECK(rules[2].symbol == "handler");
  CHECK(rules[2].action.kind == AttackAction::Kind::RaiseIrq);
  CHECK(rules[2].action.value == 2);
  CHECK(rules[3].action.kind == AttackAction::Kind::Write8);
  CHECK(rules[4].action.kind == AttackAction::Kind::Write16);
}

TEST_CASE("malformed attack scripts report the offending line") {
  auto fails_with = [](const char* text, const char* frag) {
    try {
      parse_attack_script(text);
      return false;
    } catch (const ScriptError& e) {
      return std::string(e.what()).find(frag) != std::string::npos;
    }
  };
  CHECK(fails_with("at-cycle 10\n", "line 1"));
  CHECK(fails_with("on-cycle 10 raise-irq 0\n", "unknown trigger"));
  CHECK(fails_with("at-cycle 10 explode 0\n", "unknown action"));
  CHECK(fails_with("at-cycle 10 set-reg x3 5\n", "bad register"));
  CHECK(fails_with("at-cycle 10 set-reg r99 5\n", "bad register"));
  CHECK(fails_with("at-cycle 1 raise-irq 0\nat-cycle zz raise-irq 0\n",
                   "line 2"));
  CHECK(fails_with("at-cycle 10 write32 0x20000000\n", "operand count"));
}

TEST_CASE("attack scripts load from disk") {
  const char* path = "harness_attack_tmp.txt";
  {
    std::ofstream out(path);
    out << "at-cycle 3 raise-irq 1\n";
  }
  auto rules = harness::load_attack_script(path);
  std::remove(path);
  REQUIRE(rules.size() == 1);
  CHECK(rules[0].action.kind == AttackAction::Kind::RaiseIrq);
  CHECK_THROWS_AS(harness::load_attack_script("no/such/file"),
                  ScriptError);
}

TEST_CASE("run outcomes: completion, budget, fault") {
  auto done = harness::run_image(tiny("start: nop\nhalt\n"));
  CHECK(done.report.outcome == Outcome::Completed);
  CHECK(done.report.cycles > 0);

  harness::RunOptions small;
  small.max_cycles = 50;
  auto spin = harness::run_image(tiny("start: b start\n"), small);
  CHECK(spin.report.outcome == Outcome::BudgetExhausted);
  CHECK(spin.report.cycles >= 50);

  // store into the flash region: write to read-only memory faults
  auto bad = harness::run_image(
      tiny("start: mov r1, #0\nstr r1, [r1]\nhalt\n"));
  CHECK(bad.report.outcome == Outcome::Fault);
  CHECK(bad.report.fault == sim::Fault::MemFault);
}

TEST_CASE("attack writes respect the access policy") {
  // attacker pokes the secure shadow region: the run faults instead of
  // silently corrupting monitor state
  harness::RunOptions opts;
  opts.attacks = parse_attack_script("at-cycle 1 write32 0x30000000 0x41414141\n");
  auto s = harness::run_image(tiny("start: nop\nnop\nnop\nhalt\n"), opts);
  CHECK(s.report.outcome == Outcome::Fault);
  CHECK(s.machine->memory().raw_read32(0x30000000) != 0x41414141);
}

TEST_CASE("at-symbol triggers resolve through the manifest") {
  harness::RunOptions opts;
  opts.attacks = parse_attack_script("at-symbol poke write32 0x20000000 99\n");
  auto s = harness::run_image(
      tiny("start: nop\npoke: nop\nhalt\n"), opts);
  CHECK(s.report.outcome == Outcome::Completed);
  CHECK(s.machine->memory().raw_read32(0x20000000) == 99);

  opts.attacks = parse_attack_script("at-symbol missing raise-irq 0\n");
  CHECK_THROWS_AS(harness::run_image(tiny("start: halt\n"), opts),
                  ScriptError);
}

TEST_CASE("memory comparison flags real divergence only") {
  auto img = assembler::assemble(std::string(kLayout) + vectors17() +
                                 ".org 0x0\n"
                                 ".word 0\n"
                                 ".word 0x21000000\n"  // global in data region
                                 ".org 0x8100\n"
                                 "start: mov r0, #0\n"
                                 "ldr r1, [r0, #4]\n"
                                 "mov r2, #5\n"
                                 "str r2, [r1]\n"
                                 "halt\n");
  auto a = harness::run_image(img);
  auto b = harness::run_image(img);
  REQUIRE(a.report.outcome == Outcome::Completed);
  CHECK(harness::compare_memory(*a.machine, *b.machine).empty());

  // divergence in a global is reported
  b.machine->memory().raw_write8(0x21000000, 77);
  auto diffs = harness::compare_memory(*a.machine, *b.machine);
  REQUIRE(diffs.size() == 1);
  CHECK(diffs[0].addr == 0x21000000);
  CHECK(diffs[0].baseline == 5);
  CHECK(diffs[0].candidate == 77);

  // scratch below the final stack pointer is dead and ignored
  b.machine->memory().raw_write8(0x21000000, 5);
  b.machine->memory().raw_write8(0x20000380, 123);
  CHECK(harness::compare_memory(*a.machine, *b.machine).empty());
}

TEST_CASE("instrumented and plain runs agree on output and data memory") {
  auto img = assembler::assemble(std::string(kLayout) + vectors17() +
                                 ".org 0x0\n"
                                 ".word 0x40000000\n"
                                 ".org 0x8100\n"
                                 "start: mov r4, #3\n"
                                 ".loop: bl emit\n"
                                 "sub r4, #1\n"
                                 "bne .loop\n"
                                 "halt\n"
                                 "emit: push {r4, lr}\n"
                                 "mov r0, #0\n"
                                 "ldr r1, [r0, #0]\n"
                                 "str r4, [r1]\n"
                                 "pop {r4, pc}\n"
                                 "end:\n"
                                 ".main 0x8100 end\n");
  auto plain = harness::run_image(img);
  REQUIRE(plain.report.outcome == Outcome::Completed);
  REQUIRE(plain.report.output == std::vector<uint32_t>{3, 2, 1});

  auto inst = rewrite::instrument_image(img);
  auto run = harness::run_image(inst.image);
  REQUIRE(run.report.outcome == Outcome::Completed);
  CHECK(run.report.output == plain.report.output);
  CHECK(harness::compare_memory(*plain.machine, *run.machine).empty());
  CHECK(run.report.cycles > plain.report.cycles);
}

TEST_CASE("bench reports zero overhead for an uninstrumentable program") {
  // straight-line code, no calls, no branches to mediate
  auto img = tiny(
      "start: mov r0, #1\n"
      "add r0, #2\n"
      "sub r0, #1\n"
      "cmp r0, #2\n"
      "halt\n"
      "end:\n"
      ".main 0x8100 end\n");
  auto r = harness::bench_image(img);
  CHECK(r.report.rewritten_sites == 0);
  CHECK(r.baseline_cycles == r.instrumented_cycles);
  CHECK(r.overhead() == 0.0);
}

TEST_CASE("bench measures positive overhead once traps exist") {
  auto img = tiny(
      "start: bl f\n"
      "bl f\n"
      "halt\n"
      "f: bx lr\n"
      "end:\n"
      ".main 0x8100 end\n");
  auto r = harness::bench_image(img);
  CHECK(r.report.rewritten_sites == 3);  // two calls and one return
  CHECK(r.instrumented_cycles > r.baseline_cycles);
  CHECK(r.overhead() > 0.0);
}

TEST_CASE("bench rejects programs that do not complete") {
  auto img = tiny("start: b start\n"
                  "end:\n"
                  ".main 0x8100 end\n");
  CHECK_THROWS(harness::bench_image(img, 1000));
}

TEST_CASE("run report carries a trace when requested") {
  harness::RunOptions opts;
  opts.trace = true;
  auto s = harness::run_image(tiny("start: mov r0, #1\nhalt\n"), opts);
  REQUIRE(s.report.trace.size() == 2);
  CHECK(s.report.trace[0].pc == 0x8100);
  CHECK(s.report.trace[0].disasm == "mov r0, #1");
  CHECK(s.report.trace[1].disasm == "halt");
}
