// End-to-end acceptance suite. Each case prints one verdict line so the
// run log doubles as a checklist.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "cfikit/assembler.hpp"
#include "cfikit/harness.hpp"
#include "cfikit/isa.hpp"
#include "cfikit/monitor.hpp"
#include "cfikit/rewriter.hpp"

using namespace cfikit;
using harness::Outcome;

namespace {

std::string fixture(const char* name) {
  return std::string(FIXTURES_DIR) + "/" + name;
}

image::FirmwareImage load_fixture(const char* name) {
  return assembler::assemble_file(fixture(name));
}

void verdict(int n, const char* what, bool ok) {
  std::printf("criterion %2d  %-52s %s\n", n, what, ok ? "PASS" : "FAIL");
  CHECK(ok);
}

std::string hexstr(uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%x", v);
  return buf;
}

// Independent re-scan of the executable main ranges: linear decode,
// collecting every instruction with its class.
struct ScanRecord {
  uint32_t addr;
  uint32_t width;
  isa::BranchClass cls;
};

std::vector<ScanRecord> scan_main(const image::FirmwareImage& img) {
  std::vector<ScanRecord> out;
  for (const auto& range : img.manifest.main) {
    std::vector<uint8_t> bytes;
    for (uint32_t a = range.base; a < range.end(); ++a)
      bytes.push_back(*img.byte_at(a));
    size_t off = 0;
    while (off < bytes.size()) {
      auto instr = isa::decode(bytes, off);
      out.push_back({static_cast<uint32_t>(range.base + off),
                     static_cast<uint32_t>(instr.width()),
                     isa::classify(instr)});
      off += instr.width();
    }
  }
  return out;
}

bool is_mediated_class(isa::BranchClass c) {
  return c == isa::BranchClass::DirectCall ||
         c == isa::BranchClass::IndirectCall ||
         c == isa::BranchClass::EffectiveReturnBxLr ||
         c == isa::BranchClass::EffectiveReturnPop;
}

bool contains_value(const std::vector<uint32_t>& v, uint32_t x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

}  // namespace

TEST_CASE("return-address hijack detection") {
  auto img = load_fixture("overflow_victim.s");
  auto inst = rewrite::instrument_image(img);
  uint32_t victim = *img.manifest.symbol_addr("victim");

  std::vector<uint32_t> gadgets;
  for (int i = 0; i < 12; ++i)
    gadgets.push_back(*img.manifest.symbol_addr(("g" + std::to_string(i)).c_str()));

  bool ok = gadgets.size() >= 10;
  for (uint32_t g : gadgets) {
    harness::RunOptions opts;
    opts.attacks = harness::parse_attack_script(
        "at-pc " + hexstr(victim + 2) + " write32 0x200003fc " +
        hexstr(g | 1));

    // instrumented: the pop dispatch flags the mismatch before the
    // gadget can emit its marker
    auto guarded = harness::run_image(inst.image, opts);
    ok &= guarded.report.outcome == Outcome::CfiViolation;
    for (uint32_t v : guarded.report.output) ok &= v < 160;

    // unprotected: the hijack lands and the marker appears
    auto bare = harness::run_image(img, opts);
    ok &= bare.report.outcome == Outcome::Completed;
    ok &= contains_value(bare.report.output, 160 + (g - gadgets[0]) / 6);
  }
  verdict(1, "return hijack caught before gadget output (12 targets)", ok);
}

TEST_CASE("forward-edge hijack detection") {
  auto img = load_fixture("callback.s");
  auto inst = rewrite::instrument_image(img);
  uint32_t site = *img.manifest.symbol_addr("call_site");
  uint32_t cb_add = *img.manifest.symbol_addr("cb_add");
  uint32_t cb_mul = *img.manifest.symbol_addr("cb_mul");
  uint32_t helper = *img.manifest.symbol_addr("helper");

  auto run_with_target = [&](uint32_t target) {
    harness::RunOptions opts;
    opts.attacks = harness::parse_attack_script(
        "at-pc " + hexstr(site) + " set-reg r3 " + hexstr(target));
    return harness::run_image(inst.image, opts);
  };

  bool ok = true;
  // mid-function addresses are rejected
  auto mid = run_with_target(cb_add + 2);
  ok &= mid.report.outcome == Outcome::CfiViolation;
  auto mid2 = run_with_target(cb_mul + 4);
  ok &= mid2.report.outcome == Outcome::CfiViolation;
  // addresses outside the call-target table are rejected
  auto wild = run_with_target(0x9000);
  ok &= wild.report.outcome == Outcome::CfiViolation;
  auto data = run_with_target(0x20000000);
  ok &= data.report.outcome == Outcome::CfiViolation;
  // redirecting to other legitimate entries stays within the policy
  auto other = run_with_target(cb_mul | 1);
  ok &= other.report.outcome == Outcome::Completed;
  ok &= contains_value(other.report.output, 2);
  auto pop_form = run_with_target(helper | 1);
  ok &= pop_form.report.outcome == Outcome::Completed;
  ok &= contains_value(pop_form.report.output, 3);
  verdict(2, "indirect-call targets confined to subroutine entries", ok);
}

TEST_CASE("interrupt frame tamper detection") {
  auto img = load_fixture("irq_counter.s");
  auto inst = rewrite::instrument_image(img);
  uint32_t loop = *img.manifest.symbol_addr("loop");

  bool ok = true;
  int tampers = 0;
  for (uint32_t i = 0; i < 24; ++i) {
    uint32_t v = 0x8200 + 8 * i;  // never the genuine resume address
    harness::RunOptions opts;
    opts.attacks = harness::parse_attack_script(
        "at-pc " + hexstr(loop) + " raise-irq 0\n" +
        "at-symbol irq_handler write32 0x200003f8 " + hexstr(v));
    auto run = harness::run_image(inst.image, opts);
    ok &= run.report.outcome == Outcome::CfiViolation;
    ok &= run.report.violation.has_value();
    if (run.report.violation) {
      ok &= run.report.violation->cls == rewrite::DispatchClass::ReturnBxLr;
      ok &= run.report.violation->observed == v;
    }
    ++tampers;
  }
  ok &= tampers >= 20;
  verdict(3, "stored-pc tamper caught on handler return (24 values)", ok);
}

TEST_CASE("layout preservation") {
  const char* names[] = {"leaf_calls.s", "callback.s", "recursion.s",
                         "irq_counter.s", "overflow_victim.s"};
  bool ok = true;
  for (const char* name : names) {
    auto img = load_fixture(name);
    auto inst = rewrite::instrument_image(img);

    ok &= inst.image.sections.size() == img.sections.size();
    ok &= inst.image.total_bytes() == img.total_bytes();

    // allowed difference set: rewritten site bytes from an independent
    // re-scan, the vector table words, and the reserved carve-outs
    std::set<uint32_t> allowed;
    for (const auto& rec : scan_main(img))
      if (is_mediated_class(rec.cls))
        for (uint32_t a = rec.addr; a < rec.addr + rec.width; ++a)
          allowed.insert(a);
    if (img.manifest.vectors)
      for (uint32_t a = img.manifest.vectors->addr;
           a < img.manifest.vectors->addr + 4 * img.manifest.vectors->count;
           ++a)
        allowed.insert(a);
    for (const auto& r : img.manifest.reserves)
      for (uint32_t a = r.base; a < r.base + r.size; ++a) allowed.insert(a);

    for (size_t s = 0; s < img.sections.size(); ++s) {
      ok &= inst.image.sections[s].base == img.sections[s].base;
      ok &= inst.image.sections[s].bytes.size() == img.sections[s].bytes.size();
      const auto& a = img.sections[s];
      const auto& b = inst.image.sections[s];
      for (size_t i = 0; i < a.bytes.size(); ++i)
        if (a.bytes[i] != b.bytes[i]) ok &= allowed.count(a.base + i) > 0;
    }
  }
  verdict(4, "image layout identical, diffs confined to known sites", ok);
}

TEST_CASE("static mediation completeness") {
  const char* names[] = {"leaf_calls.s", "callback.s", "recursion.s",
                         "irq_counter.s", "overflow_victim.s"};
  bool ok = true;
  for (const char* name : names) {
    auto inst = rewrite::instrument_image(load_fixture(name));
    size_t unmediated = 0;
    for (const auto& rec : scan_main(inst.image))
      if (is_mediated_class(rec.cls)) ++unmediated;
    ok &= unmediated == 0;
  }
  verdict(5, "re-disassembly finds no unmediated branch in main code", ok);
}

TEST_CASE("branch table sizing") {
  // program with exactly 75 direct calls
  std::string src =
      ".region flash 0x8000 0x2000 r-x ns\n"
      ".region tables 0xa000 0x800 r-- ns\n"
      ".region ram 0x20000000 0x400 rw- ns\n"
      ".region shadow 0x30000000 0x400 rw- s\n"
      ".reserve tramp 0x9000 0x400\n"
      ".reserve tbl 0xa000 0x800\n"
      ".entry start\n"
      ".org 0x8100\n"
      "start:\n";
  for (int i = 0; i < 75; ++i) src += "bl f\n";
  src +=
      "halt\n"
      "f: bx lr\n"
      "end:\n"
      ".main 0x8100 end\n";

  auto inst = rewrite::instrument_image(assembler::assemble(src));
  bool ok = inst.branch_table.size() == 75;
  ok &= inst.report.direct_call_sites == 75;
  ok &= inst.report.branch_table_bytes == 600;
  const auto* bt = inst.image.manifest.table_named("btbl");
  ok &= bt && bt->size == 600;
  verdict(6, "75 direct-call records occupy exactly 600 table bytes", ok);
}

TEST_CASE("overhead scaling") {
  const char* names[] = {"bench/bench_zero.s", "bench/bench_sparse.s",
                         "bench/bench_mixed.s", "bench/bench_dense.s"};
  std::vector<double> ratios, overheads, per_trap;
  bool ok = true;
  for (const char* name : names) {
    auto img = load_fixture(name);
    auto bench = harness::bench_image(img);
    ratios.push_back(bench.report.ratio());
    overheads.push_back(bench.overhead());

    auto inst = rewrite::instrument_image(img);
    auto run = harness::run_image(inst.image);
    ok &= run.report.outcome == Outcome::Completed;
    uint64_t traps = run.report.stats.traps;
    if (traps == 0) {
      // zero mediated sites must mean exactly zero added cycles
      ok &= bench.baseline_cycles == bench.instrumented_cycles;
      ok &= bench.overhead() == 0.0;
    } else {
      per_trap.push_back(
          double(bench.instrumented_cycles - bench.baseline_cycles) /
          double(traps));
    }
  }
  for (size_t i = 1; i < ratios.size(); ++i) {
    ok &= ratios[i] > ratios[i - 1];
    ok &= overheads[i] > overheads[i - 1];
  }
  // per-trap cost stays flat across densities
  double mean = 0;
  for (double c : per_trap) mean += c;
  mean /= double(per_trap.size());
  for (double c : per_trap) ok &= std::fabs(c - mean) <= 0.15 * mean;
  verdict(7, "overhead tracks site ratio, per-trap cost flat within 15%", ok);
}

TEST_CASE("interrupt transparency") {
  auto img = load_fixture("irq_counter.s");
  auto inst = rewrite::instrument_image(img);

  auto quiet = harness::run_image(img);
  REQUIRE(quiet.report.outcome == Outcome::Completed);
  uint64_t span = quiet.report.cycles;

  // 100 jittered interrupt times; the spacing keeps handlers from
  // nesting past the fixture's 1 KiB stack
  std::mt19937 rng(0x5EED);
  std::string script;
  uint64_t last = 0;
  for (int i = 0; i < 100; ++i) {
    uint64_t c = 60 + 100 * uint64_t(i) + rng() % 24;
    script += "at-cycle " + std::to_string(c) + " raise-irq 0\n";
    last = c;
  }
  bool ok = last < span;  // every event lands inside the baseline run

  harness::RunOptions opts;
  opts.attacks = harness::parse_attack_script(script);
  auto plain = harness::run_image(img, opts);
  auto mon = harness::run_image(inst.image, opts);

  ok &= plain.report.outcome == Outcome::Completed;
  ok &= mon.report.outcome == Outcome::Completed;
  ok &= plain.report.output == mon.report.output;
  ok &= harness::compare_memory(*plain.machine, *mon.machine).empty();
  // every scheduled interrupt was counted, in both runs
  ok &= plain.machine->memory().raw_read32(0x21000000) == 100;
  ok &= mon.machine->memory().raw_read32(0x21000000) == 100;
  verdict(8, "100 random interrupts: output and data memory identical", ok);
}

TEST_CASE("validation oracles") {
  bool ok = true;

  // table lookup against a linear scan, exhaustive over sites and their
  // 2-byte neighbors
  std::mt19937 rng(0xACCE);
  for (int trial = 0; trial < 3; ++trial) {
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
    for (const auto& e : table)
      for (int32_t d : {-2, 0, 2})
        ok &= monitor::btbl_lookup(table, e.site + d) == linear(e.site + d);
  }

  // shadow-stack decisions against an independent call/return stack,
  // followed over the complete trap trace of each fixture
  const char* names[] = {"leaf_calls.s", "callback.s", "recursion.s",
                         "overflow_victim.s", "irq_counter.s"};
  for (const char* name : names) {
    auto img = load_fixture(name);
    auto inst = rewrite::instrument_image(img);
    sim::Machine m(inst.image.manifest, inst.image.sections);
    monitor::BranchMonitor bm(m);
    auto inner = m.svc_handler;

    std::vector<uint32_t> ref;
    bool agree = true;
    m.svc_handler = [&](sim::Machine& mm, uint8_t c) {
      uint32_t frame = mm.active_sp();
      uint32_t site = mm.read_word(frame + 24) - 2;
      const auto* d = rewrite::find_descriptor(inst.descriptors, c);
      auto verdict = inner(mm, c);
      if (!d) return verdict;

      switch (d->cls) {
        case rewrite::DispatchClass::DirectCall:
          ref.push_back((site + 4) | 1u);
          break;
        case rewrite::DispatchClass::IndirectCall:
          ref.push_back((site + 2) | 1u);
          break;
        case rewrite::DispatchClass::ExceptionEntry:
          ref.push_back(mm.read_word(frame + 4 * (8 + 6)));
          break;
        case rewrite::DispatchClass::ReturnBxLr:
        case rewrite::DispatchClass::ReturnPop: {
          uint32_t cand;
          if (d->cls == rewrite::DispatchClass::ReturnBxLr) {
            cand = mm.read_word(frame + 4 * 5);
            if (sim::is_exc_return(cand))
              cand = mm.read_word(frame + 4 * (8 + 6));
          } else {
            uint32_t k = __builtin_popcount(d->reglist);
            cand = mm.read_word(frame + 4 * (8 + k));
            if (sim::is_exc_return(cand))
              cand = mm.read_word(frame + 4 * (8 + k + 1 + 6));
          }
          bool want_allow = !ref.empty() && (ref.back() | 1u) == (cand | 1u);
          bool allowed = verdict == sim::SvcVerdict::Resume;
          agree &= want_allow == allowed;
          if (!ref.empty()) ref.pop_back();
          break;
        }
      }
      // monitor shadow depth mirrors the reference stack
      if (verdict == sim::SvcVerdict::Resume)
        agree &= bm.stats().shadow_depth == ref.size();
      return verdict;
    };

    // deterministic interrupt sprinkle for the irq fixture
    bool with_irq = std::string(name) == "irq_counter.s";
    uint64_t next_irq = 30;
    while (m.running() && m.state().cycles < 100000) {
      if (with_irq && m.state().cycles >= next_irq &&
          m.state().mode == sim::Mode::Thread) {
        m.raise_exception(sim::EXC_IRQ_BASE);
        next_irq = m.state().cycles + 200;
      }
      m.step();
    }
    ok &= m.state().halted;
    ok &= agree;
    ok &= ref.empty();
    ok &= bm.stats().shadow_depth == 0;
  }
  verdict(9, "lookup and shadow decisions match independent oracles", ok);
}

TEST_CASE("shadow isolation") {
  auto img = load_fixture("leaf_calls.s");
  auto inst = rewrite::instrument_image(img);

  bool ok = true;
  sim::Machine m(inst.image.manifest, inst.image.sections);
  const auto* shadow = m.manifest().region_named("shadow");
  REQUIRE(shadow != nullptr);

  // snapshot all secure memory
  std::vector<uint8_t> before;
  for (const auto& r : m.manifest().regions) {
    if (r.security != image::RegionSecurity::Secure) continue;
    for (uint32_t a = r.base; a < r.end(); ++a)
      before.push_back(m.memory().raw_read8(a));
  }

  // exhaustive: every word of the shadow region rejects non-secure
  // stores, at the policy level and through the attack path
  for (uint32_t a = shadow->base; a < shadow->end(); a += 4) {
    ok &= m.memory().check_access(sim::Security::NonSecure, a, 4,
                                  sim::AccessKind::Store) != sim::Fault::None;
    m.external_store(a, 0x41414141, 4);
    ok &= m.state().fault != sim::Fault::None;
  }

  std::vector<uint8_t> after;
  for (const auto& r : m.manifest().regions) {
    if (r.security != image::RegionSecurity::Secure) continue;
    for (uint32_t a = r.base; a < r.end(); ++a)
      after.push_back(m.memory().raw_read8(a));
  }
  ok &= before == after;

  // and a full run under attack still ends in a fault, not corruption
  harness::RunOptions opts;
  opts.attacks =
      harness::parse_attack_script("at-cycle 5 write32 0x30000000 0xbad\n");
  auto run = harness::run_image(inst.image, opts);
  ok &= run.report.outcome == Outcome::Fault;
  verdict(10, "non-secure stores into the shadow region always fault", ok);
}
