#include "cfikit/harness.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace cfikit::harness {

const char* outcome_name(Outcome o) {
  switch (o) {
    case Outcome::Completed: return "completed";
    case Outcome::CfiViolation: return "cfi-violation";
    case Outcome::Fault: return "fault";
    case Outcome::BudgetExhausted: return "budget-exhausted";
  }
  return "?";
}

int outcome_exit_code(Outcome o) {
  switch (o) {
    case Outcome::Completed: return 0;
    case Outcome::CfiViolation: return 10;
    case Outcome::Fault: return 11;
    case Outcome::BudgetExhausted: return 12;
  }
  return 1;
}

namespace {

[[noreturn]] void fail(int line, const std::string& msg) {
  throw ScriptError("line " + std::to_string(line) + ": " + msg);
}

uint64_t parse_u64(const std::string& tok, int line) {
  try {
    size_t pos = 0;
    unsigned long long v = std::stoull(tok, &pos, 0);
    if (pos != tok.size()) fail(line, "bad number " + tok);
    return v;
  } catch (const ScriptError&) {
    throw;
  } catch (...) {
    fail(line, "bad number " + tok);
  }
}

uint32_t parse_u32(const std::string& tok, int line) {
  uint64_t v = parse_u64(tok, line);
  if (v > 0xFFFFFFFFull) fail(line, "value out of range " + tok);
  return static_cast<uint32_t>(v);
}

}  // namespace

std::vector<AttackRule> parse_attack_script(const std::string& text) {
  std::vector<AttackRule> rules;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    size_t cut = raw.find('#');
    if (cut != std::string::npos) raw = raw.substr(0, cut);
    std::istringstream ls(raw);
    std::vector<std::string> t;
    std::string w;
    while (ls >> w) t.push_back(w);
    if (t.empty()) continue;
    if (t.size() < 3) fail(line, "incomplete rule");

    AttackRule rule;
    size_t i = 0;
    if (t[0] == "at-cycle") {
      rule.trigger = AttackRule::Trigger::AtCycle;
      rule.cycle = parse_u64(t[1], line);
    } else if (t[0] == "at-pc") {
      rule.trigger = AttackRule::Trigger::AtPc;
      rule.pc = parse_u32(t[1], line);
    } else if (t[0] == "at-symbol") {
      rule.trigger = AttackRule::Trigger::AtSymbol;
      rule.symbol = t[1];
    } else {
      fail(line, "unknown trigger " + t[0]);
    }
    i = 2;

    const std::string& act = t[i];
    auto need = [&](size_t n) {
      if (t.size() != i + 1 + n) fail(line, act + " operand count");
    };
    if (act == "write8" || act == "write16" || act == "write32") {
      need(2);
      rule.action.kind = act == "write8"    ? AttackAction::Kind::Write8
                         : act == "write16" ? AttackAction::Kind::Write16
                                            : AttackAction::Kind::Write32;
      rule.action.addr = parse_u32(t[i + 1], line);
      rule.action.value = parse_u32(t[i + 2], line);
    } else if (act == "set-reg") {
      need(2);
      rule.action.kind = AttackAction::Kind::SetReg;
      const std::string& r = t[i + 1];
      if (r.size() < 2 || (r[0] != 'r' && r[0] != 'R'))
        fail(line, "bad register " + r);
      uint32_t n = parse_u32(r.substr(1), line);
      if (n > 15) fail(line, "bad register " + r);
      rule.action.reg = static_cast<uint8_t>(n);
      rule.action.value = parse_u32(t[i + 2], line);
    } else if (act == "raise-irq") {
      need(1);
      rule.action.kind = AttackAction::Kind::RaiseIrq;
      rule.action.value = parse_u32(t[i + 1], line);
    } else {
      fail(line, "unknown action " + act);
    }
    rules.push_back(rule);
  }
  return rules;
}

std::vector<AttackRule> load_attack_script(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ScriptError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_attack_script(buf.str());
}

namespace {

void apply_action(sim::Machine& m, const AttackAction& a) {
  switch (a.kind) {
    case AttackAction::Kind::Write8:
      m.external_store(a.addr, a.value, 1);
      break;
    case AttackAction::Kind::Write16:
      m.external_store(a.addr, a.value, 2);
      break;
    case AttackAction::Kind::Write32:
      m.external_store(a.addr, a.value, 4);
      break;
    case AttackAction::Kind::SetReg:
      m.set_reg(a.reg, a.value);
      break;
    case AttackAction::Kind::RaiseIrq:
      m.raise_exception(sim::EXC_IRQ_BASE + a.value);
      break;
  }
}

}  // namespace

Session run_image(const image::FirmwareImage& img, const RunOptions& opts) {
  Session s;
  s.machine = std::make_unique<sim::Machine>(img.manifest, img.sections);
  if (img.manifest.instrumented()) {
    s.monitor = std::make_unique<monitor::BranchMonitor>(*s.machine,
                                                         opts.monitor);
    s.report.monitored = true;
  }
  if (opts.trace) {
    s.machine->trace_hook = [&s](const sim::TraceEntry& e) {
      s.report.trace.push_back(e);
    };
  }

  struct Armed {
    AttackRule rule;
    uint32_t pc = 0;
    bool fired = false;
  };
  std::vector<Armed> armed;
  for (const auto& r : opts.attacks) {
    Armed a{r, r.pc, false};
    if (r.trigger == AttackRule::Trigger::AtSymbol) {
      auto addr = img.manifest.symbol_addr(r.symbol);
      if (!addr) throw ScriptError("unknown symbol " + r.symbol);
      a.pc = *addr;
    }
    armed.push_back(a);
  }

  sim::Machine& m = *s.machine;
  while (m.running() && m.state().cycles < opts.max_cycles) {
    for (auto& a : armed) {
      if (a.fired) continue;
      bool hit = false;
      switch (a.rule.trigger) {
        case AttackRule::Trigger::AtCycle:
          hit = m.state().cycles >= a.rule.cycle;
          break;
        case AttackRule::Trigger::AtPc:
        case AttackRule::Trigger::AtSymbol:
          hit = (m.state().pc | 1u) == (a.pc | 1u);
          break;
      }
      if (hit) {
        a.fired = true;
        apply_action(m, a.rule.action);
      }
    }
    if (!m.running()) break;
    m.step();
  }

  auto& rep = s.report;
  rep.cycles = m.state().cycles;
  rep.output = m.output_log();
  rep.fault = m.state().fault;
  rep.fault_detail = m.state().fault_detail;
  if (s.monitor) {
    rep.stats = s.monitor->stats();
    rep.violation = s.monitor->violation();
  }
  if (m.violation_halt()) {
    rep.outcome = Outcome::CfiViolation;
  } else if (m.state().fault != sim::Fault::None) {
    rep.outcome = Outcome::Fault;
  } else if (m.state().halted) {
    rep.outcome = Outcome::Completed;
  } else {
    rep.outcome = Outcome::BudgetExhausted;
  }
  return s;
}

std::vector<MemMismatch> compare_memory(const sim::Machine& baseline,
                                        const sim::Machine& candidate,
                                        size_t limit) {
  std::vector<MemMismatch> diffs;
  uint32_t sp_a = baseline.active_sp();
  uint32_t sp_b = candidate.active_sp();
  uint32_t live_from = std::max(sp_a, sp_b);

  for (const auto& r : baseline.manifest().regions) {
    if (r.security != image::RegionSecurity::NonSecure) continue;
    if (!(r.perms & image::PERM_W)) continue;
    uint32_t start = r.base;
    // sp sits at region end when the stack is empty
    auto holds_sp = [&r](uint32_t sp) { return sp >= r.base && sp <= r.end(); };
    bool is_stack = holds_sp(sp_a) || holds_sp(sp_b);
    if (is_stack) start = std::max(start, live_from);
    for (uint32_t a = start; a < r.end(); ++a) {
      uint8_t va = baseline.memory().raw_read8(a);
      uint8_t vb = candidate.memory().raw_read8(a);
      if (va != vb) {
        diffs.push_back({a, va, vb});
        if (diffs.size() >= limit) return diffs;
      }
    }
  }
  return diffs;
}

BenchResult bench_image(const image::FirmwareImage& baseline,
                        uint64_t max_cycles) {
  auto instrumented = rewrite::instrument_image(baseline);

  RunOptions opts;
  opts.max_cycles = max_cycles;
  auto base = run_image(baseline, opts);
  auto inst = run_image(instrumented.image, opts);
  if (base.report.outcome != Outcome::Completed)
    throw std::runtime_error(std::string("baseline run ") +
                             outcome_name(base.report.outcome));
  if (inst.report.outcome != Outcome::Completed)
    throw std::runtime_error(std::string("instrumented run ") +
                             outcome_name(inst.report.outcome));

  BenchResult r;
  r.report = instrumented.report;
  r.baseline_cycles = base.report.cycles;
  r.instrumented_cycles = inst.report.cycles;
  return r;
}

}  // namespace cfikit::harness
