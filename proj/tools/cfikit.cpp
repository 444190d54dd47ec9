#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cfikit/assembler.hpp"
#include "cfikit/harness.hpp"
#include "cfikit/image.hpp"
#include "cfikit/monitor.hpp"
#include "cfikit/rewriter.hpp"

namespace fs = std::filesystem;
using namespace cfikit;

namespace {

image::FirmwareImage load_image(const std::string& img_path,
                                const std::string& manifest_path) {
  image::FirmwareImage img;
  img.sections = image::FirmwareImage::load_sections(img_path);
  img.manifest = image::Manifest::load(manifest_path);
  return img;
}

void save_image(const image::FirmwareImage& img, const std::string& prefix) {
  image::FirmwareImage::save_sections(img.sections, prefix + ".img");
  img.manifest.save(prefix + ".manifest");
}

std::vector<harness::AttackRule> load_rules(const std::vector<std::string>& specs) {
  std::vector<harness::AttackRule> rules;
  for (const auto& s : specs) {
    auto part = fs::exists(s) ? harness::load_attack_script(s)
                              : harness::parse_attack_script(s);
    rules.insert(rules.end(), part.begin(), part.end());
  }
  return rules;
}

void write_sidecar(const std::string& path, const std::string& body) {
  if (path.empty()) return;
  std::ofstream out(path, std::ios::binary);
  out << body;
}

std::string run_report_lines(const harness::RunReport& r) {
  std::ostringstream o;
  o << "outcome " << harness::outcome_name(r.outcome) << "\n";
  o << "cycles " << r.cycles << "\n";
  o << "traps " << r.stats.traps << "\n";
  o << "shadow-max-depth " << r.stats.shadow_max_depth << "\n";
  o << "output";
  for (uint32_t v : r.output) {
    char buf[16];
    std::snprintf(buf, sizeof buf, " 0x%x", v);
    o << buf;
  }
  o << "\n";
  if (r.fault != sim::Fault::None)
    o << "fault " << sim::fault_name(r.fault) << "\n";
  if (r.violation) {
    o << "violation " << rewrite::dispatch_class_name(r.violation->cls)
      << " site 0x" << std::hex << r.violation->site << " expected 0x"
      << r.violation->expected << " observed 0x" << r.violation->observed
      << std::dec << "\n";
  }
  return o.str();
}

int cmd_asm(const std::string& src, const std::string& out) {
  auto img = assembler::assemble_file(src);
  save_image(img, out);
  std::cout << "wrote " << out << ".img (" << img.total_bytes()
            << " bytes), " << out << ".manifest\n";
  return 0;
}

int cmd_instrument(const std::string& img_path, const std::string& man_path,
                   const std::string& out, const std::string& report_path) {
  auto img = load_image(img_path, man_path);
  auto result = rewrite::instrument_image(img);
  save_image(result.image, out);

  const auto& rep = result.report;
  std::ostringstream o;
  o << "instructions " << rep.total_instructions << "\n"
    << "rewritten-sites " << rep.rewritten_sites << "\n"
    << "direct-call-sites " << rep.direct_call_sites << "\n"
    << "indirect-call-sites " << rep.indirect_call_sites << "\n"
    << "return-sites " << rep.return_sites << "\n"
    << "vectors-rewritten " << rep.vectors_rewritten << "\n"
    << "ratio " << rep.ratio() << "\n"
    << "branch-table-bytes " << rep.branch_table_bytes << "\n"
    << "call-target-table-bytes " << rep.call_target_table_bytes << "\n"
    << "dispatch-table-bytes " << rep.dispatch_table_bytes << "\n"
    << "trampoline-bytes " << rep.trampoline_bytes << "\n";
  std::cout << o.str();
  write_sidecar(report_path, o.str());
  return 0;
}

int cmd_run(const std::string& img_path, const std::string& man_path,
            const std::vector<std::string>& attacks,
            const std::vector<std::string>& irqs, uint64_t max_cycles,
            bool trace, const std::string& report_path) {
  auto img = load_image(img_path, man_path);
  harness::RunOptions opts;
  opts.max_cycles = max_cycles;
  opts.trace = trace;
  auto rules = load_rules(attacks);
  auto irq_rules = load_rules(irqs);
  rules.insert(rules.end(), irq_rules.begin(), irq_rules.end());
  opts.attacks = rules;

  auto session = harness::run_image(img, opts);
  const auto& r = session.report;
  if (trace) {
    for (const auto& t : r.trace)
      std::fprintf(stderr, "%8llu %c%c %08x  %s\n",
                   static_cast<unsigned long long>(t.cycle),
                   t.security == sim::Security::Secure ? 'S' : 'N',
                   t.mode == sim::Mode::Handler ? 'H' : 'T', t.pc,
                   t.disasm.c_str());
  }
  std::cout << run_report_lines(r);
  if (r.violation) std::cerr << r.violation->detail << "\n";
  if (r.outcome == harness::Outcome::Fault)
    std::cerr << r.fault_detail << "\n";
  write_sidecar(report_path, run_report_lines(r));
  return harness::outcome_exit_code(r.outcome);
}

int cmd_bench(const std::string& dir, uint64_t max_cycles,
              const std::string& report_path) {
  std::vector<fs::path> sources;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".s") sources.push_back(e.path());
  std::sort(sources.begin(), sources.end());
  if (sources.empty()) {
    std::cerr << "no .s fixtures in " << dir << "\n";
    return 1;
  }

  std::printf("%-20s %8s %8s %10s %10s %9s\n", "program", "traps", "ratio",
              "cycles", "cycles'", "overhead");
  std::ostringstream sidecar;
  for (const auto& src : sources) {
    auto img = assembler::assemble_file(src.string());
    auto b = harness::bench_image(img, max_cycles);

    harness::RunOptions opts;
    opts.max_cycles = max_cycles;
    auto instrumented = rewrite::instrument_image(img);
    auto session = harness::run_image(instrumented.image, opts);
    uint64_t traps = session.report.stats.traps;

    std::printf("%-20s %8llu %8.4f %10llu %10llu %8.1f%%\n",
                src.stem().string().c_str(),
                static_cast<unsigned long long>(traps), b.report.ratio(),
                static_cast<unsigned long long>(b.baseline_cycles),
                static_cast<unsigned long long>(b.instrumented_cycles),
                100.0 * b.overhead());
    sidecar << "bench " << src.stem().string() << " " << traps << " "
            << b.report.ratio() << " " << b.baseline_cycles << " "
            << b.instrumented_cycles << " " << b.overhead() << "\n";
  }
  write_sidecar(report_path, sidecar.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"firmware instrumentation and control-flow supervision kit"};
  app.require_subcommand(1);

  std::string src, out = "out", img_path, man_path, report_path, suite_dir;
  std::vector<std::string> attacks, irqs;
  uint64_t max_cycles = 1000000;
  bool trace = false;

  auto* a = app.add_subcommand("asm", "assemble a source file");
  a->add_option("source", src)->required();
  a->add_option("-o,--out", out, "output prefix");

  auto* i = app.add_subcommand("instrument", "rewrite an image");
  i->add_option("image", img_path)->required();
  i->add_option("manifest", man_path)->required();
  i->add_option("-o,--out", out, "output prefix");
  i->add_option("--report", report_path, "report sidecar path");

  auto* r = app.add_subcommand("run", "execute an image");
  r->add_option("image", img_path)->required();
  r->add_option("manifest", man_path)->required();
  r->add_option("--attack", attacks, "attack script (file or inline)");
  r->add_option("--irq", irqs, "interrupt schedule (file or inline)");
  r->add_option("--max-cycles", max_cycles);
  r->add_flag("--trace", trace);
  r->add_option("--report", report_path, "report sidecar path");

  auto* b = app.add_subcommand("bench", "benchmark a fixture directory");
  b->add_option("suite", suite_dir)->required();
  b->add_option("--max-cycles", max_cycles);
  b->add_option("--report", report_path, "report sidecar path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (a->parsed()) return cmd_asm(src, out);
    if (i->parsed()) return cmd_instrument(img_path, man_path, out, report_path);
    if (r->parsed())
      return cmd_run(img_path, man_path, attacks, irqs, max_cycles, trace,
                     report_path);
    if (b->parsed()) return cmd_bench(suite_dir, max_cycles, report_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
