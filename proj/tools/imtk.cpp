// imtk: collect measurement bundles, appraise them, diff them.
//
// Exit status: 0 pass, 1 alerts present, 2 operational error.

#include "imtk/appraiser.hpp"
#include "imtk/collect.hpp"
#include "imtk/diff.hpp"
#include "imtk/error.hpp"
#include "imtk/procfs.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

constexpr int kExitPass = 0;
constexpr int kExitAlerts = 1;
constexpr int kExitError = 2;

imtk::MeasurementGraph load_bundle(const std::string& path) {
  return imtk::deserialize(imtk::procfs::read_file(path));
}

void write_output(const std::string& path, const std::string& bytes) {
  if (path.empty() || path == "-") {
    std::cout << bytes << std::flush;
    if (!std::cout) throw imtk::Error(imtk::ErrorCode::IoError, "stdout: write failed");
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw imtk::Error(imtk::ErrorCode::IoError, path + ": cannot open for writing");
  out << bytes;
  out.close();
  if (!out) throw imtk::Error(imtk::ErrorCode::IoError, path + ": write failed");
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"userspace integrity measurement: collect, appraise, diff"};
  app.require_subcommand(1);

  std::string scope = "root";
  std::string out_path = "-";
  std::string modules = "system,hashes,processes,elf";
  std::string manifest;
  auto* collect = app.add_subcommand("collect", "snapshot this host into a bundle");
  collect->add_option("--scope", scope, "root | all | uid:<n>[,<n>]")->capture_default_str();
  collect->add_option("--out", out_path, "bundle path, '-' for stdout")->capture_default_str();
  collect->add_option("--modules", modules, "comma-separated: system,hashes,processes,elf")->capture_default_str();
  collect->add_option("--manifest", manifest, "file-hash manifest, one pattern per line");

  std::string snapshot;
  std::string previous;
  std::string policy_path;
  std::string format = "text";
  auto* appraise = app.add_subcommand("appraise", "evaluate a bundle against a policy");
  appraise->add_option("--snapshot", snapshot, "current bundle")->required();
  appraise->add_option("--previous", previous, "earlier bundle of the same host (enables rules 7 and 8)");
  appraise->add_option("--policy", policy_path, "policy document")->required();
  appraise->add_option("--format", format, "text | machine")
      ->check(CLI::IsMember({"text", "machine"}))
      ->capture_default_str();

  std::string bundle_a;
  std::string bundle_b;
  auto* diff = app.add_subcommand("diff", "structured difference between two bundles");
  diff->add_option("a", bundle_a, "older bundle")->required();
  diff->add_option("b", bundle_b, "newer bundle")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitPass : kExitError;
  }

  try {
    if (collect->parsed()) {
      imtk::CollectConfig config;
      config.scope = imtk::Scope::parse(scope);
      config.modules = imtk::parse_modules(modules);
      if (!manifest.empty()) config.manifest = manifest;
      const auto graph = imtk::collect(config);
      write_output(out_path, imtk::serialize_canonical(graph));
      return kExitPass;
    }
    if (appraise->parsed()) {
      const auto policy = imtk::appraise::load_policy(policy_path);
      const auto current = load_bundle(snapshot);
      std::optional<imtk::MeasurementGraph> earlier;
      if (!previous.empty()) earlier = load_bundle(previous);
      const auto report = imtk::appraise::appraise(current, earlier ? &*earlier : nullptr, policy);
      std::cout << (format == "machine" ? imtk::appraise::render_machine(report) : imtk::appraise::render_text(report))
                << std::flush;
      return report.pass ? kExitPass : kExitAlerts;
    }
    if (diff->parsed()) {
      std::cout << imtk::render_diff(imtk::diff_graphs(load_bundle(bundle_a), load_bundle(bundle_b))) << std::flush;
      return kExitPass;
    }
  } catch (const std::exception& e) {
    std::cerr << "imtk: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
