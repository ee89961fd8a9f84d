#pragma once

#include "imtk/graph.hpp"

#include <filesystem>
#include <optional>
#include <set>
#include <string>

namespace imtk {

enum class Module { system, hashes, processes, elf };

std::string_view to_string(Module module) noexcept;
/// Comma-separated module names. Throws std::invalid_argument.
std::set<Module> parse_modules(std::string_view list);

struct CollectConfig {
  Scope scope;
  std::set<Module> modules = {Module::system, Module::hashes, Module::processes, Module::elf};
  std::optional<std::filesystem::path> manifest; // default manifest when absent
  std::optional<std::set<std::int64_t>> pids;    // restrict process modules (tests)
  unsigned workers = 4;
  bool isolate = true;      // one subprocess per module
  bool exclude_self = true; // leave the collector's own processes out
};

inline constexpr std::string_view kCollectorVersion = IMTK_VERSION;

/// Meta shared by every partial graph of one snapshot.
SnapshotMeta new_snapshot_meta(const Scope& scope, std::string hash_algorithm = "sha256");

/// Runs one module in the calling process. `collector_pid` is the process
/// tree excluded when `config.exclude_self` is set.
MeasurementGraph run_module(Module module, const SnapshotMeta& meta, const CollectConfig& config,
                            std::int64_t collector_pid);

/// Runs the selected modules (each in its own subprocess unless
/// `config.isolate` is false) and merges their partial graphs.
/// Throws Error(ProcUnavailable) when /proc cannot be listed and
/// Error(IoError) when a module subprocess fails.
MeasurementGraph collect(const CollectConfig& config);

} // namespace imtk
