#pragma once

#include "imtk/elf_inspector.hpp"
#include "imtk/graph.hpp"
#include "imtk/process_collector.hpp"

#include <map>
#include <mutex>

namespace imtk::elf {

/// Dependency closures shared across processes, keyed by object path.
class ClosureCache {
public:
  explicit ClosureCache(SearchConfig config = {}) : config_(std::move(config)) {}
  DependencyClosure get(const ElfSummary& summary);

private:
  SearchConfig config_;
  std::mutex mutex_;
  std::map<std::string, DependencyClosure> closures_;
};

struct ElfCollectOptions {
  Scope scope;
  std::optional<std::set<std::int64_t>> pids;
  std::filesystem::path proc_root = "/proc";
  std::optional<std::int64_t> collector_pid; // see ProcessOptions
  SearchConfig search;
  unsigned workers = 4;
  bool region_hashes = true;
  bool got_tables = true;
};

/// Adds, for one process: dependency-closure attributes on the Process node,
/// digest attributes on its executable MemoryMapping nodes and one GotTable
/// node per mapped object with jump slots.
void measure_process_elf(MeasurementGraph& graph, const process::ProcessRecord& record, ElfCache& objects,
                         ClosureCache& closures, const ElfCollectOptions& options);

void collect_elf(MeasurementGraph& graph, const ElfCollectOptions& options);

} // namespace imtk::elf
