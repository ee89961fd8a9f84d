#include "imtk/elf_collector.hpp"

#include "imtk/error.hpp"

#include <sys/sysmacros.h>

#include <atomic>
#include <thread>

namespace imtk::elf {

namespace fs = std::filesystem;

DependencyClosure ClosureCache::get(const ElfSummary& summary) {
  {
    std::lock_guard lock(mutex_);
    if (auto it = closures_.find(summary.path); it != closures_.end()) return it->second;
  }
  DependencyClosure closure = resolve_dependency_closure(summary, config_);
  std::lock_guard lock(mutex_);
  return closures_.emplace(summary.path, std::move(closure)).first->second;
}

namespace {

std::vector<Address> addresses(const std::vector<std::uint64_t>& values) {
  std::vector<Address> out;
  out.reserve(values.size());
  for (auto v : values) out.push_back(Address{v});
  return out;
}

void got_table_node(MeasurementGraph& graph, const NodeId& process, const GotTable& table) {
  std::vector<std::string> symbols, classes, targets;
  std::vector<std::uint64_t> slot_vaddrs, slots, values, faults;
  std::vector<std::int64_t> offsets;
  for (const auto& e : table.entries) {
    symbols.push_back(sanitize_utf8(e.symbol_name));
    slot_vaddrs.push_back(e.slot_vaddr);
    slots.push_back(e.slot_addr);
    values.push_back(e.stored_value);
    classes.emplace_back(to_string(e.classification));
    targets.push_back(sanitize_utf8(e.target_module));
    offsets.push_back(e.target_offset);
    if (e.read_fault) faults.push_back(e.slot_addr);
  }
  Attributes a{
      {"process", process.value},
      {"object", sanitize_utf8(table.object)},
      {"load_base_addr", Address{table.load_base}},
      {"relro", table.relro},
      {"bind_now", table.bind_now},
      {"symbols", std::move(symbols)},
      {"slot_vaddr_addrs", addresses(slot_vaddrs)},
      {"slot_addrs", addresses(slots)},
      {"value_addrs", addresses(values)},
      {"classes", std::move(classes)},
      {"targets", std::move(targets)},
      {"target_offsets", std::move(offsets)},
  };
  if (!faults.empty()) a["unreadable_slot_addrs"] = addresses(faults);
  graph.upsert_node(NodeKind::GotTable, std::move(a));
}

} // namespace

void measure_process_elf(MeasurementGraph& graph, const process::ProcessRecord& record, ElfCache& objects,
                         ClosureCache& closures, const ElfCollectOptions& options) {
  if (record.kernel_thread || record.state == 'Z') return;
  const fs::path dir = options.proc_root / std::to_string(record.pid);
  const NodeId pid_node =
      graph.upsert_node(NodeKind::Process, process::process_identity(record.pid, record.start_time));
  auto mark_partial = [&](const std::string& target, const Error& e) {
    graph.meta().add_error(target, std::string(to_string(e.code())));
    Attributes a = process::process_identity(record.pid, record.start_time);
    a["elf_partial"] = true;
    graph.upsert_node(NodeKind::Process, std::move(a));
  };

  std::vector<procfs::MapsEntry> maps;
  try {
    maps = procfs::parse_maps(procfs::read_file(dir / "maps"));
  } catch (const Error& e) {
    mark_partial((dir / "maps").string(), e);
    return;
  }

  std::set<std::string> exe_members;
  if (record.exe_path) {
    const std::string device = procfs::format_device(major(record.exe_device), minor(record.exe_device));
    auto obj = objects.get(dir / "exe", *record.exe_path, device, record.exe_inode);
    Attributes a = process::process_identity(record.pid, record.start_time);
    if (obj->summary) {
      DependencyClosure closure = closures.get(*obj->summary);
      exe_members.insert(*record.exe_path);
      exe_members.insert(closure.libraries.begin(), closure.libraries.end());
      a["elf_type"] = std::string(to_string(obj->summary->type));
      a["dep_closure"] = closure.libraries;
      a["dep_unresolved"] = closure.unresolved;
    } else {
      a["elf_error"] = sanitize_utf8(obj->error);
    }
    graph.upsert_node(NodeKind::Process, std::move(a));
  } else {
    Attributes a = process::process_identity(record.pid, record.start_time);
    a["elf_partial"] = true;
    graph.upsert_node(NodeKind::Process, std::move(a));
  }

  std::unique_ptr<ProcessMemory> memory;
  try {
    memory = std::make_unique<ProcessMemory>(record.pid);
  } catch (const Error& e) {
    mark_partial((dir / "mem").string(), e);
    return;
  }
  auto locate = proc_locator(record.pid);

  if (options.region_hashes) {
    for (const auto& r : read_exec_region_hashes(*memory, maps, objects, locate)) {
      Attributes a{
          {"process", pid_node.value},
          {"start_addr", Address{r.start}},
          {"comparable", r.comparable},
          {"hashed_len", static_cast<std::int64_t>(r.hashed_length)},
      };
      if (!r.observed_digest.empty()) a["observed_digest"] = r.observed_digest;
      if (r.expected_digest) a["expected_digest"] = *r.expected_digest;
      if (r.fault) a["region_fault"] = *r.fault;
      auto mid = graph.upsert_node(NodeKind::MemoryMapping, std::move(a));
      graph.add_edge(pid_node, EdgeLabel::maps, mid);
    }
  }

  if (options.got_tables) {
    std::set<std::string> done;
    for (const auto& m : maps) {
      if (!m.file_backed() || !done.insert(m.path).second) continue;
      auto obj = objects.get(locate(m), m.path, procfs::format_device(m.dev_major, m.dev_minor), m.inode);
      if (!obj->summary || obj->summary->jump_slot_relocs.empty()) continue;
      auto base = compute_load_base(*obj->summary, maps, m.path);
      if (!base) continue;
      std::set<std::string> members = exe_members;
      members.insert(m.path);
      DependencyClosure closure = closures.get(*obj->summary);
      members.insert(closure.libraries.begin(), closure.libraries.end());
      got_table_node(graph, pid_node, extract_got_entries(*memory, *obj->summary, *base, maps, members));
    }
  }
}

void collect_elf(MeasurementGraph& graph, const ElfCollectOptions& options) {
  auto pids = process::list_pids(options.proc_root);
  if (options.pids) std::erase_if(pids, [&](std::int64_t p) { return !options.pids->contains(p); });
  std::optional<std::string> collector_exe;
  if (options.collector_pid) collector_exe = process::read_exe_path(*options.collector_pid, options.proc_root);
  std::vector<process::ProcessRecord> records;
  for (auto pid : pids) {
    try {
      auto r = process::read_process(pid, options.proc_root);
      if (options.collector_pid && process::is_collector_process(r, *options.collector_pid, collector_exe)) continue;
      if (options.scope.admits(r.euid)) records.push_back(std::move(r));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::Vanished) throw;
    }
  }

  ElfCache objects(graph.meta().hash_algorithm);
  ClosureCache closures(options.search);
  const unsigned workers = std::max(1u, std::min<unsigned>(options.workers, records.size()));
  std::vector<MeasurementGraph> partials(workers, MeasurementGraph(graph.meta()));
  std::atomic<std::size_t> next{0};
  std::mutex failure_mutex;
  std::exception_ptr failure;
  std::vector<std::thread> threads;
  for (unsigned w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i; (i = next.fetch_add(1)) < records.size();) {
          measure_process_elf(partials[w], records[i], objects, closures, options);
        }
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
  for (const auto& p : partials) graph = merge(graph, p);
  graph.meta().bump("elf.objects_parsed", static_cast<std::int64_t>(objects.size()));
}

} // namespace imtk::elf
