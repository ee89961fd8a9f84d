#pragma once

#include "imtk/graph.hpp"
#include "imtk/procfs.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace imtk::process {

struct ProcessRecord {
  NodeId id;
  std::int64_t pid = 0;
  std::int64_t ppid = 0;
  std::int64_t uid = -1;
  std::int64_t euid = -1;
  std::int64_t gid = -1;
  std::int64_t start_time = 0;
  std::string comm;
  char state = '?';
  std::vector<std::string> cmdline;
  std::optional<std::string> exe_path;
  std::uint64_t exe_device = 0; // raw st_dev
  std::uint64_t exe_inode = 0;
  bool kernel_thread = false;
  /// Some /proc entry could not be read (permission or a race).
  bool partial = false;
};

/// Identity-only attributes of a process node.
Attributes process_identity(std::int64_t pid, std::int64_t start_time);

/// Numeric entries of /proc. Throws Error(ProcUnavailable).
std::vector<std::int64_t> list_pids(const std::filesystem::path& proc_root = "/proc");

/// Reads stat, status, cmdline and exe. Throws Error(Vanished) when the
/// process is gone; other unreadable entries set `partial`.
ProcessRecord read_process(std::int64_t pid, const std::filesystem::path& proc_root = "/proc");

/// Target of <proc_root>/<pid>/exe without the " (deleted)" suffix.
std::optional<std::string> read_exe_path(std::int64_t pid, const std::filesystem::path& proc_root = "/proc");

/// Whether `record` is `collector_pid` or a worker forked from it.
bool is_collector_process(const ProcessRecord& record, std::int64_t collector_pid,
                          const std::optional<std::string>& collector_exe);

struct ProcessOptions {
  Scope scope;
  /// Restrict the walk to these pids (tests).
  std::optional<std::set<std::int64_t>> pids;
  std::filesystem::path proc_root = "/proc";
  /// Skip this pid and those of its direct children that run the same
  /// executable (the collector and its forked module workers).
  std::optional<std::int64_t> collector_pid;
  bool mappings = true;
  bool namespaces = true;
  bool fds = true;
  unsigned workers = 4;
  /// Runs between listing /proc and reading the entries (tests).
  std::function<void(const std::vector<std::int64_t>&)> after_listing;
};

/// Process nodes for the admitted pids, `runs` edges to the executable and
/// `parent_of` edges between processes of the snapshot. Vanished pids are
/// counted in meta counter "processes.vanished".
std::vector<ProcessRecord> snapshot_processes(MeasurementGraph& graph, const ProcessOptions& options);

/// MemoryMapping nodes with `maps` edges and, for file-backed ones,
/// FileRegion/File linkage. Unreadable maps mark the process partial.
std::vector<procfs::MapsEntry> collect_mappings(MeasurementGraph& graph, ProcessRecord& record,
                                                const std::filesystem::path& proc_root = "/proc");

struct NamespaceRecord {
  std::string ns_type;
  std::uint64_t inode = 0;
  std::vector<std::int64_t> member_pids;
};

inline constexpr std::string_view kNamespaceTypes[] = {"pid", "mnt", "net", "uts", "ipc", "user", "cgroup"};

std::vector<NamespaceRecord> collect_namespaces(MeasurementGraph& graph, std::vector<ProcessRecord>& records,
                                                const std::filesystem::path& proc_root = "/proc");

/// Socket tables of one network namespace, keyed by socket inode.
using SocketTable = std::map<std::uint64_t, procfs::SocketEntry>;

/// Reads <proc_root>/<pid>/net/{tcp,tcp6,udp,udp6,unix}.
SocketTable read_socket_table(std::int64_t pid, const std::filesystem::path& proc_root = "/proc");

struct FdRecord {
  std::int64_t fd = 0;
  std::string kind; // regular, directory, socket, pipe, device, anon, unknown
  std::string target;
  std::optional<procfs::SocketEntry> socket;
};

/// FileDescriptor nodes with `holds` edges and `refers_to` edges to File or
/// Socket nodes. Descriptors closed mid-walk are skipped.
std::vector<FdRecord> collect_fds(MeasurementGraph& graph, ProcessRecord& record, const SocketTable& sockets,
                                  const std::filesystem::path& proc_root = "/proc");

/// Everything above for the configured scope, per-pid work spread over
/// `options.workers` threads whose partial graphs are merged.
std::vector<ProcessRecord> collect_processes(MeasurementGraph& graph, const ProcessOptions& options);

} // namespace imtk::process
