#include "imtk/process_collector.hpp"

#include "imtk/error.hpp"
#include "imtk/system_collector.hpp"

#include <sys/stat.h>
#include <sys/sysmacros.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <charconv>
#include <mutex>
#include <thread>

namespace imtk::process {

namespace fs = std::filesystem;

namespace {

fs::path pid_dir(const fs::path& proc_root, std::int64_t pid) { return proc_root / std::to_string(pid); }

std::string strip_deleted(std::string path) {
  constexpr std::string_view suffix = " (deleted)";
  if (path.ends_with(suffix)) path.resize(path.size() - suffix.size());
  return path;
}

std::string code_name(const Error& e) { return std::string(to_string(e.code())); }

void mark_partial(MeasurementGraph& graph, ProcessRecord& record) {
  record.partial = true;
  graph.upsert_node(NodeKind::Process, [&] {
    Attributes a = process_identity(record.pid, record.start_time);
    a["partial"] = true;
    return a;
  }());
}

NodeId upsert_file(MeasurementGraph& graph, const std::string& path, std::uint64_t device, std::uint64_t inode) {
  return graph.upsert_node(NodeKind::File, system::file_identity(path, device, inode));
}

void record_process_node(MeasurementGraph& graph, ProcessRecord& r) {
  Attributes a = process_identity(r.pid, r.start_time);
  a["ppid"] = r.ppid;
  a["uid"] = r.uid;
  a["euid"] = r.euid;
  a["gid"] = r.gid;
  a["comm"] = sanitize_utf8(r.comm);
  a["state"] = std::string(1, r.state);
  std::vector<std::string> argv;
  for (const auto& arg : r.cmdline) argv.push_back(sanitize_utf8(arg));
  a["cmdline"] = std::move(argv);
  a["kernel_thread"] = r.kernel_thread;
  if (r.exe_path) a["exe_path"] = sanitize_utf8(*r.exe_path);
  if (r.partial) a["partial"] = true;
  r.id = graph.upsert_node(NodeKind::Process, std::move(a));
  if (r.exe_path && r.exe_inode != 0) {
    graph.add_edge(r.id, EdgeLabel::runs, upsert_file(graph, *r.exe_path, r.exe_device, r.exe_inode));
  }
}

void add_parent_edges(MeasurementGraph& graph, const std::vector<ProcessRecord>& records) {
  std::map<std::int64_t, const ProcessRecord*> by_pid;
  for (const auto& r : records) by_pid[r.pid] = &r;
  for (const auto& r : records) {
    auto it = by_pid.find(r.ppid);
    if (r.ppid > 0 && it != by_pid.end()) graph.add_edge(it->second->id, EdgeLabel::parent_of, r.id);
  }
}

struct Listing {
  std::vector<ProcessRecord> records;
  std::int64_t vanished = 0;
};

Listing read_admitted(const ProcessOptions& options) {
  auto pids = list_pids(options.proc_root);
  if (options.pids) {
    std::erase_if(pids, [&](std::int64_t p) { return !options.pids->contains(p); });
  }
  if (options.after_listing) options.after_listing(pids);
  std::optional<std::string> collector_exe;
  if (options.collector_pid) collector_exe = read_exe_path(*options.collector_pid, options.proc_root);
  Listing out;
  for (auto pid : pids) {
    try {
      ProcessRecord r = read_process(pid, options.proc_root);
      if (options.collector_pid && is_collector_process(r, *options.collector_pid, collector_exe)) continue;
      if (options.scope.admits(r.euid)) out.records.push_back(std::move(r));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::Vanished) throw;
      ++out.vanished;
    }
  }
  return out;
}

} // namespace

Attributes process_identity(std::int64_t pid, std::int64_t start_time) {
  return {{"pid", pid}, {"start_time", start_time}};
}

std::optional<std::string> read_exe_path(std::int64_t pid, const fs::path& proc_root) {
  try {
    return strip_deleted(procfs::read_link(pid_dir(proc_root, pid) / "exe"));
  } catch (const Error&) {
    return std::nullopt;
  }
}

bool is_collector_process(const ProcessRecord& record, std::int64_t collector_pid,
                          const std::optional<std::string>& collector_exe) {
  if (record.pid == collector_pid) return true;
  return record.ppid == collector_pid && collector_exe && record.exe_path == collector_exe;
}

std::vector<std::int64_t> list_pids(const fs::path& proc_root) {
  std::error_code ec;
  fs::directory_iterator it(proc_root, ec);
  if (ec) throw Error(ErrorCode::ProcUnavailable, proc_root.string() + ": " + ec.message());
  std::vector<std::int64_t> pids;
  for (const auto& entry : it) {
    const std::string name = entry.path().filename().string();
    std::int64_t pid = 0;
    auto [ptr, err] = std::from_chars(name.data(), name.data() + name.size(), pid);
    if (err == std::errc{} && ptr == name.data() + name.size() && pid > 0) pids.push_back(pid);
  }
  if (pids.empty()) throw Error(ErrorCode::ProcUnavailable, proc_root.string() + ": no processes listed");
  std::sort(pids.begin(), pids.end());
  return pids;
}

ProcessRecord read_process(std::int64_t pid, const fs::path& proc_root) {
  const fs::path dir = pid_dir(proc_root, pid);
  auto gone = [&](const Error& e) {
    return e.code() == ErrorCode::NotFound || e.code() == ErrorCode::Vanished;
  };
  ProcessRecord r;
  r.pid = pid;
  try {
    auto stat = procfs::parse_stat(procfs::read_file(dir / "stat"));
    if (!stat) throw Error(ErrorCode::Vanished, dir.string() + "/stat unparsable");
    r.ppid = stat->ppid;
    r.comm = stat->comm;
    r.state = stat->state;
    r.start_time = stat->start_time;
    r.kernel_thread = (stat->flags & procfs::kPfKthread) != 0;
    auto ids = procfs::parse_status(procfs::read_file(dir / "status"));
    if (!ids) throw Error(ErrorCode::Vanished, dir.string() + "/status unparsable");
    r.uid = ids->uid;
    r.euid = ids->euid;
    r.gid = ids->gid;
  } catch (const Error& e) {
    if (gone(e)) throw Error(ErrorCode::Vanished, "pid " + std::to_string(pid));
    throw;
  }
  try {
    r.cmdline = procfs::split_cmdline(procfs::read_file(dir / "cmdline"));
  } catch (const Error& e) {
    if (gone(e)) throw Error(ErrorCode::Vanished, "pid " + std::to_string(pid));
    r.partial = true;
  }
  if (!r.kernel_thread && r.state != 'Z') {
    try {
      r.exe_path = strip_deleted(procfs::read_link(dir / "exe"));
      struct stat st {};
      if (::stat((dir / "exe").c_str(), &st) == 0) {
        r.exe_device = st.st_dev;
        r.exe_inode = st.st_ino;
      }
    } catch (const Error& e) {
      r.partial = true;
    }
  }
  return r;
}

std::vector<ProcessRecord> snapshot_processes(MeasurementGraph& graph, const ProcessOptions& options) {
  Listing listing = read_admitted(options);
  for (auto& r : listing.records) record_process_node(graph, r);
  add_parent_edges(graph, listing.records);
  graph.meta().bump("processes.measured", static_cast<std::int64_t>(listing.records.size()));
  graph.meta().bump("processes.vanished", listing.vanished);
  return std::move(listing.records);
}

std::vector<procfs::MapsEntry> collect_mappings(MeasurementGraph& graph, ProcessRecord& record,
                                                const fs::path& proc_root) {
  if (record.kernel_thread) return {};
  const fs::path maps_path = pid_dir(proc_root, record.pid) / "maps";
  std::vector<procfs::MapsEntry> maps;
  try {
    maps = procfs::parse_maps(procfs::read_file(maps_path));
  } catch (const Error& e) {
    graph.meta().add_error(maps_path.string(), code_name(e));
    mark_partial(graph, record);
    return {};
  }
  for (const auto& m : maps) {
    Attributes a{
        {"process", record.id.value},
        {"start_addr", Address{m.start}},
        {"end_addr", Address{m.end}},
        {"perms", m.perms},
        {"offset", static_cast<std::int64_t>(m.offset)},
        {"device", procfs::format_device(m.dev_major, m.dev_minor)},
        {"inode", static_cast<std::int64_t>(m.inode)},
        {"backing", std::string(m.file_backed() ? "file" : m.pseudo() ? "pseudo" : "anon")},
    };
    if (!m.path.empty()) a["path"] = sanitize_utf8(m.path);
    if (m.deleted) a["deleted"] = true;
    auto mid = graph.upsert_node(NodeKind::MemoryMapping, std::move(a));
    graph.add_edge(record.id, EdgeLabel::maps, mid);
    if (m.file_backed()) {
      auto fid = upsert_file(graph, m.path, makedev(m.dev_major, m.dev_minor), m.inode);
      auto rid = graph.upsert_node(NodeKind::FileRegion, {{"file", fid.value},
                                                          {"offset", static_cast<std::int64_t>(m.offset)},
                                                          {"length", static_cast<std::int64_t>(m.end - m.start)},
                                                          {"perms", m.perms}});
      graph.add_edge(mid, EdgeLabel::backed_by, rid);
      graph.add_edge(rid, EdgeLabel::region_of, fid);
    }
  }
  return maps;
}

std::vector<NamespaceRecord> collect_namespaces(MeasurementGraph& graph, std::vector<ProcessRecord>& records,
                                                const fs::path& proc_root) {
  std::map<std::pair<std::string, std::uint64_t>, std::vector<std::int64_t>> members;
  for (auto& r : records) {
    for (auto type : kNamespaceTypes) {
      const fs::path link = pid_dir(proc_root, r.pid) / "ns" / std::string(type);
      std::optional<procfs::NsLink> ns;
      try {
        ns = procfs::parse_ns_link(procfs::read_link(link));
      } catch (const Error& e) {
        if (e.code() == ErrorCode::NotFound) continue;
        graph.meta().add_error(link.string(), code_name(e));
        mark_partial(graph, r);
        continue;
      }
      if (!ns || ns->inode == 0) continue;
      auto nid = graph.upsert_node(NodeKind::Namespace,
                                   {{"ns_type", ns->type}, {"inode", static_cast<std::int64_t>(ns->inode)}});
      graph.add_edge(r.id, EdgeLabel::member_of, nid);
      members[{ns->type, ns->inode}].push_back(r.pid);
    }
  }
  std::vector<NamespaceRecord> out;
  for (auto& [key, pids] : members) out.push_back({key.first, key.second, std::move(pids)});
  return out;
}

SocketTable read_socket_table(std::int64_t pid, const fs::path& proc_root) {
  const fs::path net = pid_dir(proc_root, pid) / "net";
  SocketTable table;
  auto add = [&](std::vector<procfs::SocketEntry> entries) {
    for (auto& e : entries) {
      if (e.inode != 0) table.emplace(e.inode, std::move(e));
    }
  };
  struct Source {
    const char* file;
    const char* protocol;
    bool ipv6;
  };
  for (const Source& s : {Source{"tcp", "tcp", false}, Source{"tcp6", "tcp", true}, Source{"udp", "udp", false},
                          Source{"udp6", "udp", true}}) {
    try {
      add(procfs::parse_inet_table(procfs::read_file(net / s.file), s.protocol, s.ipv6));
    } catch (const Error&) {
    }
  }
  try {
    add(procfs::parse_unix_table(procfs::read_file(net / "unix")));
  } catch (const Error&) {
  }
  return table;
}

std::vector<FdRecord> collect_fds(MeasurementGraph& graph, ProcessRecord& record, const SocketTable& sockets,
                                  const fs::path& proc_root) {
  const fs::path dir = pid_dir(proc_root, record.pid);
  std::vector<std::int64_t> fds;
  {
    std::error_code ec;
    fs::directory_iterator it(dir / "fd", ec);
    if (ec) {
      if (ec.value() != ENOENT) {
        graph.meta().add_error((dir / "fd").string(), std::string(to_string(errno_to_code(ec.value()))));
        mark_partial(graph, record);
      }
      return {};
    }
    for (const auto& entry : it) {
      std::int64_t fd = -1;
      const std::string name = entry.path().filename().string();
      auto [ptr, err] = std::from_chars(name.data(), name.data() + name.size(), fd);
      if (err == std::errc{} && fd >= 0) fds.push_back(fd);
    }
  }
  std::sort(fds.begin(), fds.end());

  std::vector<FdRecord> out;
  for (auto fd : fds) {
    const fs::path fd_path = dir / "fd" / std::to_string(fd);
    FdRecord rec;
    rec.fd = fd;
    try {
      rec.target = procfs::read_link(fd_path);
    } catch (const Error&) {
      continue; // closed mid-walk
    }
    std::optional<std::int64_t> flags;
    try {
      std::string info = procfs::read_file(dir / "fdinfo" / std::to_string(fd));
      if (auto at = info.find("flags:"); at != std::string::npos) {
        auto begin = info.find_first_not_of(" \t", at + 6);
        std::int64_t v = 0;
        if (begin != std::string::npos &&
            std::from_chars(info.data() + begin, info.data() + info.size(), v, 8).ec == std::errc{}) {
          flags = v;
        }
      }
    } catch (const Error&) {
    }

    std::optional<NodeId> target_node;
    if (auto inode = procfs::parse_bracket_inode(rec.target, "socket:")) {
      rec.kind = "socket";
      Attributes s{{"inode", static_cast<std::int64_t>(*inode)}};
      if (auto it = sockets.find(*inode); it != sockets.end()) {
        rec.socket = it->second;
        const auto& e = it->second;
        s["family"] = e.family;
        s["protocol"] = e.protocol;
        s["state"] = e.state;
        if (e.family != "unix") {
          s["local_ip"] = e.local_ip;
          s["local_port"] = e.local_port;
          s["remote_ip"] = e.remote_ip;
          s["remote_port"] = e.remote_port;
        } else if (!e.unix_path.empty()) {
          s["unix_path"] = sanitize_utf8(e.unix_path);
        }
      } else {
        procfs::SocketEntry unknown;
        unknown.family = "unknown";
        unknown.inode = *inode;
        rec.socket = unknown;
        s["family"] = std::string("unknown");
      }
      target_node = graph.upsert_node(NodeKind::Socket, std::move(s));
    } else if (rec.target.starts_with("pipe:")) {
      rec.kind = "pipe";
    } else if (rec.target.starts_with("anon_inode:")) {
      rec.kind = "anon";
    } else if (rec.target.starts_with("/")) {
      struct stat st {};
      if (::stat(fd_path.c_str(), &st) != 0) {
        rec.kind = "unknown";
      } else {
        if (S_ISREG(st.st_mode)) rec.kind = "regular";
        else if (S_ISDIR(st.st_mode)) rec.kind = "directory";
        else if (S_ISCHR(st.st_mode) || S_ISBLK(st.st_mode)) rec.kind = "device";
        else rec.kind = "unknown";
        target_node = upsert_file(graph, strip_deleted(rec.target), st.st_dev, st.st_ino);
      }
    } else {
      rec.kind = "unknown";
    }

    Attributes a{{"process", record.id.value},
                 {"fd", fd},
                 {"kind", rec.kind},
                 {"target", sanitize_utf8(rec.target)}};
    if (flags) a["flags"] = *flags;
    auto fid = graph.upsert_node(NodeKind::FileDescriptor, std::move(a));
    graph.add_edge(record.id, EdgeLabel::holds, fid);
    if (target_node) graph.add_edge(fid, EdgeLabel::refers_to, *target_node);
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<ProcessRecord> collect_processes(MeasurementGraph& graph, const ProcessOptions& options) {
  Listing listing = read_admitted(options);
  auto& records = listing.records;

  // Socket inodes are global, so one table joined over every network
  // namespace in the snapshot gives every fd the same Socket node.
  SocketTable sockets;
  if (options.fds) {
    std::set<std::string> seen_net;
    for (const auto& r : records) {
      if (r.kernel_thread) continue;
      std::string net;
      try {
        net = procfs::read_link(pid_dir(options.proc_root, r.pid) / "ns" / "net");
      } catch (const Error&) {
        continue;
      }
      if (!seen_net.insert(net).second) continue;
      sockets.merge(read_socket_table(r.pid, options.proc_root));
    }
  }

  const unsigned workers = std::max(1u, std::min<unsigned>(options.workers, records.size()));
  std::vector<MeasurementGraph> partials(workers, MeasurementGraph(graph.meta()));
  std::atomic<std::size_t> next{0};
  std::mutex failure_mutex;
  std::exception_ptr failure;
  auto work = [&](unsigned w) {
    try {
      for (std::size_t i; (i = next.fetch_add(1)) < records.size();) {
        auto& g = partials[w];
        auto& r = records[i];
        record_process_node(g, r);
        if (options.mappings) collect_mappings(g, r, options.proc_root);
        if (options.namespaces) {
          std::vector<ProcessRecord> one{r};
          collect_namespaces(g, one, options.proc_root);
          r.partial = r.partial || one.front().partial;
        }
        if (options.fds && !r.kernel_thread) collect_fds(g, r, sockets, options.proc_root);
      }
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  };
  std::vector<std::thread> threads;
  for (unsigned w = 0; w < workers; ++w) threads.emplace_back(work, w);
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);

  for (const auto& p : partials) graph = merge(graph, p);
  add_parent_edges(graph, records);
  graph.meta().bump("processes.measured", static_cast<std::int64_t>(records.size()));
  graph.meta().bump("processes.vanished", listing.vanished);
  return std::move(records);
}

} // namespace imtk::process
