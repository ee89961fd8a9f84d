#include "imtk/collect.hpp"

#include "imtk/elf_collector.hpp"
#include "imtk/error.hpp"
#include "imtk/process_collector.hpp"
#include "imtk/system_collector.hpp"

#include <linux/capability.h>
#include <sys/prctl.h>
#include <sys/syscall.h>
#include <sys/utsname.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <ctime>
#include <stdexcept>
#include <thread>

namespace imtk {

namespace {

// Hashing files and reading package databases never needs to look inside
// other processes, so those children give up the capability to.
void drop_process_inspection() {
  ::prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0);
  __user_cap_header_struct header{_LINUX_CAPABILITY_VERSION_3, 0};
  __user_cap_data_struct data[2]{};
  if (::syscall(SYS_capget, &header, data) != 0) return;
  for (int cap : {CAP_SYS_PTRACE, CAP_SYS_ADMIN}) {
    data[cap / 32].effective &= ~(1u << (cap % 32));
    data[cap / 32].permitted &= ~(1u << (cap % 32));
    data[cap / 32].inheritable &= ~(1u << (cap % 32));
  }
  ::syscall(SYS_capset, &header, data);
}

void write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return;
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

std::string read_all(int fd) {
  std::string out;
  char buf[1 << 16];
  for (;;) {
    ssize_t n = ::read(fd, buf, sizeof buf);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) break;
    out.append(buf, static_cast<std::size_t>(n));
  }
  return out;
}

} // namespace

std::string_view to_string(Module module) noexcept {
  switch (module) {
    case Module::system: return "system";
    case Module::hashes: return "hashes";
    case Module::processes: return "processes";
    case Module::elf: return "elf";
  }
  return "unknown";
}

std::set<Module> parse_modules(std::string_view list) {
  std::set<Module> out;
  std::size_t pos = 0;
  while (pos <= list.size()) {
    auto comma = list.find(',', pos);
    auto item = list.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos);
    if (item == "system") out.insert(Module::system);
    else if (item == "hashes") out.insert(Module::hashes);
    else if (item == "processes") out.insert(Module::processes);
    else if (item == "elf") out.insert(Module::elf);
    else if (!item.empty()) throw std::invalid_argument("unknown module '" + std::string(item) + "'");
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw std::invalid_argument("no modules selected");
  return out;
}

SnapshotMeta new_snapshot_meta(const Scope& scope, std::string hash_algorithm) {
  SnapshotMeta meta;
  struct utsname u {};
  meta.host = ::uname(&u) == 0 ? u.nodename : "localhost";
  meta.taken_at = static_cast<std::int64_t>(std::time(nullptr));
  meta.collector_version = std::string(kCollectorVersion);
  meta.scope = scope;
  meta.hash_algorithm = std::move(hash_algorithm);
  return meta;
}

MeasurementGraph run_module(Module module, const SnapshotMeta& meta, const CollectConfig& config,
                            std::int64_t collector_pid) {
  MeasurementGraph graph(meta);
  std::optional<std::int64_t> exclude;
  if (config.exclude_self) exclude = collector_pid;
  switch (module) {
    case Module::system: {
      auto sys = system::collect_system_info(graph);
      system::inventory_packages(graph, sys);
      break;
    }
    case Module::hashes: {
      auto sys = system::collect_system_info(graph);
      std::vector<std::string> manifest = system::default_manifest();
      if (config.manifest) manifest = system::parse_manifest(procfs::read_file(*config.manifest));
      system::hash_files(graph, sys, manifest);
      break;
    }
    case Module::processes: {
      process::ProcessOptions options;
      options.scope = config.scope;
      options.pids = config.pids;
      options.workers = config.workers;
      options.collector_pid = exclude;
      process::collect_processes(graph, options);
      break;
    }
    case Module::elf: {
      elf::ElfCollectOptions options;
      options.scope = config.scope;
      options.pids = config.pids;
      options.workers = config.workers;
      options.collector_pid = exclude;
      elf::collect_elf(graph, options);
      break;
    }
  }
  return graph;
}

MeasurementGraph collect(const CollectConfig& config) {
  if (config.modules.empty()) throw std::invalid_argument("no modules selected");
  if (config.modules.contains(Module::processes) || config.modules.contains(Module::elf)) {
    process::list_pids("/proc");
  }
  const SnapshotMeta meta = new_snapshot_meta(config.scope);
  const std::int64_t self = ::getpid();

  if (!config.isolate) {
    MeasurementGraph out(meta);
    for (Module m : config.modules) out = merge(out, run_module(m, meta, config, self));
    return out;
  }

  struct Child {
    Module module;
    pid_t pid = -1;
    int fd = -1;
    std::string output;
  };
  std::vector<Child> children;
  for (Module m : config.modules) {
    int fds[2];
    if (::pipe(fds) != 0) throw Error(ErrorCode::IoError, std::string("pipe: ") + std::strerror(errno));
    pid_t pid = ::fork();
    if (pid < 0) throw Error(ErrorCode::IoError, std::string("fork: ") + std::strerror(errno));
    if (pid == 0) {
      ::close(fds[0]);
      for (const auto& c : children) ::close(c.fd);
      int status = 0;
      try {
        if (m == Module::system || m == Module::hashes) drop_process_inspection();
        write_all(fds[1], serialize_canonical(run_module(m, meta, config, self)));
      } catch (const std::exception& e) {
        write_all(fds[1], std::string("error: ") + e.what());
        status = 3;
      }
      ::close(fds[1]);
      ::_exit(status);
    }
    ::close(fds[1]);
    children.push_back({m, pid, fds[0], {}});
  }

  std::vector<std::thread> readers;
  for (auto& c : children) readers.emplace_back([&c] { c.output = read_all(c.fd); });
  for (auto& t : readers) t.join();

  MeasurementGraph out(meta);
  std::string failures;
  for (auto& c : children) {
    ::close(c.fd);
    int status = 0;
    while (::waitpid(c.pid, &status, 0) < 0 && errno == EINTR) {
    }
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
      failures += std::string(failures.empty() ? "" : "; ") + std::string(to_string(c.module)) + " module: " +
                  (c.output.starts_with("error: ") ? c.output.substr(7) : "exited abnormally");
      continue;
    }
    out = merge(out, deserialize(c.output));
  }
  if (!failures.empty()) throw Error(ErrorCode::IoError, failures);
  return out;
}

} // namespace imtk
