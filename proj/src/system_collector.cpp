#include "imtk/system_collector.hpp"

#include "imtk/digest.hpp"
#include "imtk/error.hpp"
#include "imtk/procfs.hpp"

#include <fcntl.h>
#include <glob.h>
#include <spawn.h>
#include <sys/stat.h>
#include <sys/sysmacros.h>
#include <sys/utsname.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <set>

extern char** environ;

namespace imtk::system {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

// Runs argv[0] from PATH without a shell and returns its stdout.
std::optional<std::string> run_command(const std::vector<std::string>& argv) {
  int fds[2];
  if (::pipe2(fds, O_CLOEXEC) != 0) return std::nullopt;
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_adddup2(&actions, fds[1], STDOUT_FILENO);
  posix_spawn_file_actions_addopen(&actions, STDERR_FILENO, "/dev/null", O_WRONLY, 0);
  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);
  pid_t pid = -1;
  int rc = posix_spawnp(&pid, args[0], &actions, nullptr, args.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  ::close(fds[1]);
  if (rc != 0) {
    ::close(fds[0]);
    return std::nullopt;
  }
  std::string out;
  char buf[65536];
  for (;;) {
    ssize_t n = ::read(fds[0], buf, sizeof buf);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) break;
    out.append(buf, static_cast<std::size_t>(n));
  }
  ::close(fds[0]);
  int status = 0;
  while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
  }
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) return std::nullopt;
  return out;
}

bool has_glob_chars(std::string_view s) { return s.find_first_of("*?[") != std::string_view::npos; }

} // namespace

SystemInfo read_system_info(const SystemSources& sources) {
  SystemInfo info;
  struct utsname u {};
  if (::uname(&u) == 0) {
    info.kernel_release = u.release;
    info.architecture = u.machine;
    info.hostname = u.nodename;
  }
  for (const auto& path : sources.os_release) {
    std::string text;
    try {
      text = procfs::read_file(path);
    } catch (const Error&) {
      continue;
    }
    for (const auto& [k, v] : procfs::parse_key_values(text)) {
      if (k == "NAME") info.os_name = v;
      if (k == "VERSION_ID") info.os_version = v;
      if (k == "VERSION" && info.os_version.empty()) info.os_version = v;
    }
    break;
  }
  return info;
}

NodeId collect_system_info(MeasurementGraph& graph, const SystemSources& sources) {
  SystemInfo info = read_system_info(sources);
  const std::pair<const char*, std::string*> fields[] = {
      {"os_name", &info.os_name},
      {"os_version", &info.os_version},
      {"kernel_release", &info.kernel_release},
      {"architecture", &info.architecture},
      {"hostname", &info.hostname},
  };
  Attributes attrs;
  for (const auto& [key, value] : fields) {
    if (value->empty()) graph.meta().add_warning(std::string("system: ") + key + " unavailable");
    attrs[key] = sanitize_utf8(*value);
  }
  if (info.hostname.empty()) attrs["hostname"] = std::string("localhost");
  return graph.upsert_node(NodeKind::SystemInfo, std::move(attrs));
}

// ---------------------------------------------------------------------------

std::vector<PackageRecord> parse_dpkg_status(std::string_view text) {
  std::set<PackageRecord> out;
  PackageRecord cur;
  bool installed = false;
  auto flush = [&] {
    if (installed && !cur.name.empty()) {
      cur.manager = "dpkg";
      if (cur.architecture.empty()) cur.architecture = "none";
      out.insert(cur);
    }
    cur = {};
    installed = false;
  };
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    if (line.empty() || line == "\r") {
      flush();
    } else if (line.front() != ' ' && line.front() != '\t') {
      auto colon = line.find(':');
      if (colon != std::string_view::npos) {
        auto key = line.substr(0, colon);
        auto value = trim(line.substr(colon + 1));
        if (key == "Package") cur.name = value;
        else if (key == "Version") cur.version = value;
        else if (key == "Architecture") cur.architecture = value;
        else if (key == "Status") installed = value.size() >= 10 && value.ends_with(" installed");
      }
    }
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  flush();
  return {out.begin(), out.end()};
}

std::vector<PackageRecord> parse_rpm_query(std::string_view text) {
  std::set<PackageRecord> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    auto t1 = line.find('\t');
    auto t2 = t1 == std::string_view::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string_view::npos) continue;
    PackageRecord r{trim(line.substr(0, t1)), trim(line.substr(t1 + 1, t2 - t1 - 1)), trim(line.substr(t2 + 1)),
                    "rpm"};
    if (r.name.empty() || r.name == "gpg-pubkey") continue;
    if (r.architecture.empty() || r.architecture == "(none)") r.architecture = "none";
    out.insert(std::move(r));
  }
  return {out.begin(), out.end()};
}

std::vector<PackageRecord> inventory_packages(MeasurementGraph& graph, const NodeId& system,
                                              const SystemSources& sources) {
  std::vector<PackageRecord> records;
  std::error_code ec;
  if (fs::exists(sources.dpkg_status, ec)) {
    try {
      records = parse_dpkg_status(procfs::read_file(sources.dpkg_status));
    } catch (const Error& e) {
      graph.meta().add_error(sources.dpkg_status.string(), std::string(to_string(e.code())));
    }
  } else if (fs::is_directory(sources.rpm_database, ec)) {
    auto out = run_command({sources.rpm_command, "-qa", "--qf", "%{NAME}\t%{VERSION}-%{RELEASE}\t%{ARCH}\n"});
    if (out) {
      records = parse_rpm_query(*out);
    } else {
      graph.meta().add_error(sources.rpm_command, "rpm query failed");
    }
  } else {
    graph.meta().add_warning("packages: NoSupportedManager");
    return {};
  }
  for (const auto& r : records) {
    auto id = graph.upsert_node(NodeKind::Package, {{"name", sanitize_utf8(r.name)},
                                                    {"version", sanitize_utf8(r.version)},
                                                    {"arch", sanitize_utf8(r.architecture)},
                                                    {"manager", r.manager}});
    graph.add_edge(system, EdgeLabel::installed, id);
  }
  graph.meta().bump("packages", static_cast<std::int64_t>(records.size()));
  return records;
}

// ---------------------------------------------------------------------------

std::vector<std::string> parse_manifest(std::string_view text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    auto item = trim(line);
    if (!item.empty()) out.push_back(std::move(item));
  }
  return out;
}

std::vector<std::string> default_manifest() {
  return {
      "/lib64/ld-linux-x86-64.so.2",
      "/etc/ld.so.preload",
      "/etc/ld.so.cache",
      "/sbin/init",
      "/bin/sh",
      "/bin/bash",
      "/bin/dash",
  };
}

Attributes file_identity(const std::string& path, std::uint64_t device, std::uint64_t inode) {
  return {
      {"path", sanitize_utf8(path)},
      {"device", procfs::format_device(major(device), minor(device))},
      {"inode", static_cast<std::int64_t>(inode)},
  };
}

std::vector<FileMeasurement> hash_files(MeasurementGraph& graph, const NodeId& system,
                                        const std::vector<std::string>& manifest) {
  auto& meta = graph.meta();
  std::set<std::string> candidates;
  for (const auto& pattern : manifest) {
    if (!pattern.starts_with('/')) {
      meta.add_error(pattern, "manifest entries must be absolute");
      continue;
    }
    std::vector<std::string> matches;
    if (has_glob_chars(pattern)) {
      glob_t g{};
      int rc = ::glob(pattern.c_str(), GLOB_ERR, nullptr, &g);
      if (rc == 0) {
        for (std::size_t i = 0; i < g.gl_pathc; ++i) matches.emplace_back(g.gl_pathv[i]);
      } else if (rc == GLOB_NOMATCH) {
        meta.add_error(pattern, "NotFound");
      } else {
        meta.add_error(pattern, "IoError");
      }
      ::globfree(&g);
    } else {
      matches.push_back(pattern);
    }
    for (const auto& m : matches) {
      std::error_code ec;
      auto status = fs::status(m, ec);
      if (ec || !fs::exists(status)) {
        int err = ec ? ec.value() : ENOENT;
        meta.add_error(m, std::string(to_string(errno_to_code(err))));
        continue;
      }
      if (fs::is_directory(status)) {
        fs::directory_iterator it(m, ec);
        if (ec) {
          meta.add_error(m, std::string(to_string(errno_to_code(ec.value()))));
          continue;
        }
        for (const auto& entry : it) {
          std::error_code fec;
          if (entry.is_regular_file(fec)) candidates.insert(entry.path().string());
        }
      } else {
        candidates.insert(m);
      }
    }
  }

  std::set<std::string> seen;
  std::vector<FileMeasurement> out;
  for (const auto& candidate : candidates) {
    char resolved[PATH_MAX];
    if (::realpath(candidate.c_str(), resolved) == nullptr) {
      meta.add_error(candidate, std::string(to_string(errno_to_code(errno))));
      continue;
    }
    std::string path = resolved;
    if (!seen.insert(path).second) continue;
    struct stat st {};
    if (::stat(path.c_str(), &st) != 0) {
      meta.add_error(path, std::string(to_string(errno_to_code(errno))));
      continue;
    }
    if (!S_ISREG(st.st_mode)) continue;
    FileMeasurement fm;
    try {
      fm.digest = digest_file(path, meta.hash_algorithm);
    } catch (const Error& e) {
      meta.add_error(path, std::string(to_string(e.code())));
      continue;
    }
    fm.path = path;
    fm.device = procfs::format_device(major(st.st_dev), minor(st.st_dev));
    fm.inode = st.st_ino;
    fm.size_bytes = st.st_size;
    fm.mode = st.st_mode;
    fm.uid = st.st_uid;
    fm.gid = st.st_gid;
    fm.mtime = st.st_mtim.tv_sec;

    Attributes attrs = file_identity(path, st.st_dev, st.st_ino);
    attrs["digest"] = fm.digest;
    attrs["size"] = fm.size_bytes;
    attrs["mode"] = fm.mode;
    attrs["uid"] = fm.uid;
    attrs["gid"] = fm.gid;
    attrs["mtime"] = fm.mtime;
    auto id = graph.upsert_node(NodeKind::File, std::move(attrs));
    graph.add_edge(system, EdgeLabel::measured, id);
    out.push_back(std::move(fm));
  }
  meta.bump("files.hashed", static_cast<std::int64_t>(out.size()));
  return out;
}

} // namespace imtk::system
