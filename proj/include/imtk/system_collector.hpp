#pragma once

#include "imtk/graph.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace imtk::system {

struct SystemInfo {
  std::string os_name;
  std::string os_version;
  std::string kernel_release;
  std::string architecture;
  std::string hostname;
};

struct SystemSources {
  std::vector<std::filesystem::path> os_release = {"/etc/os-release", "/usr/lib/os-release"};
  std::filesystem::path dpkg_status = "/var/lib/dpkg/status";
  std::filesystem::path rpm_database = "/var/lib/rpm";
  std::string rpm_command = "rpm";
};

/// uname(2) plus os-release. Missing fields are left empty.
SystemInfo read_system_info(const SystemSources& sources = {});

/// Adds the SystemInfo node (warning in meta for every empty field).
NodeId collect_system_info(MeasurementGraph& graph, const SystemSources& sources = {});

struct PackageRecord {
  std::string name;
  std::string version;
  std::string architecture;
  std::string manager; // dpkg | rpm

  friend auto operator<=>(const PackageRecord&, const PackageRecord&) = default;
};

/// Installed packages from a dpkg status database, sorted and unique.
std::vector<PackageRecord> parse_dpkg_status(std::string_view text);
/// Output of `rpm -qa --qf '%{NAME}\t%{VERSION}-%{RELEASE}\t%{ARCH}\n'`.
std::vector<PackageRecord> parse_rpm_query(std::string_view text);

/// Package nodes plus `installed` edges from the SystemInfo node. With no
/// supported manager the inventory is empty and a warning is recorded.
std::vector<PackageRecord> inventory_packages(MeasurementGraph& graph, const NodeId& system,
                                              const SystemSources& sources = {});

struct FileMeasurement {
  std::string path; // canonical
  std::string device;
  std::uint64_t inode = 0;
  std::string digest;
  std::int64_t size_bytes = 0;
  std::int64_t mode = 0;
  std::int64_t uid = 0;
  std::int64_t gid = 0;
  std::int64_t mtime = 0;
};

/// One pattern per line; blank lines and '#' comments ignored.
std::vector<std::string> parse_manifest(std::string_view text);
std::vector<std::string> default_manifest();

/// Patterns are absolute paths, glob(3) patterns or directories (whose
/// regular files are hashed, non-recursively). Per-file failures land in
/// meta.errors; the walk never aborts.
std::vector<FileMeasurement> hash_files(MeasurementGraph& graph, const NodeId& system,
                                        const std::vector<std::string>& manifest);

/// Identity attributes of a file node: path, "major:minor" device, inode.
/// `device` is a raw st_dev.
Attributes file_identity(const std::string& path, std::uint64_t device, std::uint64_t inode);

} // namespace imtk::system
