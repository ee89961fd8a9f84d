#pragma once

// Parsers for the text formats under /proc. Everything here is a pure
// function of its input except the small read helpers at the bottom.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace imtk::procfs {

struct StatFields {
  std::int64_t pid = 0;
  std::string comm;
  char state = '?';
  std::int64_t ppid = 0;
  std::uint64_t flags = 0;
  std::int64_t start_time = 0; // clock ticks since boot
};

inline constexpr std::uint64_t kPfKthread = 0x00200000;

/// /proc/<pid>/stat. The comm field may contain spaces and parentheses.
std::optional<StatFields> parse_stat(std::string_view text);

struct StatusIds {
  std::int64_t uid = -1; // real
  std::int64_t euid = -1;
  std::int64_t gid = -1;
  std::int64_t egid = -1;
};

std::optional<StatusIds> parse_status(std::string_view text);

/// NUL-separated argv. A trailing NUL does not produce an empty argument.
std::vector<std::string> split_cmdline(std::string_view raw);

struct MapsEntry {
  std::uint64_t start = 0;
  std::uint64_t end = 0;
  std::string perms; // e.g. "r-xp"
  std::uint64_t offset = 0;
  std::uint32_t dev_major = 0;
  std::uint32_t dev_minor = 0;
  std::uint64_t inode = 0;
  std::string path; // empty for anonymous mappings
  bool deleted = false;

  bool readable() const { return perms.size() > 0 && perms[0] == 'r'; }
  bool writable() const { return perms.size() > 1 && perms[1] == 'w'; }
  bool executable() const { return perms.size() > 2 && perms[2] == 'x'; }
  bool shared() const { return perms.size() > 3 && perms[3] == 's'; }
  /// Backed by a real file (as opposed to anonymous or a [pseudo] region).
  bool file_backed() const { return inode != 0 && !path.empty() && path.front() != '['; }
  bool pseudo() const { return !path.empty() && path.front() == '['; }
};

std::optional<MapsEntry> parse_maps_line(std::string_view line);
std::vector<MapsEntry> parse_maps(std::string_view text);

/// "254:0" form used for all device identifiers in the graph.
std::string format_device(std::uint32_t major, std::uint32_t minor);

struct NsLink {
  std::string type;
  std::uint64_t inode = 0;
};

/// "pid:[4026531836]"
std::optional<NsLink> parse_ns_link(std::string_view link);

/// Extracts the inode from "socket:[1234]" / "pipe:[1234]".
std::optional<std::uint64_t> parse_bracket_inode(std::string_view link, std::string_view prefix);

struct SocketEntry {
  std::string family;   // inet, inet6, unix
  std::string protocol; // tcp, udp, unix-stream, unix-dgram, unix-seqpacket
  std::uint64_t inode = 0;
  std::string local_ip;
  std::int64_t local_port = 0;
  std::string remote_ip;
  std::int64_t remote_port = 0;
  std::string state;
  std::string unix_path;
};

std::string tcp_state_name(int code);

/// /proc/net/{tcp,udp,tcp6,udp6}.
std::vector<SocketEntry> parse_inet_table(std::string_view text, std::string_view protocol,
                                          bool ipv6);
/// /proc/net/unix.
std::vector<SocketEntry> parse_unix_table(std::string_view text);

/// /etc/os-release style KEY=value lines; values may be quoted.
std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view text);

// ---------------------------------------------------------------------------
// I/O helpers
// ---------------------------------------------------------------------------

/// Whole-file read that works for /proc pseudo files (size 0 in stat).
/// Throws imtk::Error with a code derived from errno.
std::string read_file(const std::filesystem::path& path);

/// readlink(2); throws imtk::Error with a code derived from errno.
std::string read_link(const std::filesystem::path& path);

} // namespace imtk::procfs
