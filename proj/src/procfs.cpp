#include "imtk/procfs.hpp"

#include "imtk/error.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>

namespace imtk::procfs {

namespace {

std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

template <typename T>
bool parse_num(std::string_view s, T& out, int base = 10) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out, base);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  while (!text.empty()) {
    auto nl = text.find('\n');
    fn(text.substr(0, nl));
    if (nl == std::string_view::npos) break;
    text.remove_prefix(nl + 1);
  }
}

std::optional<std::pair<std::string, std::int64_t>> parse_inet_endpoint(std::string_view s,
                                                                        bool ipv6) {
  auto colon = s.find(':');
  if (colon == std::string_view::npos) return std::nullopt;
  std::string_view addr_hex = s.substr(0, colon);
  std::int64_t port = 0;
  if (!parse_num(s.substr(colon + 1), port, 16)) return std::nullopt;
  char buf[INET6_ADDRSTRLEN] = {};
  if (!ipv6) {
    std::uint32_t raw = 0;
    if (addr_hex.size() != 8 || !parse_num(addr_hex, raw, 16)) return std::nullopt;
    in_addr a{};
    a.s_addr = raw;
    inet_ntop(AF_INET, &a, buf, sizeof buf);
  } else {
    if (addr_hex.size() != 32) return std::nullopt;
    in6_addr a{};
    for (int w = 0; w < 4; ++w) {
      std::uint32_t word = 0;
      if (!parse_num(addr_hex.substr(static_cast<std::size_t>(w) * 8, 8), word, 16)) return std::nullopt;
      std::memcpy(&a.s6_addr[w * 4], &word, 4);
    }
    inet_ntop(AF_INET6, &a, buf, sizeof buf);
  }
  return std::pair{std::string(buf), port};
}

} // namespace

std::optional<StatFields> parse_stat(std::string_view text) {
  auto open = text.find('(');
  auto close = text.rfind(')');
  if (open == std::string_view::npos || close == std::string_view::npos || close < open) {
    return std::nullopt;
  }
  StatFields f;
  if (!parse_num(trim(text.substr(0, open)), f.pid)) return std::nullopt;
  f.comm = std::string(text.substr(open + 1, close - open - 1));
  auto rest = split_ws(trim(text.substr(close + 1)));
  // rest[0] is field 3 (state); field k lives at rest[k - 3]
  if (rest.size() < 20 || rest[0].size() != 1) return std::nullopt;
  f.state = rest[0][0];
  if (!parse_num(rest[1], f.ppid) || !parse_num(rest[6], f.flags) ||
      !parse_num(rest[19], f.start_time)) {
    return std::nullopt;
  }
  return f;
}

std::optional<StatusIds> parse_status(std::string_view text) {
  StatusIds ids;
  bool have_uid = false;
  bool have_gid = false;
  for_each_line(text, [&](std::string_view line) {
    auto fill = [&](std::string_view prefix, std::int64_t& real, std::int64_t& eff, bool& have) {
      if (!line.starts_with(prefix)) return;
      auto fields = split_ws(line.substr(prefix.size()));
      if (fields.size() >= 2 && parse_num(fields[0], real) && parse_num(fields[1], eff)) have = true;
    };
    fill("Uid:", ids.uid, ids.euid, have_uid);
    fill("Gid:", ids.gid, ids.egid, have_gid);
  });
  if (!have_uid || !have_gid) return std::nullopt;
  return ids;
}

std::vector<std::string> split_cmdline(std::string_view raw) {
  std::vector<std::string> out;
  while (!raw.empty()) {
    auto nul = raw.find('\0');
    out.emplace_back(raw.substr(0, nul));
    if (nul == std::string_view::npos) break;
    raw.remove_prefix(nul + 1);
  }
  return out;
}

std::optional<MapsEntry> parse_maps_line(std::string_view line) {
  // start-end perms offset major:minor inode [path]
  MapsEntry e;
  std::size_t pos = 0;
  auto next_field = [&]() -> std::string_view {
    while (pos < line.size() && line[pos] == ' ') ++pos;
    std::size_t begin = pos;
    while (pos < line.size() && line[pos] != ' ') ++pos;
    return line.substr(begin, pos - begin);
  };
  std::string_view range = next_field();
  std::string_view perms = next_field();
  std::string_view offset = next_field();
  std::string_view dev = next_field();
  std::string_view inode = next_field();
  auto dash = range.find('-');
  auto colon = dev.find(':');
  if (dash == std::string_view::npos || colon == std::string_view::npos || perms.size() != 4) {
    return std::nullopt;
  }
  if (!parse_num(range.substr(0, dash), e.start, 16) ||
      !parse_num(range.substr(dash + 1), e.end, 16) || !parse_num(offset, e.offset, 16) ||
      !parse_num(dev.substr(0, colon), e.dev_major, 16) ||
      !parse_num(dev.substr(colon + 1), e.dev_minor, 16) || !parse_num(inode, e.inode)) {
    return std::nullopt;
  }
  e.perms = std::string(perms);
  while (pos < line.size() && line[pos] == ' ') ++pos;
  std::string_view path = line.substr(pos);
  constexpr std::string_view kDeleted = " (deleted)";
  if (path.ends_with(kDeleted)) {
    path.remove_suffix(kDeleted.size());
    e.deleted = true;
  }
  e.path = std::string(path);
  return e;
}

std::vector<MapsEntry> parse_maps(std::string_view text) {
  std::vector<MapsEntry> out;
  for_each_line(text, [&](std::string_view line) {
    if (line.empty()) return;
    if (auto e = parse_maps_line(line)) out.push_back(std::move(*e));
  });
  return out;
}

std::string format_device(std::uint32_t major, std::uint32_t minor) {
  return std::to_string(major) + ":" + std::to_string(minor);
}

std::optional<NsLink> parse_ns_link(std::string_view link) {
  auto colon = link.find(':');
  if (colon == std::string_view::npos || colon == 0) return std::nullopt;
  auto inode = parse_bracket_inode(link.substr(colon + 1), "");
  if (!inode || *inode == 0) return std::nullopt;
  return NsLink{std::string(link.substr(0, colon)), *inode};
}

std::optional<std::uint64_t> parse_bracket_inode(std::string_view link, std::string_view prefix) {
  if (!link.starts_with(prefix)) return std::nullopt;
  link.remove_prefix(prefix.size());
  if (link.size() < 3 || link.front() != '[' || link.back() != ']') return std::nullopt;
  std::uint64_t inode = 0;
  if (!parse_num(link.substr(1, link.size() - 2), inode)) return std::nullopt;
  return inode;
}

std::string tcp_state_name(int code) {
  switch (code) {
    case 0x01: return "established";
    case 0x02: return "syn_sent";
    case 0x03: return "syn_recv";
    case 0x04: return "fin_wait1";
    case 0x05: return "fin_wait2";
    case 0x06: return "time_wait";
    case 0x07: return "close";
    case 0x08: return "close_wait";
    case 0x09: return "last_ack";
    case 0x0a: return "listen";
    case 0x0b: return "closing";
    case 0x0c: return "new_syn_recv";
    default: return "unknown";
  }
}

std::vector<SocketEntry> parse_inet_table(std::string_view text, std::string_view protocol,
                                          bool ipv6) {
  std::vector<SocketEntry> out;
  bool header = true;
  for_each_line(text, [&](std::string_view line) {
    if (header) {
      header = false;
      return;
    }
    auto f = split_ws(line);
    if (f.size() < 10) return;
    auto local = parse_inet_endpoint(f[1], ipv6);
    auto remote = parse_inet_endpoint(f[2], ipv6);
    int state = 0;
    SocketEntry e;
    if (!local || !remote || !parse_num(f[3], state, 16) || !parse_num(f[9], e.inode)) return;
    e.family = ipv6 ? "inet6" : "inet";
    e.protocol = std::string(protocol);
    e.local_ip = local->first;
    e.local_port = local->second;
    e.remote_ip = remote->first;
    e.remote_port = remote->second;
    e.state = tcp_state_name(state);
    out.push_back(std::move(e));
  });
  return out;
}

std::vector<SocketEntry> parse_unix_table(std::string_view text) {
  std::vector<SocketEntry> out;
  bool header = true;
  for_each_line(text, [&](std::string_view line) {
    if (header) {
      header = false;
      return;
    }
    auto f = split_ws(line);
    if (f.size() < 7) return;
    std::uint32_t flags = 0;
    int type = 0;
    int state = 0;
    SocketEntry e;
    if (!parse_num(f[3], flags, 16) || !parse_num(f[4], type, 16) || !parse_num(f[5], state, 16) ||
        !parse_num(f[6], e.inode)) {
      return;
    }
    e.family = "unix";
    switch (type) {
      case 1: e.protocol = "unix-stream"; break;
      case 2: e.protocol = "unix-dgram"; break;
      case 5: e.protocol = "unix-seqpacket"; break;
      default: e.protocol = "unix"; break;
    }
    if (flags & 0x00010000) {
      e.state = "listen";
    } else {
      switch (state) {
        case 1: e.state = "unconnected"; break;
        case 2: e.state = "connecting"; break;
        case 3: e.state = "connected"; break;
        case 4: e.state = "disconnecting"; break;
        default: e.state = "unknown"; break;
      }
    }
    if (f.size() >= 8) {
      // the path is everything after the inode column and may contain spaces
      auto at = line.find(f[7], static_cast<std::size_t>(f[6].data() - line.data()) + f[6].size());
      e.unix_path = std::string(trim(line.substr(at)));
    }
    out.push_back(std::move(e));
  });
  return out;
}

std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  for_each_line(text, [&](std::string_view line) {
    line = trim(line);
    if (line.empty() || line.front() == '#') return;
    auto eq = line.find('=');
    if (eq == std::string_view::npos) return;
    std::string_view key = trim(line.substr(0, eq));
    std::string_view value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') &&
        value.back() == value.front()) {
      value = value.substr(1, value.size() - 2);
    }
    std::string unescaped;
    for (std::size_t i = 0; i < value.size(); ++i) {
      if (value[i] == '\\' && i + 1 < value.size()) ++i;
      unescaped.push_back(value[i]);
    }
    out.emplace_back(std::string(key), std::move(unescaped));
  });
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  int fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd < 0) {
    int err = errno;
    throw Error(errno_to_code(err), path.string() + ": " + std::strerror(err));
  }
  std::string out;
  char buf[8192];
  for (;;) {
    ssize_t n = ::read(fd, buf, sizeof buf);
    if (n < 0) {
      if (errno == EINTR) continue;
      int err = errno;
      ::close(fd);
      throw Error(errno_to_code(err), path.string() + ": " + std::strerror(err));
    }
    if (n == 0) break;
    out.append(buf, static_cast<std::size_t>(n));
  }
  ::close(fd);
  return out;
}

std::string read_link(const std::filesystem::path& path) {
  std::string buf(256, '\0');
  for (;;) {
    ssize_t n = ::readlink(path.c_str(), buf.data(), buf.size());
    if (n < 0) {
      int err = errno;
      throw Error(errno_to_code(err), path.string() + ": " + std::strerror(err));
    }
    if (static_cast<std::size_t>(n) < buf.size()) {
      buf.resize(static_cast<std::size_t>(n));
      return buf;
    }
    buf.resize(buf.size() * 2);
  }
}

} // namespace imtk::procfs
