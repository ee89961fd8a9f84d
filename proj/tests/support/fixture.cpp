#include "fixture.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <system_error>

extern char** environ;

namespace imtk::testing {

namespace fs = std::filesystem;
using namespace std::chrono_literals;

const FixtureBinaries& fixture_binaries() {
  static const FixtureBinaries binaries{
      IMTK_FIXTURE_HARDENED, IMTK_FIXTURE_LAZY, IMTK_FIXTURE_GOT_PROBE, IMTK_FIXTURE_STATIC, IMTK_FIXTURE_PAYLOAD,
  };
  return binaries;
}

bool fixtures_built() {
  const auto& b = fixture_binaries();
  for (const auto* p : {&b.hardened, &b.lazy, &b.got_probe, &b.static_target, &b.payload}) {
    std::error_code ec;
    if (p->empty() || !fs::is_regular_file(*p, ec)) return false;
  }
  return true;
}

std::string_view to_string(Technique t) noexcept {
  switch (t) {
    case Technique::benign_control: return "benign_control";
    case Technique::wx_mapping: return "wx_mapping";
    case Technique::anon_exec_thread: return "anon_exec_thread";
    case Technique::dlopen_inject: return "dlopen_inject";
    case Technique::got_hook: return "got_hook";
    case Technique::plt_hook: return "plt_hook";
    case Technique::text_modify: return "text_modify";
    case Technique::text_remap: return "text_remap";
    case Technique::fd_pass_pair: return "fd_pass_pair";
    case Technique::fd_pass_fork: return "fd_pass_fork";
    case Technique::got_probe: return "got_probe";
    case Technique::static_control: return "static_control";
  }
  return "unknown";
}

bool two_phase(Technique t) noexcept {
  switch (t) {
    case Technique::got_hook:
    case Technique::plt_hook:
    case Technique::text_modify:
    case Technique::text_remap:
    case Technique::fd_pass_pair:
    case Technique::fd_pass_fork:
    case Technique::got_probe:
      return true;
    default:
      return false;
  }
}

// ---------------------------------------------------------------------------

FixtureProcess::FixtureProcess(const fs::path& binary, const std::vector<std::string>& args) {
  // a fixture that died must surface as EPIPE on send, not kill the harness
  ::signal(SIGPIPE, SIG_IGN);
  int in[2];
  int out[2];
  if (::pipe2(in, O_CLOEXEC) != 0 || ::pipe2(out, O_CLOEXEC) != 0) {
    throw FixtureError(FixtureError::Kind::SpawnFailed, std::string("pipe: ") + std::strerror(errno));
  }
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_adddup2(&actions, in[0], STDIN_FILENO);
  posix_spawn_file_actions_adddup2(&actions, out[1], STDOUT_FILENO);

  std::vector<std::string> argv_storage{binary.string()};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_storage) argv.push_back(a.data());
  argv.push_back(nullptr);

  int rc = ::posix_spawn(&pid_, binary.c_str(), &actions, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  ::close(in[0]);
  ::close(out[1]);
  in_ = in[1];
  out_ = out[0];
  if (rc != 0) {
    ::close(in_);
    ::close(out_);
    in_ = out_ = -1;
    pid_ = -1;
    throw FixtureError(FixtureError::Kind::SpawnFailed, binary.string() + ": " + std::strerror(rc));
  }
}

FixtureProcess::FixtureProcess(FixtureProcess&& other) noexcept
    : pid_(std::exchange(other.pid_, -1)),
      in_(std::exchange(other.in_, -1)),
      out_(std::exchange(other.out_, -1)),
      buffer_(std::move(other.buffer_)) {}

FixtureProcess::~FixtureProcess() { stop(); }

void FixtureProcess::send(const std::string& line) {
  std::string data = line + "\n";
  const char* p = data.data();
  std::size_t left = data.size();
  while (left > 0) {
    ssize_t n = ::write(in_, p, left);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) throw FixtureError(FixtureError::Kind::ProtocolViolation, "fixture stdin closed");
    p += n;
    left -= static_cast<std::size_t>(n);
  }
}

std::optional<std::string> FixtureProcess::read_line(std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      return line;
    }
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0 || out_ < 0) return std::nullopt;
    pollfd pfd{out_, POLLIN, 0};
    int rc = ::poll(&pfd, 1, static_cast<int>(left.count()));
    if (rc < 0 && errno == EINTR) continue;
    if (rc <= 0) return std::nullopt;
    char buf[512];
    ssize_t n = ::read(out_, buf, sizeof buf);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return std::nullopt;
    buffer_.append(buf, static_cast<std::size_t>(n));
  }
}

void FixtureProcess::expect(const std::string& expected, std::chrono::milliseconds timeout) {
  auto line = read_line(timeout);
  if (line == expected) return;
  if (line && line->starts_with("ERROR EnvironmentUnsupported")) {
    throw FixtureError(FixtureError::Kind::EnvironmentUnsupported, "pid " + std::to_string(pid_) + ": " + *line);
  }
  throw FixtureError(FixtureError::Kind::ProtocolViolation,
                     "pid " + std::to_string(pid_) + ": expected " + expected + ", got " +
                         (line ? "'" + *line + "'" : std::string("nothing")));
}

void FixtureProcess::stop() {
  if (pid_ <= 0) return;
  if (in_ >= 0) {
    const char bye[] = "exit\n";
    [[maybe_unused]] auto n = ::write(in_, bye, sizeof bye - 1);
    ::close(in_);
    in_ = -1;
  }
  int status = 0;
  const auto deadline = std::chrono::steady_clock::now() + 2s;
  while (::waitpid(pid_, &status, WNOHANG) == 0) {
    if (std::chrono::steady_clock::now() > deadline) {
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, &status, 0);
      break;
    }
    ::usleep(2000);
  }
  if (out_ >= 0) ::close(out_);
  out_ = -1;
  pid_ = -1;
}

// ---------------------------------------------------------------------------

Fixture Fixture::spawn(Technique technique) {
  if (!fixtures_built()) throw FixtureError(FixtureError::Kind::BuildMissing, "fixture binaries were not built");
  const auto& bin = fixture_binaries();
  Fixture f;
  f.technique_ = technique;

  auto scratch = [&f] {
    std::string templ = (fs::temp_directory_path() / "imtk-fixture-XXXXXX").string();
    if (::mkdtemp(templ.data()) == nullptr) {
      throw FixtureError(FixtureError::Kind::SpawnFailed, std::string("mkdtemp: ") + std::strerror(errno));
    }
    f.scratch_ = templ;
    return fs::path(templ);
  };
  auto start = [&f](const fs::path& binary, std::vector<std::string> args) {
    f.processes_.emplace_back(binary, args);
    f.processes_.back().expect("READY", kReadyTimeout);
  };

  switch (technique) {
    case Technique::benign_control: start(bin.hardened, {"benign"}); break;
    case Technique::wx_mapping: start(bin.hardened, {"wx"}); break;
    case Technique::anon_exec_thread: start(bin.hardened, {"anon_thread"}); break;
    case Technique::dlopen_inject: {
      // a private copy outside every library search path
      fs::path copy = scratch() / "libimtk_injected.so";
      fs::copy_file(bin.payload, copy);
      start(bin.hardened, {"dlopen", copy.string()});
      break;
    }
    case Technique::got_hook: start(bin.lazy, {"got_hook"}); break;
    case Technique::plt_hook: start(bin.lazy, {"plt_hook"}); break;
    case Technique::text_modify: start(bin.hardened, {"text_poke"}); break;
    case Technique::text_remap: start(bin.hardened, {"text_remap"}); break;
    case Technique::fd_pass_pair: {
      // receiver first; both are children of the harness, not of each other
      const std::string sock = (scratch() / "pass.sock").string();
      start(bin.hardened, {"fdpass_recv", sock});
      start(bin.hardened, {"fdpass_send", sock});
      break;
    }
    case Technique::fd_pass_fork: start(bin.hardened, {"fdpass_fork"}); break;
    case Technique::got_probe: start(bin.got_probe, {}); break;
    case Technique::static_control: start(bin.static_target, {}); break;
  }
  return f;
}

Fixture::~Fixture() { teardown(); }

std::vector<pid_t> Fixture::pids() const {
  std::vector<pid_t> out;
  for (const auto& p : processes_) {
    if (p.pid() > 0) out.push_back(p.pid());
  }
  return out;
}

void Fixture::trigger() {
  if (!two_phase(technique_) || infected_ || processes_.empty()) {
    throw FixtureError(FixtureError::Kind::ProtocolViolation,
                       std::string(to_string(technique_)) + " does not accept trigger now");
  }
  auto& actor = processes_.back();
  actor.send("trigger");
  actor.expect("INFECTED", kReadyTimeout);
  if (technique_ == Technique::fd_pass_pair) processes_.front().expect("INFECTED", kReadyTimeout);
  if (technique_ == Technique::fd_pass_fork) {
    // the heir must exist before anyone measures
    const auto deadline = std::chrono::steady_clock::now() + kReadyTimeout;
    const std::string children = "/proc/" + std::to_string(actor.pid()) + "/task/" + std::to_string(actor.pid()) +
                                 "/children";
    for (;;) {
      std::FILE* f = std::fopen(children.c_str(), "r");
      int c = f ? std::fgetc(f) : EOF;
      if (f) std::fclose(f);
      if (c != EOF || std::chrono::steady_clock::now() > deadline) break;
      ::usleep(1000);
    }
  }
  infected_ = true;
}

void Fixture::teardown() {
  for (auto it = processes_.rbegin(); it != processes_.rend(); ++it) it->stop();
  processes_.clear();
  if (scratch_ && !scratch_->empty()) {
    std::error_code ec;
    fs::remove_all(*scratch_, ec);
    scratch_.reset();
  }
}

} // namespace imtk::testing
