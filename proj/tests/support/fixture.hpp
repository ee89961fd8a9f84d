#pragma once

#include <sys/types.h>

#include <chrono>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace imtk::testing {

/// Built fixture binaries; empty paths when the fixtures were not built.
struct FixtureBinaries {
  std::filesystem::path hardened; // PIE, full RELRO
  std::filesystem::path lazy;     // no PIE, no RELRO, lazy binding
  std::filesystem::path got_probe;
  std::filesystem::path static_target;
  std::filesystem::path payload; // shared object for the dlopen mode
};

const FixtureBinaries& fixture_binaries();
/// Every binary above exists.
bool fixtures_built();

enum class Technique {
  benign_control,
  wx_mapping,
  anon_exec_thread,
  dlopen_inject,
  got_hook,
  plt_hook,
  text_modify,
  text_remap,
  fd_pass_pair,
  fd_pass_fork,
  got_probe,
  static_control,
};

std::string_view to_string(Technique technique) noexcept;

class FixtureError : public std::runtime_error {
public:
  enum class Kind { BuildMissing, SpawnFailed, EnvironmentUnsupported, ProtocolViolation };
  FixtureError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

private:
  Kind kind_;
};

/// One spawned program speaking the line protocol on its stdin/stdout.
class FixtureProcess {
public:
  FixtureProcess(const std::filesystem::path& binary, const std::vector<std::string>& args);
  FixtureProcess(FixtureProcess&&) noexcept;
  FixtureProcess& operator=(FixtureProcess&&) = delete;
  FixtureProcess(const FixtureProcess&) = delete;
  ~FixtureProcess();

  pid_t pid() const noexcept { return pid_; }
  void send(const std::string& line);
  /// Next stdout line, without the newline; nullopt on timeout or EOF.
  std::optional<std::string> read_line(std::chrono::milliseconds timeout);
  /// Reads one line and throws unless it equals `expected`.
  void expect(const std::string& expected, std::chrono::milliseconds timeout);
  /// Sends "exit", waits, kills on timeout. Idempotent.
  void stop();

private:
  pid_t pid_ = -1;
  int in_ = -1;
  int out_ = -1;
  std::string buffer_;
};

/// A running fixture: one or two processes plus the files it owns.
class Fixture {
public:
  static constexpr std::chrono::milliseconds kReadyTimeout{2000};

  /// Throws FixtureError(BuildMissing) when the binaries are absent.
  static Fixture spawn(Technique technique);

  Fixture(Fixture&&) noexcept = default;
  Fixture& operator=(Fixture&&) noexcept = default;
  ~Fixture();

  Technique technique() const noexcept { return technique_; }
  std::vector<pid_t> pids() const;
  /// Two-phase techniques only; throws ProtocolViolation otherwise.
  void trigger();
  bool infected() const noexcept { return infected_; }
  /// Reaps all processes and removes owned files. Idempotent.
  void teardown();

private:
  Fixture() = default;
  Technique technique_ = Technique::benign_control;
  std::vector<FixtureProcess> processes_;
  std::optional<std::filesystem::path> scratch_;
  bool infected_ = false;
};

bool two_phase(Technique technique) noexcept;

} // namespace imtk::testing
