#pragma once

#include "imtk/graph.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace imtk::appraise {

enum class MatchMode { basename, full_path };

struct Policy {
  std::vector<std::string> wx_whitelist;             // rule 1
  std::vector<std::string> arbitrary_load_whitelist; // rule 2
  std::vector<std::string> anon_exec_whitelist;      // rule 3
  std::map<std::string, std::string> critical_files; // path -> expected digest (rule 5)
  std::map<std::string, std::int64_t> default_ns_inodes;
  /// Per namespace type; more namespaces than this is a warning.
  std::map<std::string, std::int64_t> ns_count_limits;
  MatchMode match_mode = MatchMode::basename;

  friend bool operator==(const Policy&, const Policy&) = default;
};

/// Built-in defaults: empty whitelists, the kernel's initial namespace inodes.
Policy default_policy();
/// Throws Error(PolicyParseError). Missing fields keep their defaults.
Policy parse_policy(std::string_view json);
Policy load_policy(const std::filesystem::path& path);
std::string policy_to_json(const Policy& policy);

enum class Severity { alert, warning };

std::string_view to_string(Severity severity) noexcept;

struct Finding {
  int rule = 0;
  NodeId subject;
  std::string summary;
  std::map<std::string, std::string> evidence;
  Severity severity = Severity::alert;

  friend bool operator==(const Finding&, const Finding&) = default;
};

struct Report {
  std::string snapshot_id;
  std::optional<std::string> previous_id;
  std::vector<Finding> findings; // sorted by (rule, subject)
  bool pass = true;
  std::map<std::string, std::int64_t> counters;

  std::set<int> alert_rules() const;
  std::size_t alert_count() const;
  std::size_t warning_count() const;
};

/// Content address of a graph: digest of its canonical bytes.
std::string snapshot_id(const MeasurementGraph& graph);

/// Rules 1-4 over every measured process.
std::vector<Finding> check_mapping_rules(const MeasurementGraph& graph, const Policy& policy);
/// Rule 5: comparable executable regions whose observed digest differs from
/// the expected one, and critical files whose digest differs from the policy.
std::vector<Finding> check_text_integrity(const MeasurementGraph& graph, const Policy& policy = {});
/// Rule 6.
std::vector<Finding> check_namespace_rule(const MeasurementGraph& graph, const Policy& policy);
/// Rule 7.
std::vector<Finding> check_got_stability(const MeasurementGraph& current, const MeasurementGraph& previous);
/// Rule 8.
std::vector<Finding> check_socket_continuity(const MeasurementGraph& current, const MeasurementGraph& previous);

/// Rules 1-6, plus 7-8 when `previous` is given. Throws IntegrityViolation
/// when either graph fails its integrity check.
Report appraise(const MeasurementGraph& current, const MeasurementGraph* previous, const Policy& policy);

std::string render_text(const Report& report);
/// Compact JSON document with sorted keys and a trailing newline.
std::string render_machine(const Report& report);

} // namespace imtk::appraise
