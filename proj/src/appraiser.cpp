#include "imtk/appraiser.hpp"

#include "imtk/digest.hpp"
#include "imtk/error.hpp"
#include "imtk/procfs.hpp"

#include <json.hpp>

#include <algorithm>
#include <deque>
#include <sstream>

namespace imtk::appraise {

namespace {

using json = nlohmann::json;

constexpr std::string_view kExemptPseudo[] = {"[vdso]", "[vsyscall]", "[vvar]", "[vvar_vclock]", "[uprobes]"};

std::string basename_of(std::string_view path) {
  auto slash = path.rfind('/');
  return std::string(slash == std::string_view::npos ? path : path.substr(slash + 1));
}

bool is_exempt_pseudo(std::string_view path) {
  return std::find(std::begin(kExemptPseudo), std::end(kExemptPseudo), path) != std::end(kExemptPseudo);
}

/// Executable memfd or other fileless object shows up with an inode but no
/// real filesystem path.
bool is_fileless_path(std::string_view path) {
  return path.starts_with("/memfd:") || path.starts_with("/dev/zero") || path.starts_with("/SYSV");
}

std::string program_of(const Node& process, MatchMode mode) {
  auto exe = process.get_string("exe_path");
  if (mode == MatchMode::full_path) return exe.value_or("");
  if (exe) return basename_of(*exe);
  return process.get_string("comm").value_or("");
}

bool whitelisted(const std::vector<std::string>& list, const Node& process, MatchMode mode) {
  const std::string name = program_of(process, mode);
  return !name.empty() && std::find(list.begin(), list.end(), name) != list.end();
}

std::string pid_text(const Node& process) { return std::to_string(process.get_int("pid").value_or(-1)); }

Finding make_finding(int rule, const NodeId& subject, std::string summary, Severity severity,
                     std::map<std::string, std::string> evidence = {}) {
  return Finding{rule, subject, std::move(summary), std::move(evidence), severity};
}

std::string value_text(const Value& v) {
  return std::visit(
      [](const auto& x) -> std::string {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, std::vector<std::string>> || std::is_same_v<T, std::vector<std::int64_t>> ||
                      std::is_same_v<T, std::vector<Address>>) {
          std::string out;
          for (const auto& item : x) {
            if (!out.empty()) out += ",";
            out += render_scalar(Value{item});
          }
          return out;
        } else {
          return render_scalar(Value{x});
        }
      },
      v);
}

/// Measured userspace process: not a kernel thread, not a zombie.
bool userspace(const Node& process) {
  return !process.get_bool("kernel_thread").value_or(false) && process.get_string("state").value_or("") != "Z";
}

bool partial(const Node& process) {
  return process.get_bool("partial").value_or(false) || process.get_bool("elf_partial").value_or(false);
}

void sort_findings(std::vector<Finding>& findings) {
  std::sort(findings.begin(), findings.end(), [](const Finding& a, const Finding& b) {
    return std::tie(a.rule, a.subject, a.severity, a.summary, a.evidence) <
           std::tie(b.rule, b.subject, b.severity, b.summary, b.evidence);
  });
}

std::vector<std::string> string_list(const json& doc, const char* key) {
  std::vector<std::string> out;
  if (!doc.contains(key)) return out;
  const auto& v = doc.at(key);
  if (!v.is_array()) throw Error(ErrorCode::PolicyParseError, std::string(key) + " must be an array");
  for (const auto& item : v) {
    if (!item.is_string() || item.get<std::string>().empty()) {
      throw Error(ErrorCode::PolicyParseError, std::string(key) + " entries must be non-empty strings");
    }
    out.push_back(item.get<std::string>());
  }
  return out;
}

template <typename T>
std::map<std::string, T> object_map(const json& doc, const char* key) {
  std::map<std::string, T> out;
  if (!doc.contains(key)) return out;
  const auto& v = doc.at(key);
  if (!v.is_object()) throw Error(ErrorCode::PolicyParseError, std::string(key) + " must be an object");
  for (const auto& [k, item] : v.items()) {
    if constexpr (std::is_same_v<T, std::string>) {
      if (!item.is_string()) throw Error(ErrorCode::PolicyParseError, std::string(key) + "." + k + " must be a string");
      out[k] = item.template get<std::string>();
    } else {
      if (!item.is_number_integer()) {
        throw Error(ErrorCode::PolicyParseError, std::string(key) + "." + k + " must be an integer");
      }
      out[k] = item.template get<T>();
    }
  }
  return out;
}

} // namespace

std::string_view to_string(Severity severity) noexcept {
  return severity == Severity::alert ? "alert" : "warning";
}

Policy default_policy() {
  Policy p;
  // Initial namespaces have fixed inode numbers in the kernel (PROC_*_INIT_INO).
  p.default_ns_inodes = {
      {"ipc", 4026531839}, {"uts", 4026531838}, {"user", 4026531837}, {"pid", 4026531836}, {"cgroup", 4026531835},
  };
  return p;
}

Policy parse_policy(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::PolicyParseError, "at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  if (!doc.is_object()) throw Error(ErrorCode::PolicyParseError, "policy must be an object");
  static const std::set<std::string> known = {"wx_whitelist",      "arbitrary_load_whitelist",
                                              "anon_exec_whitelist", "critical_files",
                                              "default_ns_inodes",   "ns_count_limits",
                                              "match_mode"};
  for (const auto& [k, v] : doc.items()) {
    (void)v;
    if (!known.contains(k)) throw Error(ErrorCode::PolicyParseError, "unknown field " + k);
  }
  Policy p = default_policy();
  p.wx_whitelist = string_list(doc, "wx_whitelist");
  p.arbitrary_load_whitelist = string_list(doc, "arbitrary_load_whitelist");
  p.anon_exec_whitelist = string_list(doc, "anon_exec_whitelist");
  p.critical_files = object_map<std::string>(doc, "critical_files");
  for (const auto& [path, digest] : p.critical_files) {
    if (!is_lower_hex(digest) || digest.empty()) {
      throw Error(ErrorCode::PolicyParseError, "critical_files." + path + " is not a lowercase hex digest");
    }
  }
  if (doc.contains("default_ns_inodes")) p.default_ns_inodes = object_map<std::int64_t>(doc, "default_ns_inodes");
  if (!p.default_ns_inodes.contains("pid")) {
    throw Error(ErrorCode::PolicyParseError, "default_ns_inodes must cover the pid type");
  }
  p.ns_count_limits = object_map<std::int64_t>(doc, "ns_count_limits");
  if (doc.contains("match_mode")) {
    const auto& m = doc.at("match_mode");
    if (m == "basename") p.match_mode = MatchMode::basename;
    else if (m == "full_path") p.match_mode = MatchMode::full_path;
    else throw Error(ErrorCode::PolicyParseError, "match_mode must be basename or full_path");
  }
  return p;
}

Policy load_policy(const std::filesystem::path& path) {
  std::string text;
  try {
    text = procfs::read_file(path);
  } catch (const Error& e) {
    throw Error(ErrorCode::PolicyParseError, path.string() + ": " + e.what());
  }
  return parse_policy(text);
}

std::string policy_to_json(const Policy& p) {
  json doc = {
      {"wx_whitelist", p.wx_whitelist},
      {"arbitrary_load_whitelist", p.arbitrary_load_whitelist},
      {"anon_exec_whitelist", p.anon_exec_whitelist},
      {"critical_files", p.critical_files},
      {"default_ns_inodes", p.default_ns_inodes},
      {"ns_count_limits", p.ns_count_limits},
      {"match_mode", p.match_mode == MatchMode::basename ? "basename" : "full_path"},
  };
  return doc.dump(2) + "\n";
}

std::set<int> Report::alert_rules() const {
  std::set<int> out;
  for (const auto& f : findings) {
    if (f.severity == Severity::alert) out.insert(f.rule);
  }
  return out;
}

std::size_t Report::alert_count() const {
  return static_cast<std::size_t>(
      std::count_if(findings.begin(), findings.end(), [](const Finding& f) { return f.severity == Severity::alert; }));
}

std::size_t Report::warning_count() const { return findings.size() - alert_count(); }

std::string snapshot_id(const MeasurementGraph& graph) {
  return digest_bytes(serialize_canonical(graph), "sha256");
}

// ---------------------------------------------------------------------------
// Rules 1-4
// ---------------------------------------------------------------------------

std::vector<Finding> check_mapping_rules(const MeasurementGraph& graph, const Policy& policy) {
  std::vector<Finding> out;
  for (const Node* proc : graph.nodes_of_kind(NodeKind::Process)) {
    if (!userspace(*proc)) continue;
    const std::string pid = pid_text(*proc);
    const auto exe = proc->get_string("exe_path");

    std::vector<const Node*> mappings;
    for (const auto& mid : graph.successors(proc->id, EdgeLabel::maps)) {
      const Node* m = graph.find(mid);
      if (m != nullptr && m->get_string("perms")) mappings.push_back(m);
    }

    if (partial(*proc)) {
      out.push_back(make_finding(4, proc->id, "MissingEvidence: process " + pid + " was only partially measured",
                                 Severity::warning));
    }
    if (mappings.empty()) {
      if (!partial(*proc)) {
        out.push_back(make_finding(4, proc->id, "MissingEvidence: no memory mappings recorded for process " + pid,
                                   Severity::warning));
      }
      continue;
    }

    const auto* closure = proc->get_strings("dep_closure");
    std::set<std::string> allowed;
    if (closure != nullptr) allowed.insert(closure->begin(), closure->end());
    if (exe) allowed.insert(*exe);
    bool closure_gap_reported = false;

    bool exe_mapped = false;
    std::optional<std::pair<std::string, std::int64_t>> exe_file;
    for (const auto& fid : graph.successors(proc->id, EdgeLabel::runs)) {
      if (const Node* f = graph.find(fid)) {
        exe_file = std::pair{f->get_string("device").value_or(""), f->get_int("inode").value_or(0)};
      }
    }

    for (const Node* m : mappings) {
      const std::string perms = *m->get_string("perms");
      const bool exec = perms.size() > 2 && perms[2] == 'x';
      const bool write = perms.size() > 1 && perms[1] == 'w';
      const std::string backing = m->get_string("backing").value_or("anon");
      const std::string path = m->get_string("path").value_or("");
      if (!exec) continue;
      std::map<std::string, std::string> evidence{
          {"pid", pid},
          {"perms", perms},
          {"start_addr", value_text(*m->find("start_addr"))},
      };
      if (const Value* end = m->find("end_addr")) evidence["end_addr"] = value_text(*end);
      if (!path.empty()) evidence["path"] = path;
      if (exe) evidence["exe_path"] = *exe;

      if (write && !whitelisted(policy.wx_whitelist, *proc, policy.match_mode)) {
        out.push_back(make_finding(1, m->id, "writable and executable mapping in process " + pid, Severity::alert,
                                   evidence));
      }

      const bool fileless = backing == "file" && is_fileless_path(path);
      if (backing == "file" && !fileless) {
        if (exe && path == *exe) exe_mapped = true;
        if (exe_file && m->get_string("device") == exe_file->first && m->get_int("inode") == exe_file->second) {
          exe_mapped = true;
        }
        if (closure == nullptr) {
          if (!closure_gap_reported && !(exe && path == *exe) && !partial(*proc)) {
            closure_gap_reported = true;
            out.push_back(make_finding(2, proc->id,
                                       "MissingEvidence: no dependency closure recorded for process " + pid,
                                       Severity::warning));
          }
        } else if (!allowed.contains(path) &&
                   !whitelisted(policy.arbitrary_load_whitelist, *proc, policy.match_mode)) {
          out.push_back(make_finding(2, m->id, "executable mapping of a non-dependency in process " + pid,
                                     Severity::alert, evidence));
        }
      } else if (!(backing == "pseudo" && is_exempt_pseudo(path)) &&
                 !whitelisted(policy.anon_exec_whitelist, *proc, policy.match_mode)) {
        out.push_back(make_finding(3, m->id, "anonymous executable mapping in process " + pid, Severity::alert,
                                   evidence));
      }
    }

    if (exe && !exe_mapped && !partial(*proc)) {
      out.push_back(make_finding(4, proc->id, "executable " + *exe + " is not among the file-backed executable mappings",
                                 Severity::alert, {{"pid", pid}, {"exe_path", *exe}}));
    } else if (!exe && !partial(*proc)) {
      out.push_back(make_finding(4, proc->id, "MissingEvidence: no executable path recorded for process " + pid,
                                 Severity::warning));
    }
  }
  sort_findings(out);
  return out;
}

// ---------------------------------------------------------------------------
// Rule 5
// ---------------------------------------------------------------------------

std::vector<Finding> check_text_integrity(const MeasurementGraph& graph, const Policy& policy) {
  std::vector<Finding> out;
  for (const Node* m : graph.nodes_of_kind(NodeKind::MemoryMapping)) {
    if (!m->get_bool("comparable").value_or(false)) continue;
    auto observed = m->get_string("observed_digest");
    auto expected = m->get_string("expected_digest");
    if (!observed || !expected || *observed == *expected) continue;
    std::map<std::string, std::string> evidence{
        {"observed_digest", *observed},
        {"expected_digest", *expected},
        {"start_addr", value_text(*m->find("start_addr"))},
        {"process", m->get_string("process").value_or("")},
    };
    if (auto path = m->get_string("path")) evidence["path"] = *path;
    out.push_back(make_finding(5, m->id, "executable region differs from its on-disk bytes", Severity::alert,
                               std::move(evidence)));
  }
  std::set<std::string> seen;
  for (const Node* f : graph.nodes_of_kind(NodeKind::File)) {
    auto path = f->get_string("path");
    auto digest = f->get_string("digest");
    if (!path || !digest) continue;
    auto it = policy.critical_files.find(*path);
    if (it == policy.critical_files.end()) continue;
    seen.insert(*path);
    if (it->second != *digest) {
      out.push_back(make_finding(5, f->id, "critical file " + *path + " differs from its baseline", Severity::alert,
                                 {{"observed_digest", *digest}, {"expected_digest", it->second}, {"path", *path}}));
    }
  }
  if (!policy.critical_files.empty()) {
    auto systems = graph.nodes_of_kind(NodeKind::SystemInfo);
    if (!systems.empty() && !graph.successors(systems.front()->id, EdgeLabel::measured).empty()) {
      for (const auto& [path, digest] : policy.critical_files) {
        if (!seen.contains(path)) {
          out.push_back(make_finding(5, systems.front()->id, "MissingEvidence: critical file " + path + " not measured",
                                     Severity::warning, {{"path", path}}));
        }
      }
    }
  }
  sort_findings(out);
  return out;
}

// ---------------------------------------------------------------------------
// Rule 6
// ---------------------------------------------------------------------------

std::vector<Finding> check_namespace_rule(const MeasurementGraph& graph, const Policy& policy) {
  std::vector<Finding> out;
  const Node* init = nullptr;
  for (const Node* p : graph.nodes_of_kind(NodeKind::Process)) {
    if (p->get_int("pid") == 1) init = p;
  }

  auto namespaces_of = [&](const Node& proc) {
    std::map<std::string, const Node*> by_type;
    for (const auto& nid : graph.successors(proc.id, EdgeLabel::member_of)) {
      if (const Node* ns = graph.find(nid)) by_type[ns->get_string("ns_type").value_or("")] = ns;
    }
    return by_type;
  };

  if (init != nullptr) {
    auto ns = namespaces_of(*init);
    auto pid_default = policy.default_ns_inodes.find("pid");
    if (!ns.contains("pid")) {
      out.push_back(make_finding(6, init->id, "MissingEvidence: namespaces of pid 1 were not readable",
                                 Severity::warning));
    } else if (pid_default != policy.default_ns_inodes.end()) {
      auto inode = ns["pid"]->get_int("inode").value_or(0);
      if (inode != pid_default->second) {
        out.push_back(make_finding(6, init->id, "pid 1 is not in the default pid namespace", Severity::alert,
                                   {{"observed_inode", std::to_string(inode)},
                                    {"expected_inode", std::to_string(pid_default->second)}}));
      }
    }
    for (const auto& [type, expected] : policy.default_ns_inodes) {
      if (type == "pid" || !ns.contains(type)) continue;
      auto inode = ns[type]->get_int("inode").value_or(0);
      if (inode != expected) {
        out.push_back(make_finding(6, init->id, "pid 1 is not in the default " + type + " namespace",
                                   Severity::warning,
                                   {{"ns_type", type},
                                    {"observed_inode", std::to_string(inode)},
                                    {"expected_inode", std::to_string(expected)}}));
      }
    }
  }

  // Kernel threads all live in the initial pid namespace; a "kernel thread"
  // elsewhere is a userspace process wearing a kernel thread's name.
  if (auto pid_default = policy.default_ns_inodes.find("pid"); pid_default != policy.default_ns_inodes.end()) {
    for (const Node* p : graph.nodes_of_kind(NodeKind::Process)) {
      if (!p->get_bool("kernel_thread").value_or(false)) continue;
      auto ns = namespaces_of(*p);
      if (!ns.contains("pid")) continue;
      auto inode = ns["pid"]->get_int("inode").value_or(0);
      if (inode != pid_default->second) {
        out.push_back(make_finding(6, p->id, "kernel thread " + pid_text(*p) + " outside the default pid namespace",
                                   Severity::alert,
                                   {{"observed_inode", std::to_string(inode)},
                                    {"expected_inode", std::to_string(pid_default->second)}}));
      }
    }
  }

  std::map<std::string, std::vector<const Node*>> by_type;
  for (const Node* ns : graph.nodes_of_kind(NodeKind::Namespace)) {
    by_type[ns->get_string("ns_type").value_or("")].push_back(ns);
  }
  for (const auto& [type, limit] : policy.ns_count_limits) {
    auto it = by_type.find(type);
    if (it == by_type.end() || static_cast<std::int64_t>(it->second.size()) <= limit) continue;
    out.push_back(make_finding(6, it->second.front()->id,
                               std::to_string(it->second.size()) + " " + type + " namespaces exceed the expected " +
                                   std::to_string(limit),
                               Severity::warning,
                               {{"ns_type", type},
                                {"count", std::to_string(it->second.size())},
                                {"limit", std::to_string(limit)}}));
  }
  sort_findings(out);
  return out;
}

// ---------------------------------------------------------------------------
// Rule 7
// ---------------------------------------------------------------------------

namespace {

struct SlotState {
  std::uint64_t value = 0;
  std::string cls;
  std::string target;
  std::int64_t offset = -1;
};

using SlotKey = std::pair<std::string, std::uint64_t>; // symbol, link-time slot address

std::map<SlotKey, SlotState> slots_of(const Node& table) {
  std::map<SlotKey, SlotState> out;
  const auto* symbols = table.get_strings("symbols");
  const auto* slot_vaddrs = table.get_addresses("slot_vaddr_addrs");
  const auto* values = table.get_addresses("value_addrs");
  const auto* classes = table.get_strings("classes");
  const auto* targets = table.get_strings("targets");
  const auto* offsets = table.get_ints("target_offsets");
  if (!symbols || !slot_vaddrs || !values || !classes) return out;
  const std::size_t n = symbols->size();
  if (slot_vaddrs->size() != n || values->size() != n || classes->size() != n) return out;
  std::set<std::uint64_t> unreadable;
  const auto* slots = table.get_addresses("slot_addrs");
  if (const auto* faults = table.get_addresses("unreadable_slot_addrs")) {
    for (const auto& f : *faults) unreadable.insert(f.value);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (slots != nullptr && slots->size() == n && unreadable.contains((*slots)[i].value)) continue;
    SlotState s{(*values)[i].value, (*classes)[i], "", -1};
    if (targets && targets->size() == n) s.target = (*targets)[i];
    if (offsets && offsets->size() == n) s.offset = (*offsets)[i];
    out[{(*symbols)[i], (*slot_vaddrs)[i].value}] = s;
  }
  return out;
}

} // namespace

std::vector<Finding> check_got_stability(const MeasurementGraph& current, const MeasurementGraph& previous) {
  std::vector<Finding> out;

  // previous tables by (process id, object) and by (pid, object)
  std::map<std::pair<std::string, std::string>, const Node*> prev_exact;
  std::map<std::pair<std::int64_t, std::string>, const Node*> prev_by_pid;
  for (const Node* t : previous.nodes_of_kind(NodeKind::GotTable)) {
    auto proc = t->get_string("process").value_or("");
    auto object = t->get_string("object").value_or("");
    prev_exact[{proc, object}] = t;
    if (const Node* p = previous.find(NodeId{proc})) prev_by_pid[{p->get_int("pid").value_or(-1), object}] = t;
  }

  for (const Node* t : current.nodes_of_kind(NodeKind::GotTable)) {
    const auto proc = t->get_string("process").value_or("");
    const auto object = t->get_string("object").value_or("");
    const Node* cur_proc = current.find(NodeId{proc});
    const Node* prev = nullptr;
    bool restarted = false;
    if (auto it = prev_exact.find({proc, object}); it != prev_exact.end()) {
      prev = it->second;
    } else if (cur_proc != nullptr) {
      if (auto it2 = prev_by_pid.find({cur_proc->get_int("pid").value_or(-1), object}); it2 != prev_by_pid.end()) {
        prev = it2->second;
        restarted = true;
        out.push_back(make_finding(7, t->id,
                                   "IdentityMismatch: pid " + pid_text(*cur_proc) +
                                       " restarted between snapshots; comparing module-relative values",
                                   Severity::warning, {{"previous_table", it2->second->id.value}}));
      }
    }
    if (prev == nullptr) continue;

    const auto before = slots_of(*prev);
    const auto after = slots_of(*t);
    for (const auto& [key, now] : after) {
      auto it = before.find(key);
      if (it == before.end()) continue;
      const SlotState& then = it->second;
      std::map<std::string, std::string> evidence{
          {"object", object},
          {"symbol", key.first},
          {"slot_vaddr", format_address(key.second)},
          {"previous_value", format_address(then.value)},
          {"current_value", format_address(now.value)},
          {"previous_class", then.cls},
          {"current_class", now.cls},
          {"previous_target", then.target},
          {"current_target", now.target},
      };
      bool changed;
      if (restarted) {
        changed = then.target != now.target || then.offset != now.offset;
      } else {
        changed = then.value != now.value;
      }
      if (then.cls == "unresolved_stub") {
        if (now.cls == "anomalous") {
          out.push_back(make_finding(7, t->id, "lazy slot " + key.first + " bound outside the dependency closure",
                                     Severity::alert, std::move(evidence)));
        }
        continue;
      }
      if (changed) {
        out.push_back(make_finding(7, t->id, "resolved slot " + key.first + " changed", Severity::alert,
                                   std::move(evidence)));
      }
    }
  }
  sort_findings(out);
  return out;
}

// ---------------------------------------------------------------------------
// Rule 8
// ---------------------------------------------------------------------------

namespace {

/// socket inode -> ids of processes holding it
std::map<std::int64_t, std::set<NodeId>> socket_holders(const MeasurementGraph& graph,
                                                        std::map<std::int64_t, NodeId>* socket_nodes = nullptr) {
  std::map<NodeId, NodeId> fd_owner;
  for (const auto& e : graph.edges()) {
    if (e.label == EdgeLabel::holds) fd_owner[e.dst] = e.src;
  }
  std::map<std::int64_t, std::set<NodeId>> out;
  for (const auto& e : graph.edges()) {
    if (e.label != EdgeLabel::refers_to) continue;
    const Node* target = graph.find(e.dst);
    if (target == nullptr || target->kind != NodeKind::Socket) continue;
    auto inode = target->get_int("inode");
    auto owner = fd_owner.find(e.src);
    if (!inode || owner == fd_owner.end()) continue;
    out[*inode].insert(owner->second);
    if (socket_nodes) socket_nodes->emplace(*inode, target->id);
  }
  return out;
}

} // namespace

std::vector<Finding> check_socket_continuity(const MeasurementGraph& current, const MeasurementGraph& previous) {
  std::vector<Finding> out;
  std::map<std::int64_t, NodeId> socket_nodes;
  const auto now = socket_holders(current, &socket_nodes);
  const auto then = socket_holders(previous);

  std::map<NodeId, std::vector<NodeId>> children;
  for (const auto& e : current.edges()) {
    if (e.label == EdgeLabel::parent_of) children[e.src].push_back(e.dst);
  }
  auto descendants = [&](const std::set<NodeId>& roots) {
    std::set<NodeId> seen(roots.begin(), roots.end());
    std::deque<NodeId> queue(roots.begin(), roots.end());
    while (!queue.empty()) {
      NodeId id = queue.front();
      queue.pop_front();
      if (auto it = children.find(id); it != children.end()) {
        for (const auto& c : it->second) {
          if (seen.insert(c).second) queue.push_back(c);
        }
      }
    }
    return seen;
  };

  for (const auto& [inode, holders] : now) {
    auto it = then.find(inode);
    if (it == then.end()) continue;
    const auto allowed = descendants(it->second);
    for (const auto& holder : holders) {
      if (allowed.contains(holder)) continue;
      std::string previous_holders;
      for (const auto& h : it->second) {
        if (!previous_holders.empty()) previous_holders += ",";
        previous_holders += h.value;
      }
      out.push_back(make_finding(8, socket_nodes.at(inode),
                                 "socket " + std::to_string(inode) + " moved to a process that is not a descendant of its previous holder",
                                 Severity::alert,
                                 {{"socket_inode", std::to_string(inode)},
                                  {"holder", holder.value},
                                  {"previous_holders", previous_holders}}));
    }
  }
  sort_findings(out);
  return out;
}

// ---------------------------------------------------------------------------

Report appraise(const MeasurementGraph& current, const MeasurementGraph* previous, const Policy& policy) {
  Report report;
  report.snapshot_id = snapshot_id(current);
  if (previous) report.previous_id = snapshot_id(*previous);

  auto append = [&](std::vector<Finding> more) {
    report.findings.insert(report.findings.end(), std::make_move_iterator(more.begin()),
                           std::make_move_iterator(more.end()));
  };
  append(check_mapping_rules(current, policy));
  append(check_text_integrity(current, policy));
  append(check_namespace_rule(current, policy));
  std::int64_t rules_run = 6;
  if (previous) {
    append(check_got_stability(current, *previous));
    append(check_socket_continuity(current, *previous));
    rules_run = 8;
  }
  sort_findings(report.findings);
  report.pass = report.alert_count() == 0;

  std::int64_t processes = 0;
  for (const Node* p : current.nodes_of_kind(NodeKind::Process)) {
    if (userspace(*p)) ++processes;
  }
  std::int64_t compared = 0;
  std::int64_t not_comparable = 0;
  for (const Node* m : current.nodes_of_kind(NodeKind::MemoryMapping)) {
    if (!m->find("observed_digest") && !m->find("comparable")) continue;
    if (m->get_bool("comparable").value_or(false)) ++compared;
    else ++not_comparable;
  }
  report.counters = {
      {"processes_appraised", processes},
      {"rules_run", rules_run},
      {"alerts", static_cast<std::int64_t>(report.alert_count())},
      {"warnings", static_cast<std::int64_t>(report.warning_count())},
      {"regions_compared", compared},
      {"regions_not_comparable", not_comparable},
  };
  return report;
}

std::string render_text(const Report& report) {
  std::ostringstream out;
  out << "snapshot " << report.snapshot_id << "\n";
  if (report.previous_id) out << "previous " << *report.previous_id << "\n";
  out << "verdict " << (report.pass ? "PASS" : "FAIL") << " (" << report.alert_count() << " alerts, "
      << report.warning_count() << " warnings)\n";
  for (const auto& f : report.findings) {
    out << "[" << to_string(f.severity) << "] rule " << f.rule << " " << f.subject.value << "\n    " << f.summary
        << "\n";
    for (const auto& [k, v] : f.evidence) out << "      " << k << ": " << v << "\n";
  }
  for (const auto& [k, v] : report.counters) out << k << " " << v << "\n";
  return out.str();
}

std::string render_machine(const Report& report) {
  json findings = json::array();
  for (const auto& f : report.findings) {
    findings.push_back({{"rule", f.rule},
                        {"subject", f.subject.value},
                        {"summary", f.summary},
                        {"severity", std::string(to_string(f.severity))},
                        {"evidence", f.evidence}});
  }
  json doc = {
      {"snapshot", report.snapshot_id},
      {"previous", report.previous_id ? json(*report.previous_id) : json(nullptr)},
      {"verdict", report.pass ? "pass" : "fail"},
      {"findings", std::move(findings)},
      {"counters", report.counters},
  };
  return doc.dump() + "\n";
}

} // namespace imtk::appraise
