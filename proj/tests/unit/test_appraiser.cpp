#include "generators.hpp"
#include "oracle.hpp"
#include "synthetic.hpp"

#include "imtk/appraiser.hpp"
#include "imtk/error.hpp"
#include "imtk/process_collector.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <unistd.h>

#include <filesystem>
#include <fstream>

using namespace imtk;
using namespace imtk::appraise;
using namespace imtk::testing;
namespace fs = std::filesystem;

namespace {

constexpr const char* kLibc = "/usr/lib/x86_64-linux-gnu/libc.so.6";
constexpr const char* kLoader = "/usr/lib/x86_64-linux-gnu/ld-linux-x86-64.so.2";
const std::string kDigestA(64, 'a');
const std::string kDigestB(64, 'b');

/// A well-formed process: its image, libc and the loader mapped, default namespaces.
NodeId healthy(GraphBuilder& b, std::int64_t pid, const std::string& exe, std::int64_t ppid = 1,
               std::int64_t start_time = 1000) {
  NodeId p = b.process(pid, exe, {exe, kLibc, kLoader}, ppid, start_time);
  b.image(p, 0x555555554000, exe);
  b.image(p, 0x7f0000000000, kLibc);
  b.image(p, 0x7f0000100000, kLoader);
  b.mapping(p, 0x7ffff7fc1000, 0x7ffff7fc3000, "r-xp", "[vdso]");
  b.default_namespaces(p);
  return p;
}

std::set<int> alert_rules(const MeasurementGraph& g, const Policy& policy = default_policy(),
                          const MeasurementGraph* previous = nullptr) {
  return appraise::appraise(g, previous, policy).alert_rules();
}

std::vector<Finding> of_rule(const std::vector<Finding>& findings, int rule, Severity severity) {
  std::vector<Finding> out;
  for (const auto& f : findings) {
    if (f.rule == rule && f.severity == severity) out.push_back(f);
  }
  return out;
}

bool mentions(const std::vector<Finding>& findings, const std::string& text) {
  return std::any_of(findings.begin(), findings.end(),
                     [&](const Finding& f) { return f.summary.find(text) != std::string::npos; });
}

Policy policy_from(const std::string& json) { return parse_policy(json); }

GotSlot slot(std::string symbol, std::uint64_t vaddr, std::uint64_t value, std::string cls,
             std::string target = "", std::int64_t offset = -1) {
  return GotSlot{std::move(symbol), vaddr, value, std::move(cls), std::move(target), offset};
}

} // namespace

// ---------------------------------------------------------------------------
// Reference graphs

TEST(Reference, QuietHostHasNoFindings) {
  auto report = appraise::appraise(quiet_graph(), nullptr, default_policy());
  EXPECT_TRUE(report.pass);
  EXPECT_TRUE(report.findings.empty()) << render_text(report);
}

TEST(Reference, HorsePillRaisesOnlyTheNamespaceRule) {
  EXPECT_EQ(alert_rules(horse_pill_graph()), std::set<int>{6});
}

TEST(Reference, UserlandExecRaisesAnonymousCodeAndMissingImage) {
  EXPECT_EQ(alert_rules(userland_exec_graph()), (std::set<int>{3, 4}));
}

// ---------------------------------------------------------------------------
// Rules 1-4

TEST(MappingRules, WritableExecutableAnonymousMapping) {
  GraphBuilder b;
  NodeId p = healthy(b, 100, "/usr/bin/app");
  NodeId m = b.mapping(p, 0x7f1000000000, 0x7f1000001000, "rwxp");
  auto findings = check_mapping_rules(b.graph(), default_policy());
  auto r1 = of_rule(findings, 1, Severity::alert);
  ASSERT_EQ(r1.size(), 1u);
  EXPECT_EQ(r1[0].subject, m);
  EXPECT_EQ(r1[0].evidence.at("pid"), "100");
  EXPECT_EQ(r1[0].evidence.at("perms"), "rwxp");
  EXPECT_EQ(r1[0].evidence.at("start_addr"), "0x7f1000000000");
  EXPECT_EQ(r1[0].evidence.at("end_addr"), "0x7f1000001000");
  EXPECT_EQ(r1[0].evidence.at("exe_path"), "/usr/bin/app");
  EXPECT_EQ(alert_rules(b.graph()), (std::set<int>{1, 3}));
}

TEST(MappingRules, WritableExecutableFileMappingIsOnlyRuleOne) {
  GraphBuilder b;
  NodeId p = healthy(b, 100, "/usr/bin/app");
  b.mapping(p, 0x555555560000, 0x555555561000, "rwxp", "/usr/bin/app", 0x4000);
  EXPECT_EQ(alert_rules(b.graph()), std::set<int>{1});
}

TEST(MappingRules, WhitelistsSuppressTheirOwnRuleOnly) {
  GraphBuilder b;
  NodeId p = healthy(b, 100, "/usr/lib/jvm/bin/java");
  b.mapping(p, 0x7f1000000000, 0x7f1000001000, "rwxp");
  EXPECT_EQ(alert_rules(b.graph(), policy_from(R"({"wx_whitelist":["java"]})")), std::set<int>{3});
  EXPECT_EQ(alert_rules(b.graph(), policy_from(R"({"anon_exec_whitelist":["java"]})")), std::set<int>{1});
  EXPECT_EQ(alert_rules(b.graph(), policy_from(R"({"wx_whitelist":["java"],"anon_exec_whitelist":["java"]})")),
            std::set<int>{});
  EXPECT_TRUE(alert_rules(b.graph(), load_policy(std::string(IMTK_SOURCE_DIR) + "/config/default-policy.json")).empty());
}

TEST(MappingRules, FullPathMatching) {
  GraphBuilder b;
  NodeId p = healthy(b, 100, "/opt/vendor/bin/java");
  b.mapping(p, 0x7f1000000000, 0x7f1000001000, "rwxp");
  const auto by_name = R"("wx_whitelist":["java"],"anon_exec_whitelist":["java"])";
  const auto by_path = R"("wx_whitelist":["/opt/vendor/bin/java"],"anon_exec_whitelist":["/opt/vendor/bin/java"])";
  EXPECT_TRUE(alert_rules(b.graph(), policy_from(std::string("{") + by_name + "}")).empty());
  EXPECT_EQ(alert_rules(b.graph(), policy_from(std::string("{") + by_name + R"(,"match_mode":"full_path"})")),
            (std::set<int>{1, 3}));
  EXPECT_TRUE(alert_rules(b.graph(), policy_from(std::string("{") + by_path + R"(,"match_mode":"full_path"})")).empty());
  EXPECT_EQ(alert_rules(b.graph(), policy_from(std::string("{") + by_path + "}")), (std::set<int>{1, 3}));
}

TEST(MappingRules, NonDependencyLibrary) {
  GraphBuilder b;
  NodeId p = healthy(b, 100, "/usr/bin/app");
  b.image(p, 0x7f2000000000, "/tmp/.cache/libevil.so");
  auto findings = check_mapping_rules(b.graph(), default_policy());
  auto r2 = of_rule(findings, 2, Severity::alert);
  ASSERT_EQ(r2.size(), 1u); // the r-x mapping, not the r-- or rw- ones
  EXPECT_EQ(r2[0].evidence.at("path"), "/tmp/.cache/libevil.so");
  EXPECT_EQ(alert_rules(b.graph()), std::set<int>{2});
  // an interpreter allowed to load arbitrary code
  GraphBuilder c;
  NodeId py = healthy(c, 100, "/usr/bin/python3");
  c.image(py, 0x7f2000000000, "/usr/lib/python3/dist-packages/_foo.so");
  EXPECT_TRUE(alert_rules(c.graph(), policy_from(R"({"arbitrary_load_whitelist":["python3"]})")).empty());
  EXPECT_EQ(alert_rules(c.graph()), std::set<int>{2});
}

TEST(MappingRules, MissingClosureIsAWarning) {
  GraphBuilder b;
  NodeId p = healthy(b, 100, "/usr/bin/app");
  b.set(p, "dep_closure", std::vector<std::string>{});
  // an empty closure is evidence; an absent one is not
  EXPECT_EQ(alert_rules(b.graph()), std::set<int>{2});

  GraphBuilder c;
  Attributes a = process::process_identity(7, 1);
  a["exe_path"] = std::string("/usr/bin/app");
  a["kernel_thread"] = false;
  a["state"] = std::string("S");
  NodeId q = c.graph().upsert_node(NodeKind::Process, a);
  c.graph().add_edge(q, EdgeLabel::runs, c.file("/usr/bin/app"));
  c.image(q, 0x555555554000, "/usr/bin/app");
  c.image(q, 0x7f0000000000, kLibc);
  auto findings = check_mapping_rules(c.graph(), default_policy());
  EXPECT_TRUE(of_rule(findings, 2, Severity::alert).empty());
  auto warnings = of_rule(findings, 2, Severity::warning);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_TRUE(mentions(warnings, "MissingEvidence"));
}

TEST(MappingRules, PseudoAndFilelessMappings) {
  for (const char* exempt : {"[vdso]", "[vsyscall]", "[vvar]", "[uprobes]"}) {
    GraphBuilder b;
    NodeId p = healthy(b, 100, "/usr/bin/app");
    b.mapping(p, 0xffffffffff600000, 0xffffffffff601000, "r-xp", exempt);
    EXPECT_TRUE(alert_rules(b.graph()).empty()) << exempt;
  }
  for (const char* odd : {"[stack]", "[heap]", "[anon:jit]"}) {
    GraphBuilder b;
    NodeId p = healthy(b, 100, "/usr/bin/app");
    b.mapping(p, 0x7ffe00000000, 0x7ffe00001000, "r-xp", odd);
    EXPECT_EQ(alert_rules(b.graph()), std::set<int>{3}) << odd;
  }
  for (const char* fileless : {"/memfd:payload (deleted)", "/dev/zero (deleted)", "/SYSV00000000 (deleted)"}) {
    GraphBuilder b;
    NodeId p = healthy(b, 100, "/usr/bin/app");
    b.mapping(p, 0x7f3000000000, 0x7f3000001000, "r-xp", fileless);
    EXPECT_EQ(alert_rules(b.graph()), std::set<int>{3}) << fileless;
  }
}

TEST(MappingRules, ExecutableImageMustBeMapped) {
  GraphBuilder b;
  NodeId p = b.process(100, "/usr/bin/app", {"/usr/bin/app", kLibc});
  b.image(p, 0x7f0000000000, kLibc);
  b.default_namespaces(p);
  auto r4 = of_rule(check_mapping_rules(b.graph(), default_policy()), 4, Severity::alert);
  ASSERT_EQ(r4.size(), 1u);
  EXPECT_EQ(r4[0].subject, p);
  EXPECT_EQ(r4[0].evidence.at("exe_path"), "/usr/bin/app");

  // mapped under another name for the same file (hard link) still counts
  GraphBuilder c;
  NodeId q = c.process(100, "/usr/bin/app", {"/usr/bin/app", kLibc});
  c.image(q, 0x7f0000000000, kLibc);
  NodeId text = c.mapping(q, 0x555555555000, 0x555555556000, "r-xp", "/usr/bin/app");
  c.set(text, "path", std::string("/usr/bin/app-hardlink"));
  c.set(q, "dep_closure", std::vector<std::string>{"/usr/bin/app", "/usr/bin/app-hardlink", kLibc});
  EXPECT_TRUE(of_rule(check_mapping_rules(c.graph(), default_policy()), 4, Severity::alert).empty());
}

TEST(MappingRules, PartialProcessesGetWarningsNotAlerts) {
  GraphBuilder b;
  NodeId p = b.process(100, "/usr/bin/app", {"/usr/bin/app", kLibc});
  b.set(p, "partial", true);
  auto findings = check_mapping_rules(b.graph(), default_policy());
  EXPECT_TRUE(of_rule(findings, 4, Severity::alert).empty());
  EXPECT_TRUE(mentions(findings, "partially measured"));

  GraphBuilder c;
  c.process(101, "/usr/bin/app", {"/usr/bin/app"});
  auto none = check_mapping_rules(c.graph(), default_policy());
  ASSERT_EQ(none.size(), 1u);
  EXPECT_EQ(none[0].severity, Severity::warning);
  EXPECT_TRUE(mentions(none, "no memory mappings"));
}

TEST(MappingRules, KernelThreadsAndZombiesAreSkipped) {
  GraphBuilder b;
  b.kernel_thread(2, "kthreadd");
  NodeId z = b.process(300, "/usr/bin/app");
  b.set(z, "state", std::string("Z"));
  EXPECT_TRUE(check_mapping_rules(b.graph(), default_policy()).empty());
  EXPECT_EQ(appraise::appraise(b.graph(), nullptr, default_policy()).counters.at("processes_appraised"), 0);
}

// ---------------------------------------------------------------------------
// Rule 5

TEST(TextIntegrity, ObservedVersusExpected) {
  GraphBuilder b;
  NodeId p = healthy(b, 100, "/usr/bin/app");
  NodeId text = b.mapping(p, 0x555555555000, 0x555555557000, "r-xp", "/usr/bin/app", 0x1000);
  b.set(text, "comparable", true);
  b.set(text, "observed_digest", kDigestA);
  b.set(text, "expected_digest", kDigestA);
  EXPECT_TRUE(check_text_integrity(b.graph()).empty());
  b.set(text, "observed_digest", kDigestB);
  auto findings = check_text_integrity(b.graph());
  ASSERT_EQ(findings.size(), 1u);
  EXPECT_EQ(findings[0].subject, text);
  EXPECT_EQ(findings[0].evidence.at("observed_digest"), kDigestB);
  EXPECT_EQ(findings[0].evidence.at("expected_digest"), kDigestA);
  EXPECT_EQ(alert_rules(b.graph()), std::set<int>{5});
  auto report = appraise::appraise(b.graph(), nullptr, default_policy());
  EXPECT_EQ(report.counters.at("regions_compared"), 1);
}

TEST(TextIntegrity, NotComparableRegionsAreSkippedAndCounted) {
  GraphBuilder b;
  NodeId p = healthy(b, 100, "/usr/bin/app");
  NodeId text = b.mapping(p, 0x555555555000, 0x555555557000, "r-xp", "/usr/bin/app", 0x1000);
  b.set(text, "comparable", false);
  b.set(text, "observed_digest", kDigestB);
  EXPECT_TRUE(check_text_integrity(b.graph()).empty());
  auto report = appraise::appraise(b.graph(), nullptr, default_policy());
  EXPECT_EQ(report.counters.at("regions_compared"), 0);
  EXPECT_EQ(report.counters.at("regions_not_comparable"), 1);
}

TEST(TextIntegrity, CriticalFiles) {
  GraphBuilder b;
  Attributes sys{{"os_name", std::string("x")},       {"os_version", std::string("1")},
                 {"kernel_release", std::string("6")}, {"architecture", std::string("x86_64")},
                 {"hostname", std::string("h")}};
  NodeId system = b.graph().upsert_node(NodeKind::SystemInfo, sys);
  NodeId sshd = b.file("/usr/sbin/sshd");
  b.set(sshd, "digest", kDigestA);
  b.graph().add_edge(system, EdgeLabel::measured, sshd);

  Policy same = policy_from(R"({"critical_files":{"/usr/sbin/sshd":")" + kDigestA + R"("}})");
  EXPECT_TRUE(check_text_integrity(b.graph(), same).empty());
  Policy differs = policy_from(R"({"critical_files":{"/usr/sbin/sshd":")" + kDigestB + R"("}})");
  auto findings = check_text_integrity(b.graph(), differs);
  ASSERT_EQ(findings.size(), 1u);
  EXPECT_EQ(findings[0].severity, Severity::alert);
  EXPECT_EQ(findings[0].subject, sshd);
  Policy absent = policy_from(R"({"critical_files":{"/etc/shadow":")" + kDigestA + R"("}})");
  auto missing = check_text_integrity(b.graph(), absent);
  ASSERT_EQ(missing.size(), 1u);
  EXPECT_EQ(missing[0].severity, Severity::warning);
  EXPECT_TRUE(mentions(missing, "MissingEvidence"));
}

// ---------------------------------------------------------------------------
// Rule 6

TEST(Namespaces, OtherTypesOfPidOneAreWarnings) {
  GraphBuilder b;
  NodeId init = b.process(1, "/sbin/init", {"/sbin/init"}, 0);
  b.image(init, 0x555555554000, "/sbin/init");
  b.ns(init, "pid", kDefaultPidNs);
  b.ns(init, "uts", 4026532999);
  auto findings = check_namespace_rule(b.graph(), default_policy());
  ASSERT_EQ(findings.size(), 1u);
  EXPECT_EQ(findings[0].severity, Severity::warning);
  EXPECT_EQ(findings[0].evidence.at("ns_type"), "uts");
}

TEST(Namespaces, UnreadableNamespacesOfPidOne) {
  GraphBuilder b;
  b.process(1, "/sbin/init", {"/sbin/init"}, 0);
  auto findings = check_namespace_rule(b.graph(), default_policy());
  ASSERT_EQ(findings.size(), 1u);
  EXPECT_EQ(findings[0].severity, Severity::warning);
  EXPECT_TRUE(mentions(findings, "MissingEvidence"));
}

TEST(Namespaces, KernelThreadOutsideTheInitialPidNamespace) {
  GraphBuilder b;
  NodeId fake = b.kernel_thread(4242, "kworker/0:1");
  b.ns(fake, "pid", 4026532512);
  NodeId real = b.kernel_thread(2, "kthreadd");
  b.ns(real, "pid", kDefaultPidNs);
  auto findings = check_namespace_rule(b.graph(), default_policy());
  ASSERT_EQ(findings.size(), 1u);
  EXPECT_EQ(findings[0].subject, fake);
  EXPECT_EQ(findings[0].severity, Severity::alert);
}

TEST(Namespaces, CountLimits) {
  GraphBuilder b;
  for (int i = 0; i < 4; ++i) {
    NodeId p = b.process(200 + i, "/usr/bin/app");
    b.ns(p, "net", 4026533000 + i);
  }
  EXPECT_TRUE(check_namespace_rule(b.graph(), policy_from(R"({"ns_count_limits":{"net":4}})")).empty());
  auto over = check_namespace_rule(b.graph(), policy_from(R"({"ns_count_limits":{"net":3}})"));
  ASSERT_EQ(over.size(), 1u);
  EXPECT_EQ(over[0].severity, Severity::warning);
  EXPECT_EQ(over[0].evidence.at("count"), "4");
}

// ---------------------------------------------------------------------------
// Rule 7

namespace {

struct GotPair {
  MeasurementGraph before;
  MeasurementGraph after;
};

GotPair got_pair(const std::vector<GotSlot>& then, const std::vector<GotSlot>& now, std::int64_t start_after = 1000) {
  GraphBuilder a;
  NodeId pa = healthy(a, 100, "/usr/bin/app");
  a.got_table(pa, "/usr/bin/app", then);
  GraphBuilder b(synthetic_meta("synthetic-host", 1700000060));
  NodeId pb = healthy(b, 100, "/usr/bin/app", 1, start_after);
  b.got_table(pb, "/usr/bin/app", now);
  return {a.take(), b.take()};
}

} // namespace

TEST(GotStability, LazyBindingIntoTheClosureIsQuiet) {
  auto [before, after] = got_pair({slot("getpid", 0x4018, 0x401036, "unresolved_stub")},
                                  {slot("getpid", 0x4018, 0x7f00000a1000, "resolved", kLibc, 0xa1000)});
  EXPECT_TRUE(check_got_stability(after, before).empty());
}

TEST(GotStability, StubBoundOutsideTheClosure) {
  auto [before, after] = got_pair({slot("getpid", 0x4018, 0x401036, "unresolved_stub")},
                                  {slot("getpid", 0x4018, 0x7f3000000000, "anomalous")});
  auto findings = check_got_stability(after, before);
  ASSERT_EQ(findings.size(), 1u);
  EXPECT_EQ(findings[0].severity, Severity::alert);
  EXPECT_EQ(findings[0].evidence.at("symbol"), "getpid");
  EXPECT_EQ(findings[0].evidence.at("current_class"), "anomalous");
}

TEST(GotStability, ResolvedSlotThatChangesIsAnAlertWhateverItNowPointsAt) {
  for (const char* cls : {"resolved", "anomalous", "unresolved_stub"}) {
    auto [before, after] = got_pair({slot("getuid", 0x4020, 0x7f00000b0000, "resolved", kLibc, 0xb0000)},
                                    {slot("getuid", 0x4020, 0x401200, cls, "/usr/bin/app", 0x1200)});
    auto findings = check_got_stability(after, before);
    ASSERT_EQ(findings.size(), 1u) << cls;
    EXPECT_EQ(findings[0].evidence.at("previous_value"), "0x7f00000b0000");
    EXPECT_EQ(findings[0].evidence.at("current_value"), "0x401200");
  }
}

TEST(GotStability, RestartComparesModuleRelativeValues) {
  // same (pid, object) but a new start time: ASLR moved libc
  auto [before, after] = got_pair({slot("getuid", 0x4020, 0x7f00000b0000, "resolved", kLibc, 0xb0000)},
                                  {slot("getuid", 0x4020, 0x7fa0000b0000, "resolved", kLibc, 0xb0000)}, 2000);
  auto findings = check_got_stability(after, before);
  ASSERT_EQ(findings.size(), 1u);
  EXPECT_EQ(findings[0].severity, Severity::warning);
  EXPECT_TRUE(mentions(findings, "IdentityMismatch"));

  auto [b2, a2] = got_pair({slot("getuid", 0x4020, 0x7f00000b0000, "resolved", kLibc, 0xb0000)},
                           {slot("getuid", 0x4020, 0x7fa0000c0000, "resolved", kLibc, 0xc0000)}, 2000);
  auto moved = check_got_stability(a2, b2);
  EXPECT_EQ(of_rule(moved, 7, Severity::alert).size(), 1u);
  EXPECT_EQ(of_rule(moved, 7, Severity::warning).size(), 1u);
}

TEST(GotStability, UnreadableSlotsAreNotCompared) {
  auto [before, after] = got_pair({slot("getuid", 0x4020, 0x7f00000b0000, "resolved", kLibc, 0xb0000)},
                                  {slot("getuid", 0x4020, 0, "anomalous")});
  GraphBuilder b(after.meta());
  const Node* t = after.nodes_of_kind(NodeKind::GotTable).front();
  Attributes a = t->attributes;
  a["unreadable_slot_addrs"] = std::vector<Address>{{0x400000 + 0x4020}};
  after.upsert_node(NodeKind::GotTable, a);
  EXPECT_TRUE(check_got_stability(after, before).empty());
}

TEST(GotStability, NewObjectsAndSlotsHaveNoBaseline) {
  auto [before, after] = got_pair({}, {slot("getuid", 0x4020, 0x7f3000000000, "anomalous")});
  EXPECT_TRUE(check_got_stability(after, before).empty());
}

// ---------------------------------------------------------------------------
// Rule 8

TEST(SocketContinuity, ForkedChildMayInheritASocket) {
  GraphBuilder a;
  NodeId server = healthy(a, 100, "/usr/sbin/sshd");
  a.socket_fd(server, 3, 7001);
  GraphBuilder b;
  NodeId server2 = healthy(b, 100, "/usr/sbin/sshd");
  NodeId child = healthy(b, 101, "/usr/sbin/sshd", 100);
  NodeId grandchild = healthy(b, 102, "/usr/sbin/sshd", 101);
  b.parent(server2, child);
  b.parent(child, grandchild);
  b.socket_fd(server2, 3, 7001);
  b.socket_fd(child, 3, 7001);
  b.socket_fd(grandchild, 5, 7001);
  EXPECT_TRUE(check_socket_continuity(b.graph(), a.graph()).empty());
}

TEST(SocketContinuity, UnrelatedProcessHoldingTheSocket) {
  GraphBuilder a;
  NodeId server = healthy(a, 100, "/usr/sbin/sshd");
  NodeId thief = healthy(a, 200, "/usr/bin/thief");
  a.socket_fd(server, 3, 7001);
  GraphBuilder b;
  healthy(b, 100, "/usr/sbin/sshd");
  NodeId thief2 = healthy(b, 200, "/usr/bin/thief");
  b.socket_fd(server, 3, 7001);
  b.socket_fd(thief2, 9, 7001);
  (void)thief;
  auto findings = check_socket_continuity(b.graph(), a.graph());
  ASSERT_EQ(findings.size(), 1u);
  EXPECT_EQ(findings[0].evidence.at("holder"), thief2.value);
  EXPECT_EQ(findings[0].evidence.at("socket_inode"), "7001");
  EXPECT_EQ(findings[0].evidence.at("previous_holders"), server.value);
}

TEST(SocketContinuity, SocketsWithoutHistoryAreIgnored) {
  GraphBuilder a;
  healthy(a, 100, "/usr/sbin/sshd");
  GraphBuilder b;
  NodeId p = healthy(b, 100, "/usr/sbin/sshd");
  NodeId q = healthy(b, 200, "/usr/bin/other");
  b.socket_fd(p, 3, 7001);
  b.socket_fd(q, 3, 7001);
  EXPECT_TRUE(check_socket_continuity(b.graph(), a.graph()).empty());
}

// ---------------------------------------------------------------------------
// Report

TEST(Report, RulesRunAndCounters) {
  auto g = quiet_graph();
  auto single = appraise::appraise(g, nullptr, default_policy());
  EXPECT_EQ(single.counters.at("rules_run"), 6);
  EXPECT_FALSE(single.previous_id);
  EXPECT_EQ(single.counters.at("processes_appraised"), 2);
  auto pair = appraise::appraise(g, &g, default_policy());
  EXPECT_EQ(pair.counters.at("rules_run"), 8);
  EXPECT_EQ(pair.previous_id, pair.snapshot_id);
  auto bad = appraise::appraise(horse_pill_graph(), nullptr, default_policy());
  EXPECT_FALSE(bad.pass);
  EXPECT_EQ(bad.counters.at("alerts"), static_cast<std::int64_t>(bad.alert_count()));
}

TEST(Report, SnapshotIdIsTheDigestOfTheCanonicalBundle) {
  auto g = quiet_graph();
  const auto path = fs::temp_directory_path() / ("imtk-bundle-" + std::to_string(::getpid()) + ".json");
  std::ofstream(path, std::ios::binary) << serialize_canonical(g);
  EXPECT_EQ(snapshot_id(g), run_command("sha256sum " + shell_quote(path.string())).substr(0, 64));
  fs::remove(path);
}

TEST(Report, Renderers) {
  GraphBuilder b;
  NodeId p = healthy(b, 100, "/usr/bin/app");
  b.mapping(p, 0x7f1000000000, 0x7f1000001000, "rwxp");
  auto report = appraise::appraise(b.graph(), nullptr, default_policy());
  const auto text = render_text(report);
  EXPECT_NE(text.find("verdict FAIL (2 alerts, 0 warnings)"), std::string::npos) << text;
  EXPECT_NE(text.find("rule 1 "), std::string::npos);
  EXPECT_NE(text.find("perms: rwxp"), std::string::npos);

  const auto machine = render_machine(report);
  ASSERT_EQ(machine.back(), '\n');
  auto doc = nlohmann::json::parse(machine);
  EXPECT_EQ(doc.dump() + "\n", machine); // already compact with sorted keys
  EXPECT_EQ(doc["verdict"], "fail");
  EXPECT_EQ(doc["findings"].size(), 2u);
  EXPECT_EQ(doc["findings"][0]["rule"], 1);
  EXPECT_EQ(doc["findings"][1]["rule"], 3);
  EXPECT_TRUE(doc["previous"].is_null());
  EXPECT_EQ(doc["counters"]["alerts"], 2);
}

// ---------------------------------------------------------------------------
// Policy

TEST(Policy, ShippedDefaultParsesAndRoundTrips) {
  const auto shipped = load_policy(std::string(IMTK_SOURCE_DIR) + "/config/default-policy.json");
  EXPECT_EQ(shipped.default_ns_inodes.at("pid"), kDefaultPidNs);
  EXPECT_EQ(parse_policy(policy_to_json(shipped)), shipped);
  EXPECT_EQ(parse_policy("{}"), default_policy());
  EXPECT_EQ(parse_policy(policy_to_json(default_policy())), default_policy());
}

TEST(Policy, Rejections) {
  auto rejects = [](const std::string& text) {
    try {
      parse_policy(text);
    } catch (const Error& e) {
      return e.code() == ErrorCode::PolicyParseError;
    }
    return false;
  };
  EXPECT_TRUE(rejects(R"({"wx_whitelist":["a"],"surprise":1})"));
  EXPECT_TRUE(rejects(R"({"default_ns_inodes":{"uts":1}})"));
  EXPECT_TRUE(rejects(R"({"critical_files":{"/bin/sh":"ABCDEF"}})"));
  EXPECT_TRUE(rejects(R"({"critical_files":{"/bin/sh":""}})"));
  EXPECT_TRUE(rejects(R"({"match_mode":"glob"})"));
  EXPECT_TRUE(rejects(R"({"wx_whitelist":"java"})"));
  EXPECT_TRUE(rejects(R"({"wx_whitelist":[""]})"));
  EXPECT_TRUE(rejects(R"({"ns_count_limits":{"net":"many"}})"));
  EXPECT_TRUE(rejects(R"([])"));
  EXPECT_TRUE(rejects(R"({"wx_whitelist": [)"));
  try {
    parse_policy(R"({"wx_whitelist": [)");
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("at byte"), std::string::npos);
  }
  try {
    load_policy("/nonexistent/policy.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::PolicyParseError);
  }
}

// ---------------------------------------------------------------------------
// Properties over random hosts

namespace {

constexpr int kPropertyRuns = 300;

std::set<std::pair<int, NodeId>> alert_keys(const Report& r) {
  std::set<std::pair<int, NodeId>> out;
  for (const auto& f : r.findings) {
    if (f.severity == Severity::alert) out.insert({f.rule, f.subject});
  }
  return out;
}

/// Rules 1 and 3 recomputed straight from the mapping attributes.
std::set<std::pair<int, NodeId>> oracle_rules_1_3(const MeasurementGraph& g, const Policy& policy) {
  auto listed = [&](const std::vector<std::string>& list, const Node& p) {
    auto exe = p.get_string("exe_path");
    std::string name = policy.match_mode == MatchMode::full_path ? exe.value_or("")
                       : exe ? fs::path(*exe).filename().string()
                             : p.get_string("comm").value_or("");
    return !name.empty() && std::count(list.begin(), list.end(), name) > 0;
  };
  const std::set<std::string> exempt = {"[vdso]", "[vsyscall]", "[vvar]", "[vvar_vclock]", "[uprobes]"};
  std::set<std::pair<int, NodeId>> out;
  for (const auto& e : g.edges()) {
    if (e.label != EdgeLabel::maps) continue;
    const Node* p = g.find(e.src);
    const Node* m = g.find(e.dst);
    if (p->get_bool("kernel_thread").value_or(false) || p->get_string("state") == "Z") continue;
    const auto perms = m->get_string("perms");
    if (!perms || (*perms)[2] != 'x') continue;
    if ((*perms)[1] == 'w' && !listed(policy.wx_whitelist, *p)) out.insert({1, m->id});
    const auto backing = m->get_string("backing").value_or("anon");
    const auto path = m->get_string("path").value_or("");
    const bool fileless = path.starts_with("/memfd:") || path.starts_with("/dev/zero") || path.starts_with("/SYSV");
    const bool anonymous = backing == "anon" || (backing == "pseudo" && !exempt.contains(path)) ||
                           (backing == "file" && fileless);
    if (anonymous && !listed(policy.anon_exec_whitelist, *p)) out.insert({3, m->id});
  }
  return out;
}

} // namespace

TEST(Properties, Deterministic) {
  Rng rng(11);
  for (int i = 0; i < kPropertyRuns; ++i) {
    auto host = random_host(rng);
    auto next = random_successor(host, rng);
    auto policy = random_policy(rng);
    const auto first = render_machine(appraise::appraise(next, &host, policy));
    EXPECT_EQ(first, render_machine(appraise::appraise(next, &host, policy)));
    // an equal graph built from its bytes gives the same report
    auto copy = deserialize(serialize_canonical(next));
    auto prev_copy = deserialize(serialize_canonical(host));
    EXPECT_EQ(first, render_machine(appraise::appraise(copy, &prev_copy, policy)));
  }
}

TEST(Properties, WideningAWhitelistNeverAddsAlerts) {
  Rng rng(12);
  for (int i = 0; i < kPropertyRuns; ++i) {
    auto host = random_host(rng);
    auto next = random_successor(host, rng);
    auto policy = random_policy(rng);
    auto wider = widen(policy, rng);
    auto narrow = alert_keys(appraise::appraise(next, &host, policy));
    auto wide = alert_keys(appraise::appraise(next, &host, wider));
    EXPECT_TRUE(std::includes(narrow.begin(), narrow.end(), wide.begin(), wide.end())) << "seed index " << i;
  }
}

TEST(Properties, ComparingASnapshotWithItselfRaisesNoHistoryFindings) {
  Rng rng(13);
  std::size_t got_tables = 0;
  std::size_t shared_sockets = 0;
  for (int i = 0; i < kPropertyRuns; ++i) {
    auto host = random_host(rng);
    got_tables += host.nodes_of_kind(NodeKind::GotTable).size();
    shared_sockets += host.nodes_of_kind(NodeKind::Socket).size();
    EXPECT_TRUE(check_got_stability(host, host).empty());
    EXPECT_TRUE(check_socket_continuity(host, host).empty());
  }
  EXPECT_GT(got_tables, 0u);
  EXPECT_GT(shared_sockets, 0u);
}

TEST(Properties, RulesOneAndThreeAgreeWithTheOracle) {
  Rng rng(14);
  std::size_t fired = 0;
  for (int i = 0; i < kPropertyRuns; ++i) {
    auto host = random_host(rng);
    auto policy = random_policy(rng);
    std::set<std::pair<int, NodeId>> got;
    for (const auto& f : check_mapping_rules(host, policy)) {
      if (f.severity == Severity::alert && (f.rule == 1 || f.rule == 3)) got.insert({f.rule, f.subject});
    }
    EXPECT_EQ(got, oracle_rules_1_3(host, policy));
    fired += got.size();
  }
  EXPECT_GT(fired, 0u);
}

TEST(Properties, EveryRuleFiresOnSomeRandomHost) {
  Rng rng(15);
  std::set<int> seen;
  for (int i = 0; i < kPropertyRuns && seen.size() < 8; ++i) {
    auto host = random_host(rng);
    auto next = random_successor(host, rng);
    auto rules = appraise::appraise(next, &host, random_policy(rng)).alert_rules();
    seen.insert(rules.begin(), rules.end());
  }
  EXPECT_EQ(seen, (std::set<int>{1, 2, 3, 4, 5, 6, 7, 8}));
}
