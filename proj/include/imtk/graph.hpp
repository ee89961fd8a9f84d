#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace imtk {

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

enum class NodeKind {
  SystemInfo,
  Package,
  File,
  FileRegion,
  Process,
  MemoryMapping,
  Namespace,
  FileDescriptor,
  Socket,
  GotTable,
};

enum class EdgeLabel {
  runs,      // Process -> File
  maps,      // Process -> MemoryMapping
  backed_by, // MemoryMapping -> FileRegion
  region_of, // FileRegion -> File
  parent_of, // Process -> Process
  member_of, // Process -> Namespace
  holds,     // Process -> FileDescriptor
  refers_to, // FileDescriptor -> File | Socket
  installed, // SystemInfo -> Package
  measured,  // SystemInfo -> File
};

std::string_view to_string(NodeKind kind) noexcept;
std::string_view to_string(EdgeLabel label) noexcept;
std::optional<NodeKind> parse_node_kind(std::string_view text) noexcept;
std::optional<EdgeLabel> parse_edge_label(std::string_view text) noexcept;

/// Whether `label` may connect a `src` node to a `dst` node.
bool edge_allowed(NodeKind src, EdgeLabel label, NodeKind dst) noexcept;

/// Identity-key attribute names for a node kind, in id order.
std::span<const std::string_view> identity_keys(NodeKind kind) noexcept;

// ---------------------------------------------------------------------------
// Attribute values
// ---------------------------------------------------------------------------

/// Virtual address. Serialized as a lowercase "0x" hex string.
struct Address {
  std::uint64_t value = 0;
  friend auto operator<=>(const Address&, const Address&) = default;
};

std::string format_address(std::uint64_t value);
std::optional<std::uint64_t> parse_address(std::string_view text) noexcept;

/// Attribute scalar or homogeneous list. Keys ending in "_addr" hold an
/// Address, keys ending in "_addrs" hold an Address list; no other key may.
/// Keys named "digest" or ending in "_digest" hold lowercase hex strings of the
/// snapshot's declared algorithm length.
using Value = std::variant<bool, std::int64_t, Address, std::string,
                           std::vector<std::string>, std::vector<std::int64_t>,
                           std::vector<Address>>;

using Attributes = std::map<std::string, Value, std::less<>>;

bool is_address_key(std::string_view key) noexcept;
bool is_address_list_key(std::string_view key) noexcept;
bool is_digest_key(std::string_view key) noexcept;

/// Renders a scalar as it appears inside a node id (lists are not renderable).
std::string render_scalar(const Value& value);

bool is_valid_utf8(std::string_view text) noexcept;
/// Replaces invalid UTF-8 sequences with U+FFFD.
std::string sanitize_utf8(std::string_view text);

// ---------------------------------------------------------------------------
// Nodes and edges
// ---------------------------------------------------------------------------

struct NodeId {
  std::string value;
  friend auto operator<=>(const NodeId&, const NodeId&) = default;
  bool empty() const noexcept { return value.empty(); }
};

/// `<kind>:` followed by the identity-key values joined by '/'.
/// Throws Error(MissingIdentityKey) when a key is absent or empty.
NodeId make_node_id(NodeKind kind, const Attributes& attributes);

struct Node {
  NodeId id;
  NodeKind kind = NodeKind::File;
  Attributes attributes;

  const Value* find(std::string_view key) const;
  std::optional<std::string> get_string(std::string_view key) const;
  std::optional<std::int64_t> get_int(std::string_view key) const;
  std::optional<std::uint64_t> get_address(std::string_view key) const;
  std::optional<bool> get_bool(std::string_view key) const;
  const std::vector<std::string>* get_strings(std::string_view key) const;
  const std::vector<std::int64_t>* get_ints(std::string_view key) const;
  const std::vector<Address>* get_addresses(std::string_view key) const;

  friend bool operator==(const Node&, const Node&) = default;
};

struct Edge {
  NodeId src;
  EdgeLabel label = EdgeLabel::runs;
  NodeId dst;

  /// Lexicographic by (src, label name, dst).
  friend std::strong_ordering operator<=>(const Edge& a, const Edge& b);
  friend bool operator==(const Edge&, const Edge&) = default;
};

// ---------------------------------------------------------------------------
// Snapshot metadata
// ---------------------------------------------------------------------------

struct Scope {
  enum class Kind { root_only, all, uid_filter };
  Kind kind = Kind::root_only;
  std::vector<std::int64_t> uids; // sorted, unique; only for uid_filter

  bool admits(std::int64_t uid) const;
  /// "root_only", "all", or "uid_filter:<uid>,<uid>..."
  std::string to_string() const;
  /// Accepts the canonical form plus the CLI spellings "root" and "uid:<n>[,<n>]".
  static Scope parse(std::string_view text);

  friend bool operator==(const Scope&, const Scope&) = default;
};

struct CollectionError {
  std::string target;
  std::string reason;
  friend auto operator<=>(const CollectionError&, const CollectionError&) = default;
};

struct SnapshotMeta {
  std::string host;
  std::int64_t taken_at = 0; // UTC, seconds since the epoch
  std::string collector_version;
  Scope scope;
  std::string hash_algorithm = "sha256";
  std::vector<std::string> warnings;   // sorted, unique
  std::vector<CollectionError> errors; // sorted, unique
  std::map<std::string, std::int64_t> counters;

  void add_warning(std::string text);
  void add_error(std::string target, std::string reason);
  void bump(const std::string& counter, std::int64_t by = 1);

  friend bool operator==(const SnapshotMeta&, const SnapshotMeta&) = default;
};

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

struct MergeOptions;
struct DeserializeOptions;

class MeasurementGraph {
public:
  MeasurementGraph() = default;
  explicit MeasurementGraph(SnapshotMeta meta) : meta_(std::move(meta)) {}

  const SnapshotMeta& meta() const noexcept { return meta_; }
  SnapshotMeta& meta() noexcept { return meta_; }

  /// Inserts a node or unions attributes into the existing node with the same
  /// derived id. Throws MissingIdentityKey, AttributeConflict, SchemaViolation
  /// (ill-typed attribute) or IntegrityViolation (second SystemInfo node).
  NodeId upsert_node(NodeKind kind, Attributes attributes);

  /// Idempotent. Throws DanglingEndpoint or SchemaViolation.
  void add_edge(const NodeId& src, EdgeLabel label, const NodeId& dst);

  const Node* find(const NodeId& id) const;
  bool contains(const NodeId& id) const { return find(id) != nullptr; }

  const std::map<NodeId, Node>& nodes() const noexcept { return nodes_; }
  const std::set<Edge>& edges() const noexcept { return edges_; }

  std::vector<const Node*> nodes_of_kind(NodeKind kind) const;
  /// Destinations of `src --label--> *`, ordered.
  std::vector<NodeId> successors(const NodeId& src, EdgeLabel label) const;
  /// Sources of `* --label--> dst`. Linear in the edge count.
  std::vector<NodeId> predecessors(const NodeId& dst, EdgeLabel label) const;

  /// Throws IntegrityViolation on a dangling edge, schema-violating edge,
  /// id/attribute mismatch or duplicate SystemInfo.
  void check_integrity() const;

  friend bool operator==(const MeasurementGraph&, const MeasurementGraph&) = default;

private:
  friend MeasurementGraph merge(const MeasurementGraph&, const MeasurementGraph&,
                                const MergeOptions&);
  friend MeasurementGraph deserialize(std::string_view, const DeserializeOptions&);

  void insert_node(Node node);

  SnapshotMeta meta_;
  std::map<NodeId, Node> nodes_;
  std::set<Edge> edges_;
};

struct MergeOptions {
  std::int64_t max_skew_seconds = 600;
};

/// Commutative, associative, idempotent union of two partial graphs of the
/// same snapshot. Throws MetaMismatch or AttributeConflict.
MeasurementGraph merge(const MeasurementGraph& a, const MeasurementGraph& b,
                       const MergeOptions& options = {});

inline constexpr int kBundleVersion = 1;

/// Canonical bundle bytes: compact JSON, sorted nodes/edges/keys, trailing
/// newline. Throws IntegrityViolation.
std::string serialize_canonical(const MeasurementGraph& graph);

struct DeserializeOptions {
  /// Drop nodes of unknown kind (and their edges) instead of failing.
  bool permissive = false;
};

/// Throws ParseError (with byte offset), IntegrityViolation or UnknownKind.
MeasurementGraph deserialize(std::string_view bytes, const DeserializeOptions& options = {});

} // namespace imtk
