#include "imtk/graph.hpp"

#include "imtk/digest.hpp"
#include "imtk/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <charconv>

namespace imtk {

namespace {

using json = nlohmann::json;

constexpr std::array<std::string_view, 10> kKindNames = {
    "system_info", "package", "file", "file_region", "process",
    "memory_mapping", "namespace", "file_descriptor", "socket", "got_table",
};

constexpr std::array<std::string_view, 10> kLabelNames = {
    "runs", "maps", "backed_by", "region_of", "parent_of",
    "member_of", "holds", "refers_to", "installed", "measured",
};

constexpr std::string_view kSystemInfoKeys[] = {"hostname"};
constexpr std::string_view kPackageKeys[] = {"name", "version", "arch"};
constexpr std::string_view kFileKeys[] = {"path", "device", "inode"};
constexpr std::string_view kFileRegionKeys[] = {"file", "offset", "length", "perms"};
constexpr std::string_view kProcessKeys[] = {"pid", "start_time"};
constexpr std::string_view kMappingKeys[] = {"process", "start_addr"};
constexpr std::string_view kNamespaceKeys[] = {"ns_type", "inode"};
constexpr std::string_view kFdKeys[] = {"process", "fd"};
constexpr std::string_view kSocketKeys[] = {"family", "inode"};
constexpr std::string_view kGotKeys[] = {"process", "object"};

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

[[noreturn]] void schema_error(const std::string& what) {
  throw Error(ErrorCode::SchemaViolation, what);
}

// Empty lists have no element type on the wire; pin them per key.
void normalize(std::string_view key, Value& value) {
  if (auto* ints = std::get_if<std::vector<std::int64_t>>(&value); ints && ints->empty()) {
    value = std::vector<std::string>{};
  }
  if (is_address_list_key(key)) {
    if (auto* strs = std::get_if<std::vector<std::string>>(&value); strs && strs->empty()) {
      value = std::vector<Address>{};
    }
  }
}

void validate_attribute(std::string_view key, const Value& value, std::string_view hash_algorithm) {
  if (key.empty()) schema_error("empty attribute key");
  const bool addr = is_address_key(key);
  const bool addr_list = is_address_list_key(key);
  const bool holds_addr = std::holds_alternative<Address>(value);
  const bool holds_addr_list = std::holds_alternative<std::vector<Address>>(value);
  if (addr != holds_addr || addr_list != holds_addr_list) {
    schema_error("attribute '" + std::string(key) + "' has the wrong address typing");
  }
  auto check_string = [&](const std::string& s) {
    if (!is_valid_utf8(s)) schema_error("attribute '" + std::string(key) + "' is not valid UTF-8");
  };
  if (auto* s = std::get_if<std::string>(&value)) check_string(*s);
  if (auto* l = std::get_if<std::vector<std::string>>(&value)) {
    for (const auto& s : *l) check_string(s);
  }
  if (is_digest_key(key)) {
    const auto* s = std::get_if<std::string>(&value);
    const std::size_t want = digest_hex_length(hash_algorithm);
    if (s == nullptr || want == 0 || s->size() != want || !is_lower_hex(*s)) {
      schema_error("attribute '" + std::string(key) + "' is not a " +
                   std::string(hash_algorithm) + " digest");
    }
  }
}

void append_escaped(std::string& out, std::string_view s) {
  static constexpr char kHex[] = "0123456789abcdef";
  out.push_back('"');
  for (char ch : s) {
    auto c = static_cast<unsigned char>(ch);
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\b': out += "\\b"; break;
      case '\f': out += "\\f"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default:
        if (c < 0x20) {
          out += "\\u00";
          out.push_back(kHex[c >> 4]);
          out.push_back(kHex[c & 0xf]);
        } else {
          out.push_back(ch);
        }
    }
  }
  out.push_back('"');
}

void append_value(std::string& out, const Value& value) {
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, bool>) {
          out += v ? "true" : "false";
        } else if constexpr (std::is_same_v<T, std::int64_t>) {
          out += std::to_string(v);
        } else if constexpr (std::is_same_v<T, Address>) {
          append_escaped(out, format_address(v.value));
        } else if constexpr (std::is_same_v<T, std::string>) {
          append_escaped(out, v);
        } else {
          out.push_back('[');
          bool first = true;
          for (const auto& item : v) {
            if (!first) out.push_back(',');
            first = false;
            if constexpr (std::is_same_v<typename T::value_type, std::int64_t>) {
              out += std::to_string(item);
            } else if constexpr (std::is_same_v<typename T::value_type, Address>) {
              append_escaped(out, format_address(item.value));
            } else {
              append_escaped(out, item);
            }
          }
          out.push_back(']');
        }
      },
      value);
}

[[noreturn]] void malformed(const std::string& what) {
  throw Error(ErrorCode::ParseError, "malformed bundle: " + what);
}

std::int64_t json_int(const json& j, const std::string& what) {
  if (j.is_number_integer()) {
    if (j.is_number_unsigned() && j.get<std::uint64_t>() > static_cast<std::uint64_t>(INT64_MAX)) {
      malformed(what + " out of range");
    }
    return j.get<std::int64_t>();
  }
  malformed(what + " is not an integer");
}

const std::string& json_str(const json& j, const std::string& what) {
  if (!j.is_string()) malformed(what + " is not a string");
  return j.get_ref<const std::string&>();
}

const json& member(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) malformed(where + " lacks '" + key + "'");
  return *it;
}

Address json_address(const json& j, const std::string& what) {
  auto parsed = parse_address(json_str(j, what));
  if (!parsed) malformed(what + " is not a 0x-prefixed lowercase address");
  return Address{*parsed};
}

Value decode_value(const std::string& key, const json& j) {
  const std::string where = "attribute '" + key + "'";
  if (is_address_key(key)) return json_address(j, where);
  if (is_address_list_key(key)) {
    if (!j.is_array()) malformed(where + " is not a list");
    std::vector<Address> out;
    for (const auto& item : j) out.push_back(json_address(item, where));
    return out;
  }
  if (j.is_boolean()) return j.get<bool>();
  if (j.is_number()) return json_int(j, where);
  if (j.is_string()) return j.get<std::string>();
  if (j.is_array()) {
    if (j.empty()) return std::vector<std::string>{};
    if (j.front().is_string()) {
      std::vector<std::string> out;
      for (const auto& item : j) out.push_back(json_str(item, where));
      return out;
    }
    if (j.front().is_number()) {
      std::vector<std::int64_t> out;
      for (const auto& item : j) out.push_back(json_int(item, where));
      return out;
    }
  }
  malformed(where + " has an unsupported type");
}

SnapshotMeta decode_meta(const json& j) {
  if (!j.is_object()) malformed("meta is not an object");
  SnapshotMeta meta;
  meta.host = json_str(member(j, "host", "meta"), "meta.host");
  meta.taken_at = json_int(member(j, "taken_at", "meta"), "meta.taken_at");
  meta.collector_version = json_str(member(j, "collector_version", "meta"), "meta.collector_version");
  try {
    meta.scope = Scope::parse(json_str(member(j, "scope", "meta"), "meta.scope"));
  } catch (const Error& e) {
    malformed(e.what());
  }
  meta.hash_algorithm = json_str(member(j, "hash_algorithm", "meta"), "meta.hash_algorithm");
  if (digest_hex_length(meta.hash_algorithm) == 0) {
    malformed("unsupported hash algorithm '" + meta.hash_algorithm + "'");
  }
  if (auto it = j.find("warnings"); it != j.end()) {
    if (!it->is_array()) malformed("meta.warnings is not a list");
    for (const auto& w : *it) meta.add_warning(json_str(w, "meta.warnings[]"));
  }
  if (auto it = j.find("errors"); it != j.end()) {
    if (!it->is_array()) malformed("meta.errors is not a list");
    for (const auto& e : *it) {
      if (!e.is_object()) malformed("meta.errors[] is not an object");
      meta.add_error(json_str(member(e, "target", "meta.errors[]"), "target"),
                     json_str(member(e, "reason", "meta.errors[]"), "reason"));
    }
  }
  if (auto it = j.find("counters"); it != j.end()) {
    if (!it->is_object()) malformed("meta.counters is not an object");
    for (const auto& [k, v] : it->items()) meta.counters[k] = json_int(v, "meta.counters." + k);
  }
  return meta;
}

void check_meta_compatible(const SnapshotMeta& a, const SnapshotMeta& b, const MergeOptions& options) {
  auto mismatch = [](const std::string& what) { throw Error(ErrorCode::MetaMismatch, what); };
  if (a.host != b.host) mismatch("host '" + a.host + "' vs '" + b.host + "'");
  if (a.scope != b.scope) mismatch("scope " + a.scope.to_string() + " vs " + b.scope.to_string());
  if (a.hash_algorithm != b.hash_algorithm) mismatch("hash algorithm differs");
  if (a.collector_version != b.collector_version) mismatch("collector version differs");
  std::int64_t skew = a.taken_at > b.taken_at ? a.taken_at - b.taken_at : b.taken_at - a.taken_at;
  if (skew > options.max_skew_seconds) {
    mismatch("snapshot times differ by " + std::to_string(skew) + " s");
  }
}

} // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(NodeKind kind) noexcept {
  return kKindNames[static_cast<std::size_t>(kind)];
}

std::string_view to_string(EdgeLabel label) noexcept {
  return kLabelNames[static_cast<std::size_t>(label)];
}

std::optional<NodeKind> parse_node_kind(std::string_view text) noexcept {
  for (std::size_t i = 0; i < kKindNames.size(); ++i) {
    if (kKindNames[i] == text) return static_cast<NodeKind>(i);
  }
  return std::nullopt;
}

std::optional<EdgeLabel> parse_edge_label(std::string_view text) noexcept {
  for (std::size_t i = 0; i < kLabelNames.size(); ++i) {
    if (kLabelNames[i] == text) return static_cast<EdgeLabel>(i);
  }
  return std::nullopt;
}

bool edge_allowed(NodeKind src, EdgeLabel label, NodeKind dst) noexcept {
  using K = NodeKind;
  switch (label) {
    case EdgeLabel::runs: return src == K::Process && dst == K::File;
    case EdgeLabel::maps: return src == K::Process && dst == K::MemoryMapping;
    case EdgeLabel::backed_by: return src == K::MemoryMapping && dst == K::FileRegion;
    case EdgeLabel::region_of: return src == K::FileRegion && dst == K::File;
    case EdgeLabel::parent_of: return src == K::Process && dst == K::Process;
    case EdgeLabel::member_of: return src == K::Process && dst == K::Namespace;
    case EdgeLabel::holds: return src == K::Process && dst == K::FileDescriptor;
    case EdgeLabel::refers_to:
      return src == K::FileDescriptor && (dst == K::File || dst == K::Socket);
    case EdgeLabel::installed: return src == K::SystemInfo && dst == K::Package;
    case EdgeLabel::measured: return src == K::SystemInfo && dst == K::File;
  }
  return false;
}

std::span<const std::string_view> identity_keys(NodeKind kind) noexcept {
  switch (kind) {
    case NodeKind::SystemInfo: return kSystemInfoKeys;
    case NodeKind::Package: return kPackageKeys;
    case NodeKind::File: return kFileKeys;
    case NodeKind::FileRegion: return kFileRegionKeys;
    case NodeKind::Process: return kProcessKeys;
    case NodeKind::MemoryMapping: return kMappingKeys;
    case NodeKind::Namespace: return kNamespaceKeys;
    case NodeKind::FileDescriptor: return kFdKeys;
    case NodeKind::Socket: return kSocketKeys;
    case NodeKind::GotTable: return kGotKeys;
  }
  return {};
}

std::string format_address(std::uint64_t value) {
  char buf[2 + 16];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value, 16);
  (void)ec;
  return "0x" + std::string(buf, end);
}

std::optional<std::uint64_t> parse_address(std::string_view text) noexcept {
  if (text.size() < 3 || text.size() > 18 || text.substr(0, 2) != "0x") return std::nullopt;
  std::string_view digits = text.substr(2);
  if (!is_lower_hex(digits)) return std::nullopt;
  // canonical form has no leading zeros
  if (digits.size() > 1 && digits.front() == '0') return std::nullopt;
  std::uint64_t value = 0;
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), value, 16);
  if (ec != std::errc{} || ptr != digits.data() + digits.size()) return std::nullopt;
  return value;
}

bool is_address_key(std::string_view key) noexcept { return ends_with(key, "_addr"); }
bool is_address_list_key(std::string_view key) noexcept { return ends_with(key, "_addrs"); }
bool is_digest_key(std::string_view key) noexcept {
  return key == "digest" || ends_with(key, "_digest");
}

std::string render_scalar(const Value& value) {
  if (auto* b = std::get_if<bool>(&value)) return *b ? "true" : "false";
  if (auto* i = std::get_if<std::int64_t>(&value)) return std::to_string(*i);
  if (auto* a = std::get_if<Address>(&value)) return format_address(a->value);
  if (auto* s = std::get_if<std::string>(&value)) return *s;
  throw Error(ErrorCode::SchemaViolation, "list value cannot be part of a node id");
}

bool is_valid_utf8(std::string_view text) noexcept {
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    auto c = static_cast<unsigned char>(text[i]);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xe0) == 0xc0) {
      len = 2;
      cp = c & 0x1f;
    } else if ((c & 0xf0) == 0xe0) {
      len = 3;
      cp = c & 0x0f;
    } else if ((c & 0xf8) == 0xf0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > n) return false;
    for (std::size_t k = 1; k < len; ++k) {
      auto cc = static_cast<unsigned char>(text[i + k]);
      if ((cc & 0xc0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3f);
    }
    if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) ||
        cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff)) {
      return false;
    }
    i += len;
  }
  return true;
}

std::string sanitize_utf8(std::string_view text) {
  if (is_valid_utf8(text)) return std::string(text);
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    // find the longest valid prefix starting at i (1..4 bytes)
    std::size_t step = 0;
    for (std::size_t len = 1; len <= 4 && i + len <= text.size(); ++len) {
      if (is_valid_utf8(text.substr(i, len))) {
        step = len;
        break;
      }
    }
    if (step == 0) {
      out += "\xef\xbf\xbd";
      ++i;
    } else {
      out.append(text.substr(i, step));
      i += step;
    }
  }
  return out;
}

NodeId make_node_id(NodeKind kind, const Attributes& attributes) {
  std::string id(to_string(kind));
  id.push_back(':');
  bool first = true;
  for (std::string_view key : identity_keys(kind)) {
    auto it = attributes.find(key);
    if (it == attributes.end()) {
      throw Error(ErrorCode::MissingIdentityKey,
                  std::string(to_string(kind)) + " lacks '" + std::string(key) + "'");
    }
    std::string part = render_scalar(it->second);
    if (part.empty()) {
      throw Error(ErrorCode::MissingIdentityKey,
                  std::string(to_string(kind)) + " has empty '" + std::string(key) + "'");
    }
    if (!first) id.push_back('/');
    first = false;
    id += part;
  }
  return NodeId{std::move(id)};
}

// ---------------------------------------------------------------------------

const Value* Node::find(std::string_view key) const {
  auto it = attributes.find(key);
  return it == attributes.end() ? nullptr : &it->second;
}

std::optional<std::string> Node::get_string(std::string_view key) const {
  if (const Value* v = find(key)) {
    if (auto* s = std::get_if<std::string>(v)) return *s;
  }
  return std::nullopt;
}

std::optional<std::int64_t> Node::get_int(std::string_view key) const {
  if (const Value* v = find(key)) {
    if (auto* i = std::get_if<std::int64_t>(v)) return *i;
  }
  return std::nullopt;
}

std::optional<std::uint64_t> Node::get_address(std::string_view key) const {
  if (const Value* v = find(key)) {
    if (auto* a = std::get_if<Address>(v)) return a->value;
  }
  return std::nullopt;
}

std::optional<bool> Node::get_bool(std::string_view key) const {
  if (const Value* v = find(key)) {
    if (auto* b = std::get_if<bool>(v)) return *b;
  }
  return std::nullopt;
}

const std::vector<std::string>* Node::get_strings(std::string_view key) const {
  const Value* v = find(key);
  return v ? std::get_if<std::vector<std::string>>(v) : nullptr;
}

const std::vector<std::int64_t>* Node::get_ints(std::string_view key) const {
  const Value* v = find(key);
  if (!v) return nullptr;
  if (auto* ints = std::get_if<std::vector<std::int64_t>>(v)) return ints;
  static const std::vector<std::int64_t> kEmpty;
  // an empty integer list is stored in its canonical (string-typed) form
  if (auto* s = std::get_if<std::vector<std::string>>(v); s && s->empty()) return &kEmpty;
  return nullptr;
}

const std::vector<Address>* Node::get_addresses(std::string_view key) const {
  const Value* v = find(key);
  return v ? std::get_if<std::vector<Address>>(v) : nullptr;
}

std::strong_ordering operator<=>(const Edge& a, const Edge& b) {
  if (auto c = a.src <=> b.src; c != 0) return c;
  if (auto c = to_string(a.label).compare(to_string(b.label)); c != 0) {
    return c < 0 ? std::strong_ordering::less : std::strong_ordering::greater;
  }
  return a.dst <=> b.dst;
}

// ---------------------------------------------------------------------------

bool Scope::admits(std::int64_t uid) const {
  switch (kind) {
    case Kind::root_only: return uid == 0;
    case Kind::all: return true;
    case Kind::uid_filter: return std::binary_search(uids.begin(), uids.end(), uid);
  }
  return false;
}

std::string Scope::to_string() const {
  switch (kind) {
    case Kind::root_only: return "root_only";
    case Kind::all: return "all";
    case Kind::uid_filter: {
      std::string out = "uid_filter:";
      for (std::size_t i = 0; i < uids.size(); ++i) {
        if (i) out.push_back(',');
        out += std::to_string(uids[i]);
      }
      return out;
    }
  }
  return {};
}

Scope Scope::parse(std::string_view text) {
  Scope scope;
  if (text == "root_only" || text == "root") return scope;
  if (text == "all") {
    scope.kind = Kind::all;
    return scope;
  }
  std::string_view list;
  if (text.starts_with("uid_filter:")) {
    list = text.substr(11);
  } else if (text.starts_with("uid:")) {
    list = text.substr(4);
  } else {
    throw Error(ErrorCode::ParseError, "unknown scope '" + std::string(text) + "'");
  }
  scope.kind = Kind::uid_filter;
  while (!list.empty()) {
    auto comma = list.find(',');
    std::string_view item = list.substr(0, comma);
    std::int64_t uid = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), uid);
    if (ec != std::errc{} || ptr != item.data() + item.size() || uid < 0) {
      throw Error(ErrorCode::ParseError, "bad uid '" + std::string(item) + "' in scope");
    }
    scope.uids.push_back(uid);
    if (comma == std::string_view::npos) break;
    list.remove_prefix(comma + 1);
  }
  if (scope.uids.empty()) throw Error(ErrorCode::ParseError, "uid scope without uids");
  std::sort(scope.uids.begin(), scope.uids.end());
  scope.uids.erase(std::unique(scope.uids.begin(), scope.uids.end()), scope.uids.end());
  return scope;
}

void SnapshotMeta::add_warning(std::string text) {
  auto it = std::lower_bound(warnings.begin(), warnings.end(), text);
  if (it == warnings.end() || *it != text) warnings.insert(it, std::move(text));
}

void SnapshotMeta::add_error(std::string target, std::string reason) {
  CollectionError e{std::move(target), std::move(reason)};
  auto it = std::lower_bound(errors.begin(), errors.end(), e);
  if (it == errors.end() || *it != e) errors.insert(it, std::move(e));
}

void SnapshotMeta::bump(const std::string& counter, std::int64_t by) { counters[counter] += by; }

// ---------------------------------------------------------------------------

NodeId MeasurementGraph::upsert_node(NodeKind kind, Attributes attributes) {
  for (auto& [key, value] : attributes) {
    normalize(key, value);
    validate_attribute(key, value, meta_.hash_algorithm);
  }
  NodeId id = make_node_id(kind, attributes);
  insert_node(Node{id, kind, std::move(attributes)});
  return id;
}

void MeasurementGraph::insert_node(Node node) {
  auto it = nodes_.find(node.id);
  if (it == nodes_.end()) {
    if (node.kind == NodeKind::SystemInfo) {
      for (const auto& [id, existing] : nodes_) {
        if (existing.kind == NodeKind::SystemInfo) {
          throw Error(ErrorCode::IntegrityViolation,
                      "second system_info node " + node.id.value + " beside " + id.value);
        }
      }
    }
    NodeId key = node.id;
    nodes_.emplace(std::move(key), std::move(node));
    return;
  }
  Node& existing = it->second;
  for (auto& [key, value] : node.attributes) {
    auto found = existing.attributes.find(key);
    if (found == existing.attributes.end()) {
      existing.attributes.emplace(key, std::move(value));
    } else if (found->second != value) {
      throw Error(ErrorCode::AttributeConflict,
                  node.id.value + " attribute '" + key + "' has contradictory values");
    }
  }
}

void MeasurementGraph::add_edge(const NodeId& src, EdgeLabel label, const NodeId& dst) {
  const Node* s = find(src);
  const Node* d = find(dst);
  if (s == nullptr || d == nullptr) {
    throw Error(ErrorCode::DanglingEndpoint,
                std::string(to_string(label)) + " edge " + src.value + " -> " + dst.value);
  }
  if (!edge_allowed(s->kind, label, d->kind)) {
    throw Error(ErrorCode::SchemaViolation, std::string(to_string(label)) + " from " +
                                                std::string(to_string(s->kind)) + " to " +
                                                std::string(to_string(d->kind)));
  }
  edges_.insert(Edge{src, label, dst});
}

const Node* MeasurementGraph::find(const NodeId& id) const {
  auto it = nodes_.find(id);
  return it == nodes_.end() ? nullptr : &it->second;
}

std::vector<const Node*> MeasurementGraph::nodes_of_kind(NodeKind kind) const {
  std::vector<const Node*> out;
  for (const auto& [id, node] : nodes_) {
    if (node.kind == kind) out.push_back(&node);
  }
  return out;
}

std::vector<NodeId> MeasurementGraph::successors(const NodeId& src, EdgeLabel label) const {
  std::vector<NodeId> out;
  for (auto it = edges_.lower_bound(Edge{src, label, NodeId{}});
       it != edges_.end() && it->src == src && it->label == label; ++it) {
    out.push_back(it->dst);
  }
  return out;
}

std::vector<NodeId> MeasurementGraph::predecessors(const NodeId& dst, EdgeLabel label) const {
  std::vector<NodeId> out;
  for (const auto& e : edges_) {
    if (e.label == label && e.dst == dst) out.push_back(e.src);
  }
  return out;
}

void MeasurementGraph::check_integrity() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::IntegrityViolation, what); };
  std::size_t system_infos = 0;
  for (const auto& [id, node] : nodes_) {
    if (id != node.id) fail("node keyed under a foreign id " + id.value);
    NodeId derived;
    try {
      derived = make_node_id(node.kind, node.attributes);
    } catch (const Error& e) {
      fail(e.what());
    }
    if (derived != id) fail("node id " + id.value + " does not match its identity key");
    for (const auto& [key, value] : node.attributes) {
      try {
        validate_attribute(key, value, meta_.hash_algorithm);
      } catch (const Error& e) {
        fail(id.value + ": " + e.what());
      }
    }
    if (node.kind == NodeKind::SystemInfo) ++system_infos;
  }
  if (system_infos > 1) fail("more than one system_info node");
  for (const auto& e : edges_) {
    const Node* s = find(e.src);
    const Node* d = find(e.dst);
    if (s == nullptr || d == nullptr) {
      fail("dangling " + std::string(to_string(e.label)) + " edge " + e.src.value + " -> " +
           e.dst.value);
    }
    if (!edge_allowed(s->kind, e.label, d->kind)) {
      fail("schema-violating " + std::string(to_string(e.label)) + " edge " + e.src.value);
    }
  }
}

// ---------------------------------------------------------------------------

MeasurementGraph merge(const MeasurementGraph& a, const MeasurementGraph& b,
                       const MergeOptions& options) {
  check_meta_compatible(a.meta_, b.meta_, options);
  MeasurementGraph out = a;
  out.meta_.taken_at = std::min(a.meta_.taken_at, b.meta_.taken_at);
  for (const auto& w : b.meta_.warnings) out.meta_.add_warning(w);
  for (const auto& e : b.meta_.errors) out.meta_.add_error(e.target, e.reason);
  for (const auto& [k, v] : b.meta_.counters) {
    auto [it, inserted] = out.meta_.counters.emplace(k, v);
    if (!inserted) it->second = std::max(it->second, v);
  }
  for (const auto& [id, node] : b.nodes_) out.insert_node(node);
  out.edges_.insert(b.edges_.begin(), b.edges_.end());
  return out;
}

std::string serialize_canonical(const MeasurementGraph& graph) {
  graph.check_integrity();
  const SnapshotMeta& m = graph.meta();
  std::string out;
  out.reserve(256 + graph.nodes().size() * 256 + graph.edges().size() * 128);
  // every object's keys appear in sorted order
  out += "{\"bundle_version\":";
  out += std::to_string(kBundleVersion);
  out += ",\"edges\":[";
  bool first = true;
  for (const auto& e : graph.edges()) {
    if (!first) out.push_back(',');
    first = false;
    out += "{\"dst\":";
    append_escaped(out, e.dst.value);
    out += ",\"label\":";
    append_escaped(out, to_string(e.label));
    out += ",\"src\":";
    append_escaped(out, e.src.value);
    out.push_back('}');
  }
  out += "],\"meta\":{\"collector_version\":";
  append_escaped(out, m.collector_version);
  out += ",\"counters\":{";
  first = true;
  for (const auto& [k, v] : m.counters) {
    if (!first) out.push_back(',');
    first = false;
    append_escaped(out, k);
    out.push_back(':');
    out += std::to_string(v);
  }
  out += "},\"errors\":[";
  first = true;
  for (const auto& e : m.errors) {
    if (!first) out.push_back(',');
    first = false;
    out += "{\"reason\":";
    append_escaped(out, e.reason);
    out += ",\"target\":";
    append_escaped(out, e.target);
    out.push_back('}');
  }
  out += "],\"hash_algorithm\":";
  append_escaped(out, m.hash_algorithm);
  out += ",\"host\":";
  append_escaped(out, m.host);
  out += ",\"scope\":";
  append_escaped(out, m.scope.to_string());
  out += ",\"taken_at\":";
  out += std::to_string(m.taken_at);
  out += ",\"warnings\":[";
  first = true;
  for (const auto& w : m.warnings) {
    if (!first) out.push_back(',');
    first = false;
    append_escaped(out, w);
  }
  out += "]},\"nodes\":[";
  first = true;
  for (const auto& [id, node] : graph.nodes()) {
    if (!first) out.push_back(',');
    first = false;
    out += "{\"attrs\":{";
    bool first_attr = true;
    for (const auto& [key, value] : node.attributes) {
      if (!first_attr) out.push_back(',');
      first_attr = false;
      append_escaped(out, key);
      out.push_back(':');
      append_value(out, value);
    }
    out += "},\"id\":";
    append_escaped(out, id.value);
    out += ",\"kind\":";
    append_escaped(out, to_string(node.kind));
    out += "}";
  }
  out += "]}\n";
  return out;
}

MeasurementGraph deserialize(std::string_view bytes, const DeserializeOptions& options) {
  json doc;
  try {
    doc = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::ParseError, "at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  if (!doc.is_object()) malformed("top level is not an object");
  if (json_int(member(doc, "bundle_version", "bundle"), "bundle_version") != kBundleVersion) {
    malformed("unsupported bundle_version");
  }
  MeasurementGraph graph(decode_meta(member(doc, "meta", "bundle")));

  const json& nodes = member(doc, "nodes", "bundle");
  if (!nodes.is_array()) malformed("nodes is not a list");
  std::set<NodeId> dropped;
  for (const auto& jn : nodes) {
    if (!jn.is_object()) malformed("node is not an object");
    NodeId id{json_str(member(jn, "id", "node"), "node.id")};
    const std::string& kind_name = json_str(member(jn, "kind", id.value), id.value + ".kind");
    auto kind = parse_node_kind(kind_name);
    if (!kind) {
      if (!options.permissive) {
        throw Error(ErrorCode::UnknownKind, "node kind '" + kind_name + "' in " + id.value);
      }
      dropped.insert(id);
      continue;
    }
    const json& jattrs = member(jn, "attrs", id.value);
    if (!jattrs.is_object()) malformed(id.value + ".attrs is not an object");
    Node node{id, *kind, {}};
    for (const auto& [key, jv] : jattrs.items()) {
      Value v = decode_value(key, jv);
      normalize(key, v);
      try {
        validate_attribute(key, v, graph.meta_.hash_algorithm);
      } catch (const Error& e) {
        throw Error(ErrorCode::IntegrityViolation, id.value + ": " + e.what());
      }
      node.attributes.emplace(key, std::move(v));
    }
    NodeId derived;
    try {
      derived = make_node_id(*kind, node.attributes);
    } catch (const Error& e) {
      throw Error(ErrorCode::IntegrityViolation, id.value + ": " + e.what());
    }
    if (derived != id) {
      throw Error(ErrorCode::IntegrityViolation,
                  "node id " + id.value + " does not match its identity key " + derived.value);
    }
    if (graph.nodes_.contains(id)) {
      throw Error(ErrorCode::IntegrityViolation, "duplicate node " + id.value);
    }
    graph.insert_node(std::move(node));
  }

  const json& edges = member(doc, "edges", "bundle");
  if (!edges.is_array()) malformed("edges is not a list");
  for (const auto& je : edges) {
    if (!je.is_object()) malformed("edge is not an object");
    NodeId src{json_str(member(je, "src", "edge"), "edge.src")};
    NodeId dst{json_str(member(je, "dst", "edge"), "edge.dst")};
    const std::string& label_name = json_str(member(je, "label", "edge"), "edge.label");
    auto label = parse_edge_label(label_name);
    if (!label) {
      if (!options.permissive) throw Error(ErrorCode::UnknownKind, "edge label '" + label_name + "'");
      continue;
    }
    if (dropped.contains(src) || dropped.contains(dst)) continue;
    graph.edges_.insert(Edge{std::move(src), *label, std::move(dst)});
  }
  if (!dropped.empty()) {
    graph.meta_.add_warning("dropped " + std::to_string(dropped.size()) +
                            " node(s) of unknown kind");
  }
  graph.check_integrity();
  return graph;
}

} // namespace imtk
