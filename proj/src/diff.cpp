#include "imtk/diff.hpp"

#include <json.hpp>

#include <algorithm>
#include <map>
#include <set>

namespace imtk {

namespace {

using json = nlohmann::json;

std::string value_json(const Value& v) {
  return std::visit(
      [](const auto& x) -> std::string {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, std::vector<Address>>) {
          json arr = json::array();
          for (const auto& a : x) arr.push_back(format_address(a.value));
          return arr.dump();
        } else if constexpr (std::is_same_v<T, Address>) {
          return json(format_address(x.value)).dump();
        } else {
          return json(x).dump();
        }
      },
      v);
}

std::map<std::int64_t, std::vector<std::string>> socket_holders(const MeasurementGraph& g) {
  std::map<NodeId, NodeId> fd_owner;
  for (const auto& e : g.edges()) {
    if (e.label == EdgeLabel::holds) fd_owner[e.dst] = e.src;
  }
  std::map<std::int64_t, std::set<std::string>> holders;
  for (const auto& e : g.edges()) {
    if (e.label != EdgeLabel::refers_to) continue;
    const Node* n = g.find(e.dst);
    if (n == nullptr || n->kind != NodeKind::Socket) continue;
    auto owner = fd_owner.find(e.src);
    if (auto inode = n->get_int("inode"); inode && owner != fd_owner.end()) {
      holders[*inode].insert(owner->second.value);
    }
  }
  std::map<std::int64_t, std::vector<std::string>> out;
  for (auto& [inode, set] : holders) out[inode] = {set.begin(), set.end()};
  return out;
}

void diff_got(const Node& a, const Node& b, std::vector<GotDelta>& out) {
  auto index = [](const Node& t) {
    std::map<std::pair<std::string, std::uint64_t>, std::pair<std::uint64_t, std::string>> slots;
    const auto* symbols = t.get_strings("symbols");
    const auto* vaddrs = t.get_addresses("slot_vaddr_addrs");
    const auto* values = t.get_addresses("value_addrs");
    const auto* classes = t.get_strings("classes");
    if (!symbols || !vaddrs || !values || !classes) return slots;
    const std::size_t n = symbols->size();
    if (vaddrs->size() != n || values->size() != n || classes->size() != n) return slots;
    for (std::size_t i = 0; i < n; ++i) slots[{(*symbols)[i], (*vaddrs)[i].value}] = {(*values)[i].value, (*classes)[i]};
    return slots;
  };
  const auto before = index(a);
  const auto after = index(b);
  for (const auto& [key, now] : after) {
    auto it = before.find(key);
    if (it == before.end() || it->second == now) continue;
    out.push_back({b.id, b.get_string("object").value_or(""), key.first, key.second, it->second.first, now.first,
                   it->second.second, now.second});
  }
}

} // namespace

bool GraphDiff::empty() const noexcept {
  return added_nodes.empty() && removed_nodes.empty() && added_edges.empty() && removed_edges.empty() &&
         changed_attributes.empty() && got_deltas.empty() && socket_transitions.empty();
}

GraphDiff diff_graphs(const MeasurementGraph& a, const MeasurementGraph& b) {
  GraphDiff d;
  for (const auto& [id, node] : a.nodes()) {
    if (!b.contains(id)) d.removed_nodes.push_back(id);
  }
  for (const auto& [id, node] : b.nodes()) {
    const Node* old = a.find(id);
    if (old == nullptr) {
      d.added_nodes.push_back(id);
      continue;
    }
    std::set<std::string, std::less<>> keys;
    for (const auto& [k, v] : old->attributes) keys.insert(k);
    for (const auto& [k, v] : node.attributes) keys.insert(k);
    for (const auto& k : keys) {
      const Value* x = old->find(k);
      const Value* y = node.find(k);
      if (x && y && *x == *y) continue;
      d.changed_attributes.push_back({id, k, x ? std::optional(value_json(*x)) : std::nullopt,
                                      y ? std::optional(value_json(*y)) : std::nullopt});
    }
    if (node.kind == NodeKind::GotTable) diff_got(*old, node, d.got_deltas);
  }
  std::set_difference(a.edges().begin(), a.edges().end(), b.edges().begin(), b.edges().end(),
                      std::back_inserter(d.removed_edges));
  std::set_difference(b.edges().begin(), b.edges().end(), a.edges().begin(), a.edges().end(),
                      std::back_inserter(d.added_edges));

  const auto before = socket_holders(a);
  const auto after = socket_holders(b);
  for (const auto& [inode, holders] : after) {
    auto it = before.find(inode);
    if (it != before.end() && it->second != holders) d.socket_transitions.push_back({inode, it->second, holders});
  }
  return d;
}

std::string render_diff(const GraphDiff& d) {
  auto ids = [](const std::vector<NodeId>& v) {
    json arr = json::array();
    for (const auto& id : v) arr.push_back(id.value);
    return arr;
  };
  auto edges = [](const std::vector<Edge>& v) {
    json arr = json::array();
    for (const auto& e : v) arr.push_back({{"src", e.src.value}, {"label", to_string(e.label)}, {"dst", e.dst.value}});
    return arr;
  };
  json changed = json::array();
  for (const auto& c : d.changed_attributes) {
    changed.push_back({{"node", c.node.value},
                       {"key", c.key},
                       {"before", c.before ? json::parse(*c.before) : json(nullptr)},
                       {"after", c.after ? json::parse(*c.after) : json(nullptr)}});
  }
  json got = json::array();
  for (const auto& g : d.got_deltas) {
    got.push_back({{"table", g.table.value},
                   {"object", g.object},
                   {"symbol", g.symbol},
                   {"slot_vaddr", format_address(g.slot_vaddr)},
                   {"before", format_address(g.before)},
                   {"after", format_address(g.after)},
                   {"before_class", g.before_class},
                   {"after_class", g.after_class}});
  }
  json sockets = json::array();
  for (const auto& s : d.socket_transitions) {
    sockets.push_back({{"inode", s.inode}, {"before_holders", s.before_holders}, {"after_holders", s.after_holders}});
  }
  json doc = {
      {"added_nodes", ids(d.added_nodes)},
      {"removed_nodes", ids(d.removed_nodes)},
      {"added_edges", edges(d.added_edges)},
      {"removed_edges", edges(d.removed_edges)},
      {"changed_attributes", std::move(changed)},
      {"got_deltas", std::move(got)},
      {"socket_transitions", std::move(sockets)},
  };
  return doc.dump() + "\n";
}

} // namespace imtk
