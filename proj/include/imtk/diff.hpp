#pragma once

#include "imtk/graph.hpp"

#include <optional>
#include <string>
#include <vector>

namespace imtk {

struct AttributeChange {
  NodeId node;
  std::string key;
  std::optional<std::string> before;
  std::optional<std::string> after;
};

struct GotDelta {
  NodeId table;
  std::string object;
  std::string symbol;
  std::uint64_t slot_vaddr = 0;
  std::uint64_t before = 0;
  std::uint64_t after = 0;
  std::string before_class;
  std::string after_class;
};

struct SocketTransition {
  std::int64_t inode = 0;
  std::vector<std::string> before_holders;
  std::vector<std::string> after_holders;
};

struct GraphDiff {
  std::vector<NodeId> added_nodes;
  std::vector<NodeId> removed_nodes;
  std::vector<Edge> added_edges;
  std::vector<Edge> removed_edges;
  std::vector<AttributeChange> changed_attributes;
  std::vector<GotDelta> got_deltas;
  std::vector<SocketTransition> socket_transitions;

  bool empty() const noexcept;
};

/// Changes from `a` to `b`, every list in canonical order.
GraphDiff diff_graphs(const MeasurementGraph& a, const MeasurementGraph& b);

/// Compact JSON with a trailing newline.
std::string render_diff(const GraphDiff& diff);

} // namespace imtk
