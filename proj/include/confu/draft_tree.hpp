#pragma once

#include <vector>

#include "confu/error.hpp"
#include "confu/tensor.hpp"

namespace confu {

// One drafted candidate token. Nodes are stored in materialization order
// (non-increasing cumulative log-probability), so a parent always precedes
// its children.
struct DraftTreeNode {
  int token = -1;
  int parent = -1;  // -1 = root (the last committed token)
  double cum_logprob = 0.0;
  int depth = 1;  // root children have depth 1
  TensorF64 successor_logits;  // draft logits over this node's successor
  TensorF64 child_feature;     // h-tilde fed to this node's children
};

// Budgeted tree of draft candidates hanging off the last committed token.
struct DraftTree {
  int root_token = -1;
  TensorF64 root_successor_logits;  // draft logits after the root
  TensorF64 root_child_feature;
  std::vector<DraftTreeNode> nodes;
  std::size_t budget = 0;

  std::size_t draft_node_count() const { return nodes.size(); }

  // Children of `parent` (-1 for root), in materialization order, which for
  // siblings coincides with descending draft probability.
  std::vector<int> children_of(int parent) const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(nodes.size()); ++i)
      if (nodes[i].parent == parent) out.push_back(i);
    return out;
  }

  // Node indices from a root child down to `node`, inclusive.
  std::vector<int> path_to(int node) const {
    std::vector<int> path;
    for (int n = node; n >= 0; n = nodes[n].parent) path.push_back(n);
    std::reverse(path.begin(), path.end());
    return path;
  }

  void check_invariants() const {
    for (int i = 0; i < static_cast<int>(nodes.size()); ++i) {
      const DraftTreeNode& n = nodes[i];
      if (n.parent >= i) throw ContractError("draft tree: parent index must precede node");
      double parent_cum = n.parent < 0 ? 0.0 : nodes[n.parent].cum_logprob;
      if (n.cum_logprob > parent_cum + 1e-12)
        throw ContractError("draft tree: cumulative log-prob increased along a path");
      int parent_depth = n.parent < 0 ? 0 : nodes[n.parent].depth;
      if (n.depth != parent_depth + 1) throw ContractError("draft tree: bad depth");
    }
    if (nodes.size() > budget) throw ContractError("draft tree: budget exceeded");
  }
};

}  // namespace confu
