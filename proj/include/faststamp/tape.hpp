#pragma once

#include "faststamp/tensor.hpp"

#include <atomic>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace faststamp {

template <typename Scalar>
class GradTape;

/// Result of a backward pass: gradients for every watched (leaf) tensor.
/// Leaves the loss never reached get zero gradients.
template <typename Scalar>
class Gradients {
 public:
  using Array = ArrayX<Scalar>;

  const Array& grad(const Tensor<Scalar>& t) const {
    if (t.node < 0 || t.tape_id != tape_id_)
      throw std::invalid_argument("gradients: tensor was not watched on this tape");
    auto it = by_node_.find(t.node);
    if (it == by_node_.end())
      throw std::invalid_argument("gradients: tensor is not a watched leaf");
    return it->second;
  }

 private:
  friend class GradTape<Scalar>;
  std::uint64_t tape_id_ = 0;
  std::unordered_map<int, Array> by_node_;
};

/// Ordered record of executed operations. Each op appends one node holding
/// its parents and a pull closure that maps the upstream gradient to parent
/// gradient contributions. Replaying nodes in reverse order yields gradients
/// for every watched tensor. Not shareable across concurrent recordings.
template <typename Scalar>
class GradTape {
 public:
  using Array = ArrayX<Scalar>;
  /// parent_grads[k] is null when parent k needs no gradient.
  using Slots = std::vector<Array*>;
  using PullFn = std::function<void(const Array& upstream, const Slots& parent_grads)>;

  GradTape() : id_(next_id()) {}
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t node_count() const { return nodes_.size(); }

  /// Registers a leaf whose gradient should be produced by backward().
  int watch(Tensor<Scalar>& t) {
    if (!t.requires_grad)
      throw std::invalid_argument("watch: tensor does not have requires_grad set");
    if (t.tape_id == id_ && t.node >= 0) return t.node;
    nodes_.push_back(Node{{}, nullptr, true, t.size()});
    t.node = static_cast<int>(nodes_.size()) - 1;
    t.tape_id = id_;
    return t.node;
  }

  /// Node id of `t` on this tape, or -1 if t is a constant w.r.t. it.
  int node_of(const Tensor<Scalar>& t) const {
    return (t.tape_id == id_ && t.node >= 0) ? t.node : -1;
  }

  bool any_tracked(std::initializer_list<const Tensor<Scalar>*> ts) const {
    for (const auto* t : ts)
      if (node_of(*t) >= 0) return true;
    return false;
  }

  /// Records `out` as produced from `parents` (entries may be -1) with the
  /// given pull closure.
  void attach(Tensor<Scalar>& out, std::vector<int> parents, PullFn pull) {
    nodes_.push_back(Node{std::move(parents), std::move(pull), false, out.size()});
    out.node = static_cast<int>(nodes_.size()) - 1;
    out.tape_id = id_;
  }

  Gradients<Scalar> backward(const Tensor<Scalar>& loss) {
    if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    int root = node_of(loss);
    if (root < 0) throw std::invalid_argument("backward: loss is not recorded on this tape");

    std::vector<Array> grads(nodes_.size());
    std::vector<char> present(nodes_.size(), 0);
    grads[root] = Array::Ones(1);
    present[root] = 1;

    Slots slots;
    for (int i = root; i >= 0; --i) {
      if (!present[i] || nodes_[i].leaf || grads[i].size() == 0) continue;
      const Node& n = nodes_[i];
      slots.assign(n.parents.size(), nullptr);
      for (std::size_t k = 0; k < n.parents.size(); ++k) {
        int p = n.parents[k];
        if (p < 0) continue;
        if (!present[p]) {
          grads[p] = Array();  // lazily sized by the pull closure via add_to
          present[p] = 1;
        }
        slots[k] = &grads[p];
      }
      n.pull(grads[i], slots);
      grads[i] = Array();  // free as we go
      present[i] = 0;
    }

    Gradients<Scalar> out;
    out.tape_id_ = id_;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].leaf) continue;
      out.by_node_[static_cast<int>(i)] = present[i] && grads[i].size() > 0
                                              ? std::move(grads[i])
                                              : Array::Zero(nodes_[i].out_size);
    }
    return out;
  }

  /// Accumulate `g` into a slot, sizing it on first touch.
  static void add_to(Array* slot, const Array& g) {
    if (!slot) return;
    if (slot->size() == 0)
      *slot = g;
    else
      *slot += g;
  }

 private:
  struct Node {
    std::vector<int> parents;
    PullFn pull;
    bool leaf;
    std::int64_t out_size;
  };

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  std::uint64_t id_;
  std::vector<Node> nodes_;
};

/// backward(tape, loss): gradients of a scalar loss w.r.t. all watched leaves.
template <typename Scalar>
Gradients<Scalar> backward(GradTape<Scalar>& tape, const Tensor<Scalar>& loss) {
  return tape.backward(loss);
}

}  // namespace faststamp
