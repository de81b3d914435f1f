#pragma once

#include "qcnn/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace qcnn {

// Reverse-mode tape. Ops append one node each; backward() replays the nodes
// in reverse append order, so every node's inputs are produced before it.
class Graph {
 public:
  using BackwardFn = std::function<void()>;

  struct Node {
    std::string op;
    std::vector<TensorPtr> inputs;
    TensorPtr output;
    BackwardFn backward;
  };

  explicit Graph(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }

  // True when an op over these inputs must record a backward node.
  bool needs_grad(std::initializer_list<const Tensor*> inputs) const;

  void record(std::string op, std::vector<TensorPtr> inputs, TensorPtr output,
              BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and propagates. Gradients accumulate into the
  // grad buffers of every requires_grad tensor reached, so calling twice
  // without zeroing doubles them.
  void backward(const TensorPtr& loss);

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  std::vector<Node> nodes_;
  bool recording_;
};

}  // namespace qcnn
