#include "qcnn/graph.hpp"

#include "qcnn/errors.hpp"

namespace qcnn {

bool Graph::needs_grad(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  for (const Tensor* t : inputs)
    if (t != nullptr && t->requires_grad()) return true;
  return false;
}

void Graph::record(std::string op, std::vector<TensorPtr> inputs, TensorPtr output,
                   BackwardFn backward) {
  output->set_requires_grad(true);
  nodes_.push_back({std::move(op), std::move(inputs), std::move(output), std::move(backward)});
}

void Graph::backward(const TensorPtr& loss) {
  if (nodes_.empty()) return;
  if (loss->size() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss->shape()));
  loss->grad() += Scalar(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    // Nodes the loss never reached carry no upstream gradient.
    if (!it->output->has_grad()) continue;
    it->backward();
  }
}

}  // namespace qcnn
