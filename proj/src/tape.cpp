#include "inn/tape.hpp"

#include "inn/errors.hpp"

namespace inn {

bool Tape::tracks(std::initializer_list<const Tensor*> inputs) const {
  if (!recording()) return false;
  for (const Tensor* t : inputs) {
    if (t && t->requires_grad()) return true;
  }
  return false;
}

void Tape::record(Tensor output, BackwardFn fn) {
  if (!recording()) return;
  output.set_requires_grad(true);
  nodes_.push_back(Node{std::move(output), std::move(fn)});
}

std::size_t Tape::backward(Tensor loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  std::size_t start = nodes_.size();
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    if (nodes_[i].output.same_storage(loss)) {
      start = i;
      break;
    }
  }
  if (start == nodes_.size() && !loss.requires_grad()) {
    throw ContractError("backward on a tensor that was not produced by a recorded forward pass");
  }
  loss.grad_buffer()[0] += 1.0f;
  if (start == nodes_.size()) return 0;

  std::size_t visited = 0;
  for (std::size_t i = start + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.output.has_grad()) continue;
    check_finite(node.output.grad(), "backward gradient");
    node.fn(node.output.grad());
    ++visited;
  }
  return visited;
}

}  // namespace inn
