#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "inn/tensor.hpp"

namespace inn {

// Define-by-run record of differentiable operations. Each recorded node owns
// whatever intermediates its backward closure captured; clear() drops them.
// A tape and the tensors it touches belong to a single thread.
class Tape {
 public:
  enum class Mode { record, inference };
  using BackwardFn = std::function<void(std::span<const float> grad_out)>;

  explicit Tape(Mode mode = Mode::record) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == Mode::record; }

  // True when an op over `inputs` should produce a tracked output.
  bool tracks(std::initializer_list<const Tensor*> inputs) const;

  void record(Tensor output, BackwardFn fn);

  // Seeds d(loss)/d(loss) = 1 and replays recorded nodes in reverse order,
  // accumulating into every reachable tensor with requires_grad. Returns the
  // number of nodes replayed.
  std::size_t backward(Tensor loss);

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor output;
    BackwardFn fn;
  };
  Mode mode_;
  std::vector<Node> nodes_;
};

}  // namespace inn
