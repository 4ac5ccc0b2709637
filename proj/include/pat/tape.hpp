#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <utility>
#include <vector>

#include "pat/errors.hpp"
#include "pat/tensor.hpp"

namespace pat {

/// Reverse-mode autodiff tape.
///
/// Operations are appended in execution order, so the recording is already a
/// topological order of the graph. `backward` walks it once in reverse.
/// A disabled tape records nothing and every op becomes a plain forward
/// evaluation (inference mode).
template <class T>
class Tape {
 public:
  explicit Tape(bool enabled = true) : enabled_(enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool enabled() const { return enabled_; }
  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  /// True when an op over `inputs` must be recorded.
  bool tracks(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!enabled_) return false;
    for (const auto* t : inputs)
      if (t->requires_grad()) return true;
    return false;
  }

  /// Registers `output` as produced by an op whose backward rule reads
  /// output.grad() and accumulates into the inputs' gradients.
  void record(Tensor<T>& output, std::function<void()> backward) {
    output.set_requires_grad(true);
    ops_.push_back(Node{output, std::move(backward)});
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates. Returns the number of
  /// backward rules that were executed.
  std::size_t backward(Tensor<T> loss) {
    if (loss.size() != 1)
      throw DimensionError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    if (ops_.empty()) throw Error("backward() on an empty tape");
    loss.ensure_grad()[0] += T(1);
    std::size_t visited = 0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->backward();
      ++visited;
    }
    return visited;
  }

 private:
  struct Node {
    Tensor<T> output;
    std::function<void()> backward;
  };

  std::vector<Node> ops_;
  bool enabled_;
};

}  // namespace pat
