#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "gridhaze/tensor.hpp"

namespace gridhaze {

enum class OpKind {
  Conv2d,
  TransposedConv2d,
  Relu,
  Sigmoid,
  Add,
  Sub,
  Mul,
  Scale,
  ScaleChannel,
  ConcatChannels,
  SliceChannels,
  MeanAll,
  MeanSpatial,
  Huber,
  InvertHaze,
};

// Reverse-mode tape. Ops append nodes in creation order; backward replays
// them in exact reverse order. Grads of op outputs are consumed (cleared)
// once propagated, so a second backward on the same tape adds exactly one
// more full contribution to every leaf grad.
template <typename T>
class Tape {
 public:
  struct Node {
    OpKind kind;
    std::vector<std::shared_ptr<Storage<T>>> inputs;
    std::shared_ptr<Storage<T>> output;
    std::function<void()> back;
  };

  bool recording() const { return recording_; }
  void set_recording(bool r) { recording_ = r; }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void record(OpKind kind, std::vector<std::shared_ptr<Storage<T>>> inputs,
              std::shared_ptr<Storage<T>> output, std::function<void()> back) {
    nodes_.push_back(Node{kind, std::move(inputs), std::move(output), std::move(back)});
  }

  void backward(const Tensor<T>& loss) {
    require(loss.defined(), "backward: loss tensor is undefined");
    require(loss.size() == 1,
            "backward: loss must be scalar, got shape " + loss.shape().str());
    require(!nodes_.empty(), "backward: tape is empty");
    require(loss.tracked(),
            "backward: loss is untracked (no differentiable path to parameters)");
    loss.st()->grad[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      it->back();
      if (!it->output->leaf)
        std::fill(it->output->grad.begin(), it->output->grad.end(), T(0));
    }
  }

 private:
  std::vector<Node> nodes_;
  bool recording_ = true;
};

namespace detail {

// Allocates the output of an op; marks it for gradient accumulation when the
// tape is recording and any input is tracked.
template <typename T>
Tensor<T> make_op_output(Tape<T>& tape, const Shape& s, bool any_input_tracked) {
  auto out = Tensor<T>::zeros(s);
  if (tape.recording() && any_input_tracked) {
    out.st()->tracked = true;
    out.st()->leaf = false;
    out.st()->grad.assign(static_cast<std::size_t>(s.numel()), T(0));
  }
  return out;
}

}  // namespace detail

}  // namespace gridhaze
