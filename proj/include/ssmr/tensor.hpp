#pragma once

// Dense row-major tensors and the reverse-mode tape they record onto.
//
// The library computes in 32-bit reals (`Tensor`). Everything is templated on
// the element type so that finite-difference oracles can re-run the exact same
// forward code in 64-bit (`Tensor64`) without a second implementation.
//
// Tensors are immutable values: the payload is shared and never written after
// construction. A tensor is "tracked" when it is linked to a node on a tape;
// ops that receive at least one tracked input record their result on that
// tape. Gradient streams can be tagged on nodes and masked at backward time.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ssmr/error.hpp"

namespace ssmr {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Named gradient streams of a selective-scan block plus the scan's state input.
enum class StreamTag : std::uint8_t { A = 0, B = 1, C = 2, Delta = 3, Input = 4 };

std::string_view to_string(StreamTag tag);
// Accepts "A", "B", "C", "Delta" (or "D", "dt"), "Input". Throws ValidationError.
StreamTag parse_stream_tag(std::string_view name);

class StreamSet {
 public:
  constexpr StreamSet() = default;
  constexpr StreamSet(std::initializer_list<StreamTag> tags) {
    for (auto t : tags) insert(t);
  }

  static constexpr StreamSet ssm_streams() {
    return {StreamTag::A, StreamTag::B, StreamTag::C, StreamTag::Delta};
  }

  constexpr bool contains(StreamTag t) const {
    return (bits_ >> static_cast<unsigned>(t)) & 1U;
  }
  constexpr void insert(StreamTag t) {
    bits_ = static_cast<std::uint8_t>(bits_ | (1U << static_cast<unsigned>(t)));
  }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr std::uint8_t bits() const { return bits_; }
  constexpr bool operator==(const StreamSet&) const = default;

  // "none" for the empty set, otherwise tags joined with '+', e.g. "A+Delta".
  std::string to_string() const;
  // Inverse of to_string; also accepts ',' as separator.
  static StreamSet parse(std::string_view text);

 private:
  std::uint8_t bits_ = 0;
};

using NodeId = std::int32_t;
inline constexpr NodeId kNoNode = -1;

template <typename T>
class BasicTape;

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  // Scalar zero.
  BasicTensor();
  BasicTensor(Shape shape, std::vector<T> values);

  static BasicTensor zeros(Shape shape);
  static BasicTensor full(Shape shape, T value);
  static BasicTensor scalar(T value);

  const Shape& shape() const { return shape_; }
  std::int64_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_->size()); }

  std::span<const T> data() const { return {data_->data(), data_->size()}; }
  T operator[](std::size_t i) const { return (*data_)[i]; }
  T item() const;
  std::vector<T> to_vector() const { return *data_; }

  BasicTape<T>* tape() const { return tape_; }
  NodeId node() const { return node_; }
  bool tracked() const { return tape_ != nullptr; }

  // Same values, no tape linkage.
  BasicTensor detach() const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_->begin(), data_->end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  // Bitwise equality of shape and values (linkage ignored).
  bool same_values(const BasicTensor& other) const;

 private:
  friend class BasicTape<T>;

  Shape shape_;
  std::shared_ptr<const std::vector<T>> data_;
  BasicTape<T>* tape_ = nullptr;
  NodeId node_ = kNoNode;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Gradients of a loss with respect to requested leaves.
template <typename T>
class BasicGradMap {
 public:
  using TensorT = BasicTensor<T>;

  void set(NodeId id, TensorT grad) { entries_.insert_or_assign(id, std::move(grad)); }
  bool contains(NodeId id) const { return entries_.count(id) != 0; }
  const TensorT& at(NodeId id) const;
  const TensorT& operator[](const TensorT& leaf) const { return at(leaf.node()); }
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<NodeId, TensorT> entries_;
};

using GradMap = BasicGradMap<float>;

// Append-only record of differentiable ops. Single-threaded; use one tape per
// independent computation (e.g. one per attacked batch).
template <typename T>
class BasicTape {
 public:
  using TensorT = BasicTensor<T>;

  // Writable gradient buffers for an op's inputs. Untracked inputs yield an
  // empty span; buffers are zero-initialized on first access.
  class GradSink {
   public:
    std::span<T> operator[](std::size_t input);

   private:
    friend class BasicTape;
    GradSink(BasicTape& tape, const std::vector<NodeId>& inputs,
             std::vector<std::vector<T>>& grads)
        : tape_(tape), inputs_(inputs), grads_(grads) {}
    BasicTape& tape_;
    const std::vector<NodeId>& inputs_;
    std::vector<std::vector<T>>& grads_;
  };

  using BackwardFn = std::function<void(std::span<const T> grad_out, GradSink& sink)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  // Registers `value` as a differentiable leaf.
  TensorT leaf(const TensorT& value, std::optional<StreamTag> tag = std::nullopt);

  // Links an already computed `value` as the output of an op over `inputs`.
  // Inputs that are not tracked on this tape receive no gradient.
  TensorT record(const TensorT& value, std::initializer_list<const TensorT*> inputs,
                 BackwardFn backward);
  TensorT record(const TensorT& value, std::span<const TensorT* const> inputs,
                 BackwardFn backward);

  // Attaches a stream tag to a node. A node carries at most one tag; re-tagging
  // with the same tag is a no-op, with a different tag an error.
  void set_tag(NodeId id, StreamTag tag);
  std::optional<StreamTag> tag_of(NodeId id) const;

  void set_mask(StreamSet mask) { mask_ = mask; }
  StreamSet mask() const { return mask_; }

  // Reverse-mode sweep in tape order. Gradient arriving at a node whose tag is
  // masked is replaced by zero and not propagated further. Leaves not reached
  // from the loss get zero gradients.
  BasicGradMap<T> backward(const TensorT& loss, std::span<const NodeId> leaves);
  BasicGradMap<T> backward(const TensorT& loss, std::initializer_list<NodeId> leaves) {
    return backward(loss, std::span<const NodeId>(leaves.begin(), leaves.size()));
  }

  std::size_t size() const { return nodes_.size(); }
  std::span<const NodeId> inputs_of(NodeId id) const { return nodes_.at(id).inputs; }

 private:
  struct Node {
    Shape shape;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    std::optional<StreamTag> tag;
  };

  TensorT link(const TensorT& value, NodeId id) {
    TensorT out = value;
    out.tape_ = this;
    out.node_ = id;
    return out;
  }

  std::vector<Node> nodes_;
  StreamSet mask_;
};

using Tape = BasicTape<float>;
using Tape64 = BasicTape<double>;

template <typename T>
void set_mask(BasicTape<T>& tape, StreamSet mask) {
  tape.set_mask(mask);
}

// Tags the node behind `t` (no-op for untracked tensors) and returns `t`.
template <typename T>
const BasicTensor<T>& tag_stream(const BasicTensor<T>& t, StreamTag tag) {
  if (t.tracked()) t.tape()->set_tag(t.node(), tag);
  return t;
}

}  // namespace ssmr
