#include "ssmr/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace ssmr {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string_view to_string(StreamTag tag) {
  switch (tag) {
    case StreamTag::A:
      return "A";
    case StreamTag::B:
      return "B";
    case StreamTag::C:
      return "C";
    case StreamTag::Delta:
      return "Delta";
    case StreamTag::Input:
      return "Input";
  }
  return "?";
}

StreamTag parse_stream_tag(std::string_view name) {
  if (name == "A") return StreamTag::A;
  if (name == "B") return StreamTag::B;
  if (name == "C") return StreamTag::C;
  if (name == "Delta" || name == "D" || name == "dt" || name == "delta") return StreamTag::Delta;
  if (name == "Input" || name == "input") return StreamTag::Input;
  throw ValidationError("unknown stream tag '" + std::string(name) +
                        "' (expected A, B, C, Delta or Input)");
}

std::string StreamSet::to_string() const {
  if (empty()) return "none";
  std::string out;
  for (auto t : {StreamTag::A, StreamTag::B, StreamTag::C, StreamTag::Delta, StreamTag::Input}) {
    if (!contains(t)) continue;
    if (!out.empty()) out += '+';
    out += ssmr::to_string(t);
  }
  return out;
}

StreamSet StreamSet::parse(std::string_view text) {
  StreamSet set;
  if (text.empty() || text == "none" || text == "{}") return set;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find_first_of("+,", start);
    if (end == std::string_view::npos) end = text.size();
    auto token = text.substr(start, end - start);
    while (!token.empty() && token.front() == ' ') token.remove_prefix(1);
    while (!token.empty() && token.back() == ' ') token.remove_suffix(1);
    if (!token.empty()) set.insert(parse_stream_tag(token));
    start = end + 1;
  }
  return set;
}

// ---------------------------------------------------------------------------
// BasicTensor

template <typename T>
BasicTensor<T>::BasicTensor() : data_(std::make_shared<const std::vector<T>>(1, T{0})) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d <= 0) throw ShapeError("tensor shape " + shape_to_string(shape_) + " has a non-positive dimension");
  }
  if (shape_numel(shape_) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("tensor shape " + shape_to_string(shape_) + " needs " +
                     std::to_string(shape_numel(shape_)) + " values, got " +
                     std::to_string(values.size()));
  }
  data_ = std::make_shared<const std::vector<T>>(std::move(values));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T{0});
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value) {
  const auto n = shape_numel(shape);
  if (n < 0) throw ShapeError("negative tensor size");
  return BasicTensor(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), value));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return BasicTensor(Shape{}, std::vector<T>{value});
}

template <typename T>
T BasicTensor<T>::item() const {
  if (data_->size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_to_string(shape_));
  }
  return (*data_)[0];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  BasicTensor out = *this;
  out.tape_ = nullptr;
  out.node_ = kNoNode;
  return out;
}

template <typename T>
bool BasicTensor<T>::same_values(const BasicTensor& other) const {
  return shape_ == other.shape_ && *data_ == *other.data_;
}

template <typename T>
const BasicTensor<T>& BasicGradMap<T>::at(NodeId id) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) throw ValidationError("no gradient recorded for node " + std::to_string(id));
  return it->second;
}

// ---------------------------------------------------------------------------
// BasicTape

template <typename T>
std::span<T> BasicTape<T>::GradSink::operator[](std::size_t input) {
  const NodeId id = inputs_.at(input);
  if (id == kNoNode) return {};
  auto& g = grads_[static_cast<std::size_t>(id)];
  if (g.empty()) {
    g.assign(static_cast<std::size_t>(shape_numel(tape_.nodes_[static_cast<std::size_t>(id)].shape)), T{0});
  }
  return {g.data(), g.size()};
}

template <typename T>
BasicTensor<T> BasicTape<T>::leaf(const TensorT& value, std::optional<StreamTag> tag) {
  nodes_.push_back(Node{value.shape(), {}, nullptr, tag});
  return link(value, static_cast<NodeId>(nodes_.size() - 1));
}

template <typename T>
BasicTensor<T> BasicTape<T>::record(const TensorT& value, std::initializer_list<const TensorT*> inputs,
                                    BackwardFn backward) {
  return record(value, std::span<const TensorT* const>(inputs.begin(), inputs.size()), std::move(backward));
}

template <typename T>
BasicTensor<T> BasicTape<T>::record(const TensorT& value, std::span<const TensorT* const> inputs,
                                    BackwardFn backward) {
  Node node{value.shape(), {}, std::move(backward), std::nullopt};
  node.inputs.reserve(inputs.size());
  for (const TensorT* in : inputs) {
    if (in->tape_ == this) {
      node.inputs.push_back(in->node_);
    } else if (in->tape_ == nullptr) {
      node.inputs.push_back(kNoNode);
    } else {
      throw Error("op mixes tensors from different tapes");
    }
  }
  nodes_.push_back(std::move(node));
  return link(value, static_cast<NodeId>(nodes_.size() - 1));
}

template <typename T>
void BasicTape<T>::set_tag(NodeId id, StreamTag tag) {
  auto& node = nodes_.at(static_cast<std::size_t>(id));
  if (node.tag && *node.tag != tag) {
    throw Error("node " + std::to_string(id) + " already carries stream tag " +
                std::string(to_string(*node.tag)));
  }
  node.tag = tag;
}

template <typename T>
std::optional<StreamTag> BasicTape<T>::tag_of(NodeId id) const {
  return nodes_.at(static_cast<std::size_t>(id)).tag;
}

template <typename T>
BasicGradMap<T> BasicTape<T>::backward(const TensorT& loss, std::span<const NodeId> leaves) {
  if (loss.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_to_string(loss.shape()));
  }
  if (loss.tape_ != this) throw Error("backward: loss is not recorded on this tape");

  std::vector<std::vector<T>> grads(nodes_.size());
  grads[static_cast<std::size_t>(loss.node_)].assign(1, T{1});

  for (NodeId id = loss.node_; id >= 0; --id) {
    auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) continue;
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    if (node.tag && mask_.contains(*node.tag)) {
      std::fill(g.begin(), g.end(), T{0});
      continue;
    }
    if (!node.backward) continue;
    GradSink sink(*this, node.inputs, grads);
    node.backward(std::span<const T>(g.data(), g.size()), sink);
  }

  BasicGradMap<T> out;
  for (NodeId leaf : leaves) {
    if (leaf < 0 || static_cast<std::size_t>(leaf) >= nodes_.size()) {
      throw ValidationError("backward: leaf " + std::to_string(leaf) + " is not on this tape");
    }
    const auto& shape = nodes_[static_cast<std::size_t>(leaf)].shape;
    auto& g = grads[static_cast<std::size_t>(leaf)];
    if (g.empty()) {
      out.set(leaf, TensorT::zeros(shape));
    } else {
      out.set(leaf, TensorT(shape, std::move(g)));
    }
  }
  return out;
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class BasicGradMap<float>;
template class BasicGradMap<double>;
template class BasicTape<float>;
template class BasicTape<double>;

}  // namespace ssmr
