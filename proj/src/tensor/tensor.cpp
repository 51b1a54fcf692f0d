#include "gsau/tensor.hpp"

#include <sstream>

namespace gsau {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<Impl>();
  impl->data.assign(shape_numel(shape), T(0));
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, Buffer<T> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("from_data: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from_data({}, {value});
}

template <typename T>
T Tensor<T>::item() const {
  if (impl_->data.size() != 1) {
    throw ShapeError("item: tensor of shape " + shape_str(impl_->shape) + " is not a scalar");
  }
  return impl_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_data(impl_->shape, impl_->data, false);
}

template <typename T>
Tape<T>& Tape<T>::active() {
  thread_local Tape<T> tape;
  return tape;
}

template <typename T>
void Tape<T>::record(std::string_view op, const Tensor<T>& output, BackwardFn fn) {
  auto& impl = *output.impl();
  impl.on_tape = true;
  impl.requires_grad = true;
  impl.tape_index = nodes_.size();
  nodes_.push_back(Node{op, output.impl(), std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  const auto& impl = loss.impl();
  if (!impl->on_tape || impl->tape_index >= nodes_.size() ||
      nodes_[impl->tape_index].output != impl) {
    throw ShapeError("backward: loss is not recorded on the active tape");
  }
  const std::size_t last = impl->tape_index;
  for (std::size_t i = 0; i <= last; ++i) {
    auto& out = *nodes_[i].output;
    out.grad.assign(out.data.size(), T(0));
  }
  impl->grad[0] = T(1);
  for (std::size_t i = last + 1; i-- > 0;) {
    auto& node = nodes_[i];
    node.backward(*node.output);
  }
}

template <typename T>
void Tape<T>::clear() {
  for (auto& node : nodes_) node.output->on_tape = false;
  nodes_.clear();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace gsau
