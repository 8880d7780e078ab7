#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "sprompts/rng.hpp"

namespace sprompts::gradcore {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct ShapeError : std::runtime_error {
    ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs)
        : std::runtime_error(op + ": incompatible shapes " + shape_str(lhs) +
                             " and " + shape_str(rhs)) {}
    ShapeError(const std::string& op, const std::string& detail)
        : std::runtime_error(op + ": " + detail) {}
};

struct GradError : std::runtime_error {
    explicit GradError(const std::string& msg) : std::runtime_error(msg) {}
};

class Tensor;

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;        // allocated on first accumulation
    bool grad_populated = false;    // true once backward wrote into grad
    bool requires_grad = false;     // leaf flag: optimizer-visible parameter
    bool needs_grad = false;        // this node or an ancestor requires grad
    bool backward_ran = false;      // set on the loss node after backward()
    std::string name;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

    // Grad buffer, zero-initialized on first touch. Marks the tensor as
    // having received gradient so the optimizer can detect detached params.
    std::vector<float>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), 0.0f);
        grad_populated = true;
        return grad;
    }

    void zero_grad() {
        std::fill(grad.begin(), grad.end(), 0.0f);
        grad_populated = false;
    }
};

// Value-semantic handle to a node in the computation graph. Ops build new
// nodes whose backward closures add into parent grad buffers; graphs for
// subexpressions that do not need gradient are never recorded.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor leaf(Shape shape, std::vector<float> values,
                       bool requires_grad = false, std::string name = "") {
        if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
            throw ShapeError("leaf", "value count " + std::to_string(values.size()) +
                                         " does not match shape " + shape_str(shape));
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = std::move(shape);
        impl->data = std::move(values);
        impl->requires_grad = requires_grad;
        impl->needs_grad = requires_grad;
        impl->name = std::move(name);
        return Tensor(std::move(impl));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false, std::string name = "") {
        std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)), 0.0f);
        return leaf(std::move(shape), std::move(v), requires_grad, std::move(name));
    }

    static Tensor full(Shape shape, float value, bool requires_grad = false,
                       std::string name = "") {
        std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)), value);
        return leaf(std::move(shape), std::move(v), requires_grad, std::move(name));
    }

    static Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f,
                        bool requires_grad = false, std::string name = "") {
        std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
        for (auto& x : v) x = rng.normal(0.0f, stddev);
        return leaf(std::move(shape), std::move(v), requires_grad, std::move(name));
    }

    static Tensor from_op(Shape shape, std::vector<float> values,
                          std::vector<Tensor> parents,
                          std::function<void(TensorImpl&)> backward_fn) {
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = std::move(shape);
        impl->data = std::move(values);
        bool needs = false;
        for (const auto& p : parents) needs = needs || p.impl_->needs_grad;
        impl->needs_grad = needs;
        if (needs) {
            for (auto& p : parents) impl->parents.push_back(p.impl_);
            impl->backward_fn = std::move(backward_fn);
        }
        return Tensor(std::move(impl));
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::int64_t numel() const { return impl_->numel(); }
    bool requires_grad() const { return impl_->requires_grad; }
    bool needs_grad() const { return impl_->needs_grad; }
    const std::string& name() const { return impl_->name; }

    // Leaf-only toggle; freezing stops future graphs from touching this tensor.
    void set_requires_grad(bool on) {
        if (impl_->backward_fn)
            throw GradError("set_requires_grad: '" + impl_->name + "' is not a leaf");
        impl_->requires_grad = on;
        impl_->needs_grad = on;
    }

    const std::vector<float>& values() const { return impl_->data; }
    std::vector<float>& values_mut() { return impl_->data; }

    bool grad_populated() const { return impl_->grad_populated; }
    const std::vector<float>& grad() const {
        if (!impl_->grad_populated)
            throw GradError("grad(): no gradient populated for tensor '" +
                            impl_->name + "'");
        return impl_->grad;
    }

    float item() const {
        if (impl_->numel() != 1)
            throw ShapeError("item", "tensor has shape " + shape_str(impl_->shape));
        return impl_->data[0];
    }

    void zero_grad() { impl_->zero_grad(); }

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Reverse-mode sweep from a scalar loss. Single use per recorded graph:
// closures may release saved state, so a second call is an error.
inline void backward(const Tensor& loss) {
    auto root = loss.impl();
    if (!root) throw GradError("backward: undefined tensor");
    if (root->numel() != 1)
        throw ShapeError("backward", "loss must be scalar, got " + shape_str(root->shape));
    if (root->backward_ran)
        throw GradError("backward: graph already consumed; rebuild the forward pass");
    if (!root->needs_grad)
        throw GradError("backward: loss does not depend on any tensor requiring grad");

    // Iterative post-order topological sort over parents.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorImpl* p = node->parents[next++].get();
            if (p->needs_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad_buffer()[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn) node->backward_fn(*node);
    }
    root->backward_ran = true;
}

} // namespace sprompts::gradcore
