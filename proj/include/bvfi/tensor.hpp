#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace bvfi {

using Shape = std::vector<int>;

inline long long shape_numel(const Shape& s) {
    long long n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

namespace detail {

// One recorded value in the computation graph. Leaves (inputs, parameters)
// have no backward_fn; op results remember their parents and how to push
// gradients back to them.
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    long op_seq = -1;  // creation order; -1 for leaves
    bool consumed = false;
    std::function<void()> backward_fn;
    std::vector<std::shared_ptr<Node>> parents;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

inline std::atomic<long>& op_counter() {
    static std::atomic<long> c{0};
    return c;
}

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

/// Dense N-D array of T with optional gradient tracking. Canonical image
/// layout is BCHW, row-major. Copying a Tensor copies the handle, not the
/// storage; values are treated as immutable once an op has consumed them.
template <typename T>
class Tensor {
  public:
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;

    static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

    static Tensor full(Shape shape, T v) {
        Tensor t;
        t.n_ = std::make_shared<detail::Node<T>>();
        t.n_->shape = std::move(shape);
        t.n_->value.assign(shape_numel(t.n_->shape), v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<T> data) {
        check(shape_numel(shape) == (long long)data.size(),
              "tensor data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
        Tensor t;
        t.n_ = std::make_shared<detail::Node<T>>();
        t.n_->shape = std::move(shape);
        t.n_->value = std::move(data);
        return t;
    }

    /// Builds an op result. Parents are recorded only while grad mode is on
    /// and some input actually requires a gradient; otherwise the result is
    /// a plain leaf and the graph stays empty (inference path).
    static Tensor op(Shape shape, std::vector<T> value, std::vector<NodePtr> parents) {
        Tensor t = from(std::move(shape), std::move(value));
        if (!detail::grad_mode()) return t;
        bool needs = false;
        for (const auto& p : parents)
            if (p && p->requires_grad) needs = true;
        if (!needs) return t;
        t.n_->requires_grad = true;
        t.n_->op_seq = detail::op_counter()++;
        t.n_->parents = std::move(parents);
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape.at(i); }
    int ndim() const { return (int)n_->shape.size(); }
    long long numel() const { return (long long)n_->value.size(); }

    std::vector<T>& data() { return n_->value; }
    const std::vector<T>& data() const { return n_->value; }
    T* ptr() { return n_->value.data(); }
    const T* ptr() const { return n_->value.data(); }

    bool requires_grad() const { return n_ && n_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        n_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return n_ && !n_->grad.empty(); }
    const std::vector<T>& grad() const {
        check(has_grad(), "tensor has no gradient");
        return n_->grad;
    }
    std::vector<T>& grad_mut() {
        n_->ensure_grad();
        return n_->grad;
    }
    void zero_grad() {
        if (n_) n_->grad.clear();
    }

    T item() const {
        check(numel() == 1, "item() on tensor with " + std::to_string(numel()) + " elements");
        return n_->value[0];
    }

    /// Value copy with no graph linkage.
    Tensor detached() const {
        Tensor t;
        t.n_ = std::make_shared<detail::Node<T>>();
        t.n_->shape = n_->shape;
        t.n_->value = n_->value;
        return t;
    }

    bool all_finite() const {
        for (T v : n_->value)
            if (!std::isfinite((double)v)) return false;
        return true;
    }
    void assert_finite(const std::string& what) const {
        check(all_finite(), "non-finite values in " + what);
    }

    NodePtr node() const { return n_; }
    void set_backward(std::function<void()> fn) {
        if (n_->op_seq >= 0) n_->backward_fn = std::move(fn);
    }
    bool recording() const { return n_ && n_->op_seq >= 0; }

  private:
    NodePtr n_;
};

/// Disables graph recording for the current thread while alive.
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
};

/// Reverse-mode sweep from `root`. Ops run in exact reverse execution order
/// and accumulate additively into their parents' grad buffers. Re-running
/// backward through an already-swept op is an error: rebuild the forward.
template <typename T>
void backward(const Tensor<T>& root) {
    using NodeT = detail::Node<T>;
    check(root.defined() && root.requires_grad(), "backward: root does not require grad");

    std::vector<std::shared_ptr<NodeT>> work{root.node()};
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> visited;
    while (!work.empty()) {
        auto n = work.back();
        work.pop_back();
        if (!n || !visited.insert(n.get()).second) continue;
        if (n->backward_fn) order.push_back(n.get());
        for (auto& p : n->parents) work.push_back(p);
    }
    std::sort(order.begin(), order.end(), [](NodeT* a, NodeT* b) { return a->op_seq > b->op_seq; });

    for (NodeT* n : order)
        check(!n->consumed, "backward: graph already swept; run a new forward first");

    root.node()->ensure_grad();
    for (auto& g : root.node()->grad) g += T(1);

    for (NodeT* n : order) {
        n->consumed = true;
        if (!n->grad.empty()) n->backward_fn();
    }
}

}  // namespace bvfi
