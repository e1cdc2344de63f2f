#pragma once

// Dense float64 tensors with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto a shared node. Operations whose inputs
// require gradients record their parents and a backward rule on the result;
// `backward(loss)` linearises that graph into a Tape and runs it in reverse.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace scma {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::domain_error {
   public:
    using std::domain_error::domain_error;
};

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient is first written
    bool requires_grad = false;
    std::string op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    bool is_leaf() const { return parents.empty(); }
    std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
   public:
    Tensor();
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    /// Direct write access for leaves (optimizers, tests). Values must stay finite.
    std::span<double> mutable_data();
    double item() const;
    double operator[](std::size_t i) const { return node_->data[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on);
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad();

    bool is_leaf() const { return node_->is_leaf(); }
    const std::string& op() const { return node_->op; }

    /// Same values, no graph history.
    Tensor detach() const;

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    // Internal: used by ops and the tape.
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    const std::shared_ptr<detail::Node>& node() const { return node_; }

   private:
    std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered record of the operations that produced a scalar.
/// Every node appears after all of its inputs.
class Tape {
   public:
    static Tape record(const Tensor& output);

    std::size_t size() const { return nodes_.size(); }
    const std::vector<detail::Node*>& nodes() const { return nodes_; }
    /// Position of a node in the tape, or npos.
    std::size_t index_of(const detail::Node* node) const;

    /// Runs backward rules in reverse order, seeding d(output)/d(output) = 1.
    /// Non-leaf gradients are reset first; leaf gradients accumulate.
    void run_backward();

    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

   private:
    std::vector<detail::Node*> nodes_;
    std::shared_ptr<detail::Node> root_;
};

/// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from loss.
void backward(const Tensor& loss);

// ---------------------------------------------------------------- operations
// No implicit broadcasting. Binary elementwise ops require identical shapes;
// the scalar helpers (scale, add_scalar) and add_bias are the explicit
// exceptions.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

/// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// x [N,Cin,H,W], w [Cout,Cin,K,K] -> [N,Cout,H+2p-K+1,W+2p-K+1]; stride 1.
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t padding);
/// Adds bias [C] along axis 1 of a rank-2 [N,C] or rank-4 [N,C,H,W] tensor.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor relu(const Tensor& a);
Tensor elu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor softplus(const Tensor& a);
/// Elementwise clamp to [lo, hi]; gradient passes only strictly inside.
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& a, Shape shape);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// ------------------------------------------------------------ composite losses

/// Sum over elements of the Gaussian negative log-likelihood with fixed std.
Tensor gaussian_nll(const Tensor& x, const Tensor& mean, double fixed_std);

/// Elementwise KL( N(mean_q, std_q) || N(mean_p, std_p) ) for diagonal Gaussians.
Tensor gaussian_kl(const Tensor& mean_q, const Tensor& std_q, const Tensor& mean_p,
                   const Tensor& std_p);

}  // namespace scma
