#include "scma/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_map>

#include "scma/kernels.hpp"

namespace scma {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::vector<double>& Node::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

namespace {

void require_finite(std::span<const double> values, const std::string& op) {
    for (double v : values)
        if (!std::isfinite(v)) throw NonFiniteError(op + ": non-finite value");
}

void require_valid_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (auto d : shape)
        if (d == 0) throw ShapeError("dimension sizes must be positive, got " + to_string(shape));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
}

// Builds the result node. Inputs are validated, the output is checked for
// finiteness, and graph links are kept only if some input needs gradients.
Tensor make_result(const std::string& op, Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs, std::function<void(Node&)> backward_rule) {
    require_finite(data, op);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
        node->requires_grad = true;
        for (const auto& in : inputs) node->parents.push_back(in.node());
        node->backward = std::move(backward_rule);
    }
    return Tensor(std::move(node));
}

void check_inputs(const std::vector<Tensor>& inputs, const std::string& op) {
    for (const auto& in : inputs) {
        if (!in.node()) throw std::invalid_argument(op + ": empty tensor handle");
        // Op outputs were checked when created; leaves can be mutated in place.
        if (in.is_leaf()) require_finite(in.data(), op);
    }
}

template <class F, class G>
Tensor unary(const Tensor& a, const std::string& op, F forward, G derivative) {
    check_inputs({a}, op);
    std::vector<double> out(a.size());
    auto in = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
    return make_result(op, a.shape(), std::move(out), {a}, [derivative](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * derivative(p.data[i], self.data[i]);
    });
}

}  // namespace

// ------------------------------------------------------------------- Tensor

Tensor::Tensor() : Tensor(Shape{1}, std::vector<double>{0.0}) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    require_valid_shape(shape);
    if (numel(shape) != data.size())
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         to_string(shape));
    require_finite(data, "tensor");
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
    return node_->shape[axis];
}

std::span<double> Tensor::mutable_data() {
    if (!node_->is_leaf()) throw std::logic_error("mutable_data on a non-leaf tensor");
    return node_->data;
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape()));
    return node_->data[0];
}

void Tensor::set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw std::logic_error("set_requires_grad on a non-leaf tensor");
    node_->requires_grad = on;
    if (!on) node_->grad.clear();
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data, false); }

// --------------------------------------------------------------------- Tape

Tape Tape::record(const Tensor& output) {
    Tape tape;
    tape.root_ = output.node();
    // Iterative post-order DFS; a node is emitted after all of its parents.
    std::unordered_map<const Node*, bool> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(output.node().get(), 0);
    visited[output.node().get()] = true;
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && !visited[parent]) {
                visited[parent] = true;
                stack.emplace_back(parent, 0);
            }
        } else {
            tape.nodes_.push_back(node);
            stack.pop_back();
        }
    }
    return tape;
}

std::size_t Tape::index_of(const Node* node) const {
    auto it = std::find(nodes_.begin(), nodes_.end(), node);
    return it == nodes_.end() ? npos : static_cast<std::size_t>(it - nodes_.begin());
}

void Tape::run_backward() {
    for (Node* n : nodes_)
        if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
    Node* root = nodes_.back();
    auto& g = root->grad_buffer();
    g[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node* n = *it;
        if (!n->is_leaf() && n->backward) n->backward(*n);
    }
}

void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw ShapeError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
    if (!loss.requires_grad()) return;
    Tape::record(loss).run_backward();
}

// ---------------------------------------------------------------- binary ops

Tensor add(const Tensor& a, const Tensor& b) {
    check_inputs({a, b}, "add");
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return make_result("add", a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            auto& g = p->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_inputs({a, b}, "sub");
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return make_result("sub", a.shape(), std::move(out), {a, b}, [](Node& self) {
        if (self.parents[0]->requires_grad) {
            auto& g = self.parents[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_inputs({a, b}, "mul");
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return make_result("mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
        }
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    check_inputs({a, b}, "div");
    require_same_shape(a, b, "div");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
    return make_result("div", a.shape(), std::move(out), {a, b}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb.data[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.data[i] / pb.data[i];
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    return unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_inputs({a, b}, "matmul");
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n);
    kernels::matmul(a.data(), b.data(), out, m, k, n);
    return make_result("matmul", Shape{m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) kernels::matmul_grad_a(self.grad, pb.data, pa.grad_buffer(), m, k, n);
        if (pb.requires_grad) kernels::matmul_grad_b(pa.data, self.grad, pb.grad_buffer(), m, k, n);
    });
}

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t padding) {
    check_inputs({x, w}, "conv2d");
    if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1) || w.dim(2) != w.dim(3))
        throw ShapeError("conv2d: shape mismatch " + to_string(x.shape()) + " vs " + to_string(w.shape()));
    kernels::ConvDims d;
    d.batch = x.dim(0);
    d.in_channels = x.dim(1);
    d.height = x.dim(2);
    d.width = x.dim(3);
    d.out_channels = w.dim(0);
    d.kernel = w.dim(2);
    d.padding = padding;
    if (d.kernel > 5) throw ShapeError("conv2d: kernel larger than 5x5: " + to_string(w.shape()));
    if (d.height + 2 * padding < d.kernel || d.width + 2 * padding < d.kernel)
        throw ShapeError("conv2d: kernel " + to_string(w.shape()) + " larger than padded input " +
                         to_string(x.shape()));
    Shape out_shape{d.batch, d.out_channels, d.out_height(), d.out_width()};
    std::vector<double> out(numel(out_shape));
    kernels::conv2d(x.data(), w.data(), out, d);
    return make_result("conv2d", std::move(out_shape), std::move(out), {x, w}, [d](Node& self) {
        Node& px = *self.parents[0];
        Node& pw = *self.parents[1];
        if (px.requires_grad) kernels::conv2d_grad_x(self.grad, pw.data, px.grad_buffer(), d);
        if (pw.requires_grad) kernels::conv2d_grad_w(px.data, self.grad, pw.grad_buffer(), d);
    });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    check_inputs({x, bias}, "add_bias");
    if ((x.rank() != 2 && x.rank() != 4) || bias.rank() != 1 || bias.dim(0) != x.dim(1))
        throw ShapeError("add_bias: shape mismatch " + to_string(x.shape()) + " vs " + to_string(bias.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1);
    const std::size_t inner = x.size() / (n * c);
    std::vector<double> out(x.data().begin(), x.data().end());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            double* o = out.data() + (b * c + ch) * inner;
            for (std::size_t i = 0; i < inner; ++i) o[i] += bias[ch];
        }
    return make_result("add_bias", x.shape(), std::move(out), {x, bias}, [n, c, inner](Node& self) {
        Node& px = *self.parents[0];
        Node& pb = *self.parents[1];
        if (px.requires_grad) {
            auto& g = px.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.grad_buffer();
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double* gi = self.grad.data() + (b * c + ch) * inner;
                    double s = 0.0;
                    for (std::size_t i = 0; i < inner; ++i) s += gi[i];
                    g[ch] += s;
                }
        }
    });
}

// ----------------------------------------------------------------- unary ops

Tensor relu(const Tensor& a) {
    return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor elu(const Tensor& a) {
    return unary(a, "elu", [](double x) { return x > 0.0 ? x : std::expm1(x); },
                 [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; });
}

Tensor tanh(const Tensor& a) {
    return unary(a, "tanh", [](double x) { return std::tanh(x); },
                 [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        a, "sigmoid",
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
    return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
    return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor softplus(const Tensor& a) {
    return unary(
        a, "softplus", [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
        [](double x, double) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
    return unary(a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
                 [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// -------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
    check_inputs({a}, "sum");
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_result("sum", Shape{1}, {s}, {a}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// ------------------------------------------------------------------ layout

namespace {

// View of a tensor as [outer, axis, inner] around one axis.
struct AxisSplit {
    std::size_t outer = 1, axis = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.axis = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    check_inputs(parts, "concat");
    const Shape& ref = parts[0].shape();
    if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + to_string(ref));
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == ref.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == ref[i];
        if (!ok) throw ShapeError("concat: shape mismatch " + to_string(ref) + " vs " + to_string(s));
        out_shape[axis] += s[axis];
    }
    const auto whole = split_at(out_shape, axis);
    std::vector<double> out(numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        const auto sp = split_at(p.shape(), axis);
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(p.data().data() + o * sp.axis * sp.inner, sp.axis * sp.inner,
                        out.data() + (o * whole.axis + offset) * whole.inner);
        offset += sp.axis;
    }
    return make_result("concat", out_shape, std::move(out), parts, [whole, offsets](Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            Node& p = *self.parents[k];
            if (!p.requires_grad) continue;
            const std::size_t chunk = p.data.size() / whole.outer;
            auto& g = p.grad_buffer();
            for (std::size_t o = 0; o < whole.outer; ++o) {
                const double* src = self.grad.data() + (o * whole.axis + offsets[k]) * whole.inner;
                double* dst = g.data() + o * chunk;
                for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
            }
        }
    });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
    check_inputs({a}, "slice");
    if (axis >= a.rank() || length == 0 || start + length > a.dim(axis))
        throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") on axis " + std::to_string(axis) + " out of range for " + to_string(a.shape()));
    const auto sp = split_at(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape[axis] = length;
    std::vector<double> out(numel(out_shape));
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(a.data().data() + (o * sp.axis + start) * sp.inner, length * sp.inner,
                    out.data() + o * length * sp.inner);
    return make_result("slice", std::move(out_shape), std::move(out), {a}, [sp, start, length](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buffer();
        const std::size_t chunk = length * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o) {
            const double* src = self.grad.data() + o * chunk;
            double* dst = g.data() + (o * sp.axis + start) * sp.inner;
            for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    check_inputs({a}, "reshape");
    require_valid_shape(shape);
    if (numel(shape) != a.size())
        throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_result("reshape", std::move(shape), std::move(out), {a}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// ------------------------------------------------------------------ losses

Tensor gaussian_nll(const Tensor& x, const Tensor& mean, double fixed_std) {
    require_same_shape(x, mean, "gaussian_nll");
    if (!(fixed_std > 0.0) || !std::isfinite(fixed_std))
        throw std::invalid_argument("gaussian_nll: std must be positive and finite");
    const double log_norm = std::log(fixed_std * std::sqrt(2.0 * std::numbers::pi));
    const double n = static_cast<double>(x.size());
    Tensor sq = sum(square(sub(x, mean)));
    return add_scalar(scale(sq, 1.0 / (2.0 * fixed_std * fixed_std)), n * log_norm);
}

Tensor gaussian_kl(const Tensor& mean_q, const Tensor& std_q, const Tensor& mean_p, const Tensor& std_p) {
    require_same_shape(mean_q, std_q, "gaussian_kl");
    require_same_shape(mean_q, mean_p, "gaussian_kl");
    require_same_shape(mean_q, std_p, "gaussian_kl");
    // log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2
    Tensor log_ratio = sub(log(std_p), log(std_q));
    Tensor num = add(square(std_q), square(sub(mean_q, mean_p)));
    Tensor quad = div(num, scale(square(std_p), 2.0));
    return add_scalar(add(log_ratio, quad), -0.5);
}

}  // namespace scma
