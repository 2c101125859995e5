#ifndef LEGONET_TENSOR_HPP
#define LEGONET_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace lego {

using Shape = std::vector<long>;

long numel_of(const Shape& s);
std::string shape_str(const Shape& s);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One value in the autodiff graph. Data is immutable after creation
// (except for leaf parameters updated between forward passes); the tape
// edge is a backward closure plus parent links, cleared after backward().
struct Node {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;
    uint64_t seq = 0;

    long numel() const { return static_cast<long>(data.size()); }
    void ensure_grad() { if (grad.size() != data.size()) grad.assign(data.size(), 0.0); }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : n_(std::move(n)) {}

    static Tensor zeros(const Shape& s, bool requires_grad = false);
    static Tensor full(const Shape& s, double v, bool requires_grad = false);
    static Tensor from(const Shape& s, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v);

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    long dim() const { return static_cast<long>(n_->shape.size()); }
    long numel() const { return n_->numel(); }
    long size(long axis) const;

    std::vector<double>& data() { return n_->data; }
    const std::vector<double>& data() const { return n_->data; }
    std::vector<double>& grad();
    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }
    void zero_grad() { n_->grad.assign(n_->data.size(), 0.0); }
    double item() const;

    NodePtr node() const { return n_; }

private:
    NodePtr n_;
};

// Temporarily disables tape recording (validation / inference forward).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
private:
    bool prev_;
};
bool grad_enabled();

// When set, div throws on an exact-zero divisor instead of producing inf.
bool& strict_div_mode();

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh_op(const Tensor& x);
Tensor log_op(const Tensor& x);
Tensor exp_op(const Tensor& x);
Tensor pow_op(const Tensor& x, double p);
Tensor clamp(const Tensor& x, double lo, double hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }

// ---- contraction / reduction ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor reduce_sum(const Tensor& x, const std::vector<long>& axes, bool keepdim = false);
Tensor reduce_mean(const Tensor& x, const std::vector<long>& axes, bool keepdim = false);
Tensor reduce_max(const Tensor& x, const std::vector<long>& axes, bool keepdim = false);
Tensor sum_all(const Tensor& x);   // scalar

// ---- layout ----
Tensor reshape(const Tensor& x, const Shape& s);
Tensor permute(const Tensor& x, const std::vector<long>& axes);
Tensor pad(const Tensor& x, const std::vector<std::pair<long, long>>& widths);
Tensor slice(const Tensor& x, const std::vector<long>& starts, const std::vector<long>& stops);
Tensor concat(const std::vector<Tensor>& parts, long axis);
Tensor roll(const Tensor& x, const std::vector<long>& shifts, const std::vector<long>& axes);
Tensor index_select_last(const Tensor& x, const std::vector<long>& idx);
Tensor detach(const Tensor& x);

// Numerically stable softmax over the trailing axis.
Tensor softmax_last(const Tensor& x);

// ---- autodiff driver ----
// Seeds d(root)=1 and accumulates gradients into every requires_grad leaf
// reachable from root. The tape is freed afterwards.
void backward(const Tensor& root);

// Max relative error between analytic gradient of f at x and central
// finite differences with step eps.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps = 1e-5);

// Broadcast helpers (numpy trailing-dimension rule), exposed for tests.
Shape broadcast_shape(const Shape& a, const Shape& b);

// Registers a custom op node. backward_fn receives the output node with
// grad populated and must accumulate into parents' grads. Recording is
// skipped under NoGradGuard or when no parent requires grad.
Tensor make_custom_op(Shape shape, std::vector<double> data,
                      const std::vector<Tensor>& parents,
                      std::function<void(Node&)> backward_fn);

} // namespace lego

#endif
