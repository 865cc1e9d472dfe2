#pragma once

#include "json.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

// Minimal reverse-mode automatic differentiation over dense float64 tensors.
namespace mumimo::ad {

using Shape = std::vector<int>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
    bool grad_pending = false;  // leaf received gradient since the last zero_grad
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : ptr_(std::move(n)) {}

    static Tensor zeros(const Shape& s, bool requires_grad = false);
    static Tensor constant(const Shape& s, std::vector<double> values);
    static Tensor parameter(const Shape& s, std::vector<double> values);
    static Tensor full(const Shape& s, double v);
    static Tensor scalar(double v) { return constant({1}, {v}); }

    bool defined() const { return ptr_ != nullptr; }
    const Shape& shape() const { return ptr_->shape; }
    int dim(int i) const { return ptr_->shape.at(i); }
    int ndim() const { return static_cast<int>(ptr_->shape.size()); }
    std::size_t numel() const { return ptr_->value.size(); }

    std::vector<double>& value() { return ptr_->value; }
    const std::vector<double>& value() const { return ptr_->value; }
    /// Gradient accumulator; empty until a backward pass reaches this tensor.
    std::vector<double>& grad() { return ptr_->grad; }
    const std::vector<double>& grad() const { return ptr_->grad; }
    bool requires_grad() const { return ptr_->requires_grad; }
    double item() const;

    void zero_grad();
    /// Copy without graph history.
    Tensor detach() const;

    Node* node() const { return ptr_.get(); }
    const std::shared_ptr<Node>& ptr() const { return ptr_; }

private:
    std::shared_ptr<Node> ptr_;
};

/// Backward hook of a custom op: receives the output gradient and one
/// accumulator per parent (null for parents that do not require grad).
using CustomBackward =
    std::function<void(const std::vector<double>& grad_out, const std::vector<std::vector<double>*>& parent_grads)>;

/// Graph node with a caller-supplied value and backward rule.
Tensor custom(const Shape& shape, std::vector<double> value, const std::vector<Tensor>& parents, CustomBackward bw);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);

/// x [N, C, H, W], w [O, C, KH, KW] with odd KH, KW, b [O] (optional).
/// Zero "same" padding, stride 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b);
/// x [N, in], w [out, in], b [out] (optional) -> x w^T + b.
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int begin, int end);
Tensor reshape(const Tensor& x, const Shape& s);
/// Sum over one axis; the axis is kept with extent 1.
Tensor sum_axis(const Tensor& x, int axis);
/// Repeats an extent-1 axis `n` times.
Tensor repeat_axis(const Tensor& x, int axis, int n);
/// [N, C, H, W] -> [N, C] mean over H, W.
Tensor mean_hw(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// sum_i w_i (softplus(l_i) - t_i l_i) / sum_i w_i; plain mean when
/// `weights` is undefined. Targets and weights are constants.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets, const Tensor& weights = Tensor());

/// Accumulates d loss / d p into every parameter reachable from `loss`.
/// Throws if a parameter still holds gradient from an earlier pass, unless
/// `accumulate` is set.
void backward(const Tensor& loss, bool accumulate = false);

double softplus(double x);
double sigmoid(double x);
/// Inverse of softplus for y > 0.
double softplus_inv(double y);

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

class Adam {
public:
    explicit Adam(std::vector<Tensor> params, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8);

    /// Bias-corrected update. Non-finite gradients skip the step with a warning.
    /// Returns false when skipped.
    bool step();
    void zero_grad();

    long step_count() const { return t_; }
    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }
    void set_step_count(long t) { t_ = t; }
    nlohmann::json hyperparameters() const;

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
};

/// Binary blob (values, then Adam moments when given) plus JSON sidecar
/// with names, shapes, offsets and optimizer state.
void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& params, Adam* adam,
                     const nlohmann::json& extra = nlohmann::json::object());
/// Loads into existing tensors matched by name; shapes must agree.
/// Returns the sidecar's "extra" object.
nlohmann::json load_checkpoint(const std::string& path, const std::vector<NamedTensor>& params, Adam* adam = nullptr);

}  // namespace mumimo::ad
