#include "mumimo/autodiff.hpp"

#include "mumimo/blob_io.hpp"
#include "mumimo/common.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace mumimo::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

std::shared_ptr<Node> make_node(const Shape& shape, std::vector<double> value, std::vector<std::shared_ptr<Node>> parents) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value = std::move(value);
    n->leaf = false;
    for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
    n->parents = std::move(parents);
    return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
}

// Outer/inner extents around `axis` for row-major layouts.
void split_axis(const Shape& s, int axis, std::size_t& outer, std::size_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
    std::vector<double> v(x.numel());
    const auto& xv = x.value();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = fwd(xv[i]);
    auto n = make_node(x.shape(), std::move(v), {x.ptr()});
    n->backward_fn = [deriv](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
    };
    return Tensor(n);
}

}  // namespace

std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d < 0) throw std::invalid_argument("negative dimension in shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->value.assign(ad::numel(s), 0.0);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::constant(const Shape& s, std::vector<double> values) {
    if (values.size() != ad::numel(s)) throw std::invalid_argument("Tensor: value count does not match shape " + shape_str(s));
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->value = std::move(values);
    return Tensor(n);
}

Tensor Tensor::parameter(const Shape& s, std::vector<double> values) {
    Tensor t = constant(s, std::move(values));
    t.ptr_->requires_grad = true;
    return t;
}

Tensor Tensor::full(const Shape& s, double v) { return constant(s, std::vector<double>(ad::numel(s), v)); }

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(numel()) + " elements");
    return ptr_->value[0];
}

void Tensor::zero_grad() {
    ptr_->grad.assign(ptr_->value.size(), 0.0);
    ptr_->grad_pending = false;
}

Tensor Tensor::detach() const { return constant(shape(), value()); }

Tensor custom(const Shape& shape, std::vector<double> value, const std::vector<Tensor>& parents, CustomBackward bw) {
    if (value.size() != numel(shape)) throw std::invalid_argument("custom: value count does not match shape");
    std::vector<std::shared_ptr<Node>> ps;
    for (const auto& p : parents) ps.push_back(p.ptr());
    auto n = make_node(shape, std::move(value), ps);
    n->backward_fn = [bw](Node& self) {
        std::vector<std::vector<double>*> grads;
        for (auto& p : self.parents) grads.push_back(p->requires_grad ? &p->grad : nullptr);
        bw(self.grad, grads);
    };
    return Tensor(n);
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + b.value()[i];
    auto n = make_node(a.shape(), std::move(v), {a.ptr(), b.ptr()});
    n->backward_fn = [](Node& self) {
        for (auto& p : self.parents)
            if (p->requires_grad)
                for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    };
    return Tensor(n);
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * b.value()[i];
    auto n = make_node(a.shape(), std::move(v), {a.ptr(), b.ptr()});
    n->backward_fn = [](Node& self) {
        Node& a = *self.parents[0];
        Node& b = *self.parents[1];
        if (a.requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += self.grad[i] * b.value[i];
        if (b.requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) b.grad[i] += self.grad[i] * a.value[i];
    };
    return Tensor(n);
}

Tensor scale(const Tensor& a, double s) {
    return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor relu(const Tensor& x) {
    return unary(x, [](double v) { return v > 0 ? v : 0.0; }, [](double in, double) { return in > 0 ? 1.0 : 0.0; });
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus_inv(double y) {
    if (!(y > 0)) throw std::invalid_argument("softplus_inv: argument must be positive");
    // log(e^y - 1) = y + log(1 - e^{-y})
    return y + std::log(-std::expm1(-y));
}

Tensor softplus(const Tensor& x) {
    return unary(x, [](double v) { return softplus(v); }, [](double in, double) { return sigmoid(in); });
}

Tensor sigmoid(const Tensor& x) {
    return unary(x, [](double v) { return sigmoid(v); }, [](double, double out) { return out * (1.0 - out); });
}

Tensor tanh(const Tensor& x) {
    return unary(x, [](double v) { return std::tanh(v); }, [](double, double out) { return 1.0 - out * out; });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.ndim() != 4 || w.ndim() != 4) throw std::invalid_argument("conv2d: expected 4-D input and kernel");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != c) throw std::invalid_argument("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    if (kh % 2 == 0 || kw % 2 == 0) throw std::invalid_argument("conv2d: kernel extents must be odd");
    if (b.defined() && (b.ndim() != 1 || b.dim(0) != o)) throw std::invalid_argument("conv2d: bias shape mismatch");
    const int ph = kh / 2, pw = kw / 2;
    const int hw = h * wd;
    const int ckk = c * kh * kw;
    const int cols = n * hw;

    auto col = std::make_shared<RowMat>(RowMat::Zero(ckk, cols));
    const auto& xv = x.value();
    for (int ci = 0; ci < c; ++ci) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                double* row = col->data() + static_cast<std::size_t>((ci * kh + ky) * kw + kx) * cols;
                for (int ni = 0; ni < n; ++ni) {
                    const double* src = xv.data() + (static_cast<std::size_t>(ni) * c + ci) * hw;
                    for (int y = 0; y < h; ++y) {
                        const int sy = y + ky - ph;
                        if (sy < 0 || sy >= h) continue;
                        const int x0 = std::max(0, pw - kx);
                        const int x1 = std::min(wd, wd + pw - kx);
                        double* dst = row + ni * hw + y * wd;
                        const double* s = src + sy * wd + (kx - pw);
                        for (int xx = x0; xx < x1; ++xx) dst[xx] = s[xx];
                    }
                }
            }
        }
    }
    const CMapRM wm(w.value().data(), o, ckk);
    RowMat out = wm * (*col);
    std::vector<double> v(static_cast<std::size_t>(n) * o * hw);
    for (int ni = 0; ni < n; ++ni) {
        for (int oi = 0; oi < o; ++oi) {
            const double bias = b.defined() ? b.value()[oi] : 0.0;
            double* dst = v.data() + (static_cast<std::size_t>(ni) * o + oi) * hw;
            const double* src = out.data() + static_cast<std::size_t>(oi) * cols + ni * hw;
            for (int i = 0; i < hw; ++i) dst[i] = src[i] + bias;
        }
    }
    std::vector<std::shared_ptr<Node>> parents{x.ptr(), w.ptr()};
    if (b.defined()) parents.push_back(b.ptr());
    auto node = make_node({n, o, h, wd}, std::move(v), parents);
    node->backward_fn = [=](Node& self) {
        Node& xn = *self.parents[0];
        Node& wn = *self.parents[1];
        RowMat g(o, cols);
        for (int ni = 0; ni < n; ++ni)
            for (int oi = 0; oi < o; ++oi) {
                const double* src = self.grad.data() + (static_cast<std::size_t>(ni) * o + oi) * hw;
                std::copy(src, src + hw, g.data() + static_cast<std::size_t>(oi) * cols + ni * hw);
            }
        if (wn.requires_grad) {
            MapRM dw(wn.grad.data(), o, ckk);
            dw.noalias() += g * col->transpose();
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            Node& bn = *self.parents[2];
            for (int oi = 0; oi < o; ++oi) bn.grad[oi] += g.row(oi).sum();
        }
        if (xn.requires_grad) {
            const CMapRM wmat(wn.value.data(), o, ckk);
            const RowMat dcol = wmat.transpose() * g;
            for (int ci = 0; ci < c; ++ci) {
                for (int ky = 0; ky < kh; ++ky) {
                    for (int kx = 0; kx < kw; ++kx) {
                        const double* row = dcol.data() + static_cast<std::size_t>((ci * kh + ky) * kw + kx) * cols;
                        for (int ni = 0; ni < n; ++ni) {
                            double* dst = xn.grad.data() + (static_cast<std::size_t>(ni) * c + ci) * hw;
                            for (int y = 0; y < h; ++y) {
                                const int sy = y + ky - ph;
                                if (sy < 0 || sy >= h) continue;
                                const int x0 = std::max(0, pw - kx);
                                const int x1 = std::min(wd, wd + pw - kx);
                                const double* s = row + ni * hw + y * wd;
                                double* d = dst + sy * wd + (kx - pw);
                                for (int xx = x0; xx < x1; ++xx) d[xx] += s[xx];
                            }
                        }
                    }
                }
            }
        }
    };
    return Tensor(node);
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(1)) {
        throw std::invalid_argument("dense: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    }
    const int n = x.dim(0), in = x.dim(1), out = w.dim(0);
    if (b.defined() && (b.ndim() != 1 || b.dim(0) != out)) throw std::invalid_argument("dense: bias shape mismatch");
    RowMat y = CMapRM(x.value().data(), n, in) * CMapRM(w.value().data(), out, in).transpose();
    if (b.defined())
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < out; ++j) y(i, j) += b.value()[j];
    std::vector<std::shared_ptr<Node>> parents{x.ptr(), w.ptr()};
    if (b.defined()) parents.push_back(b.ptr());
    auto node = make_node({n, out}, std::vector<double>(y.data(), y.data() + y.size()), parents);
    node->backward_fn = [n, in, out](Node& self) {
        Node& xn = *self.parents[0];
        Node& wn = *self.parents[1];
        const CMapRM g(self.grad.data(), n, out);
        if (xn.requires_grad) MapRM(xn.grad.data(), n, in).noalias() += g * CMapRM(wn.value.data(), out, in);
        if (wn.requires_grad) MapRM(wn.grad.data(), out, in).noalias() += g.transpose() * CMapRM(xn.value.data(), n, in);
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            Node& bn = *self.parents[2];
            for (int j = 0; j < out; ++j) bn.grad[j] += g.col(j).sum();
        }
    };
    return Tensor(node);
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat: no inputs");
    Shape s = xs[0].shape();
    if (axis < 0 || axis >= static_cast<int>(s.size())) throw std::invalid_argument("concat: bad axis");
    int total = 0;
    for (const auto& x : xs) {
        Shape t = x.shape();
        if (t.size() != s.size()) throw std::invalid_argument("concat: rank mismatch");
        t[axis] = s[axis];
        if (t != s) throw std::invalid_argument("concat: shape mismatch " + shape_str(x.shape()));
        total += x.dim(axis);
    }
    std::size_t outer, inner;
    split_axis(s, axis, outer, inner);
    s[axis] = total;
    std::vector<double> v(numel(s));
    std::vector<std::shared_ptr<Node>> parents;
    std::vector<int> offsets;
    int off = 0;
    for (const auto& x : xs) {
        const std::size_t len = static_cast<std::size_t>(x.dim(axis)) * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(x.value().begin() + o * len, x.value().begin() + (o + 1) * len,
                      v.begin() + o * total * inner + off * inner);
        parents.push_back(x.ptr());
        offsets.push_back(off);
        off += x.dim(axis);
    }
    auto node = make_node(s, std::move(v), parents);
    node->backward_fn = [offsets, outer, inner, total, axis](Node& self) {
        for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
            Node& p = *self.parents[pi];
            if (!p.requires_grad) continue;
            const std::size_t len = static_cast<std::size_t>(p.shape[axis]) * inner;
            for (std::size_t o = 0; o < outer; ++o) {
                const double* src = self.grad.data() + o * total * inner + offsets[pi] * inner;
                double* dst = p.grad.data() + o * len;
                for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
            }
        }
    };
    return Tensor(node);
}

Tensor slice(const Tensor& x, int axis, int begin, int end) {
    Shape s = x.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size()) || begin < 0 || end > s[axis] || begin >= end) {
        throw std::invalid_argument("slice: bad range on " + shape_str(s));
    }
    std::size_t outer, inner;
    split_axis(s, axis, outer, inner);
    const int full = s[axis];
    s[axis] = end - begin;
    const std::size_t len = static_cast<std::size_t>(end - begin) * inner;
    std::vector<double> v(numel(s));
    for (std::size_t o = 0; o < outer; ++o)
        std::copy(x.value().begin() + o * full * inner + begin * inner,
                  x.value().begin() + o * full * inner + begin * inner + len, v.begin() + o * len);
    auto node = make_node(s, std::move(v), {x.ptr()});
    node->backward_fn = [outer, inner, full, begin, len](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t o = 0; o < outer; ++o) {
            double* dst = p.grad.data() + o * full * inner + begin * inner;
            const double* src = self.grad.data() + o * len;
            for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
        }
    };
    return Tensor(node);
}

Tensor reshape(const Tensor& x, const Shape& s) {
    if (numel(s) != x.numel()) throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " + shape_str(s));
    auto node = make_node(s, x.value(), {x.ptr()});
    node->backward_fn = [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    };
    return Tensor(node);
}

Tensor sum_axis(const Tensor& x, int axis) {
    Shape s = x.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size())) throw std::invalid_argument("sum_axis: bad axis");
    std::size_t outer, inner;
    split_axis(s, axis, outer, inner);
    const int n = s[axis];
    s[axis] = 1;
    std::vector<double> v(numel(s), 0.0);
    for (std::size_t o = 0; o < outer; ++o)
        for (int a = 0; a < n; ++a)
            for (std::size_t i = 0; i < inner; ++i) v[o * inner + i] += x.value()[(o * n + a) * inner + i];
    auto node = make_node(s, std::move(v), {x.ptr()});
    node->backward_fn = [outer, inner, n](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t o = 0; o < outer; ++o)
            for (int a = 0; a < n; ++a)
                for (std::size_t i = 0; i < inner; ++i) p.grad[(o * n + a) * inner + i] += self.grad[o * inner + i];
    };
    return Tensor(node);
}

Tensor repeat_axis(const Tensor& x, int axis, int n) {
    Shape s = x.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size()) || s[axis] != 1 || n < 1) {
        throw std::invalid_argument("repeat_axis: axis must have extent 1");
    }
    std::size_t outer, inner;
    split_axis(s, axis, outer, inner);
    s[axis] = n;
    std::vector<double> v(numel(s));
    for (std::size_t o = 0; o < outer; ++o)
        for (int a = 0; a < n; ++a)
            for (std::size_t i = 0; i < inner; ++i) v[(o * n + a) * inner + i] = x.value()[o * inner + i];
    auto node = make_node(s, std::move(v), {x.ptr()});
    node->backward_fn = [outer, inner, n](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t o = 0; o < outer; ++o)
            for (int a = 0; a < n; ++a)
                for (std::size_t i = 0; i < inner; ++i) p.grad[o * inner + i] += self.grad[(o * n + a) * inner + i];
    };
    return Tensor(node);
}

Tensor mean_hw(const Tensor& x) {
    if (x.ndim() != 4) throw std::invalid_argument("mean_hw: expected [N, C, H, W]");
    const int n = x.dim(0), c = x.dim(1);
    const double inv = 1.0 / (x.dim(2) * x.dim(3));
    return scale(reshape(sum_axis(reshape(x, {n, c, x.dim(2) * x.dim(3)}), 2), {n, c}), inv);
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.value()) acc += v;
    auto node = make_node({1}, {acc}, {x.ptr()});
    node->backward_fn = [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (double& g : p.grad) g += self.grad[0];
    };
    return Tensor(node);
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets, const Tensor& weights) {
    check_same_shape(logits, targets, "bce_with_logits");
    if (weights.defined()) check_same_shape(logits, weights, "bce_with_logits");
    const auto& l = logits.value();
    const auto& t = targets.value();
    double wsum = 0.0, acc = 0.0;
    for (std::size_t i = 0; i < l.size(); ++i) {
        const double w = weights.defined() ? weights.value()[i] : 1.0;
        wsum += w;
        if (w != 0.0) acc += w * (softplus(l[i]) - t[i] * l[i]);
    }
    if (wsum <= 0.0) throw std::invalid_argument("bce_with_logits: total weight must be positive");
    std::vector<std::shared_ptr<Node>> parents{logits.ptr(), targets.ptr()};
    if (weights.defined()) parents.push_back(weights.ptr());
    auto node = make_node({1}, {acc / wsum}, parents);
    node->backward_fn = [wsum](Node& self) {
        Node& ln = *self.parents[0];
        if (!ln.requires_grad) return;
        const Node& tn = *self.parents[1];
        const Node* wn = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
        const double g = self.grad[0] / wsum;
        for (std::size_t i = 0; i < ln.value.size(); ++i) {
            const double w = wn ? wn->value[i] : 1.0;
            if (w != 0.0) ln.grad[i] += g * w * (sigmoid(ln.value[i]) - tn.value[i]);
        }
    };
    return Tensor(node);
}

void backward(const Tensor& loss, bool accumulate) {
    if (!loss.defined() || loss.numel() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    if (!loss.requires_grad()) return;
    // Iterative DFS post-order over nodes that require grad.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node* n : order) {
        if (n->leaf) {
            if (n->grad_pending && !accumulate) {
                throw std::logic_error("backward: parameter gradients not zeroed since the previous backward pass");
            }
            if (n->grad.size() != n->value.size()) n->grad.assign(n->value.size(), 0.0);
        } else {
            n->grad.assign(n->value.size(), 0.0);
        }
    }
    loss.node()->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->leaf) {
            n->grad_pending = true;
        } else if (n->backward_fn) {
            n->backward_fn(*n);
        }
    }
    // Intermediate gradients are not needed after the pass.
    for (Node* n : order)
        if (!n->leaf) std::vector<double>().swap(n->grad);
}

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

bool Adam::step() {
    for (const auto& p : params_) {
        for (double g : p.grad()) {
            if (!std::isfinite(g)) {
                warn("Adam: non-finite gradient, skipping step");
                return false;
            }
        }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor p = params_[i];
        const auto& g = p.grad();
        if (g.empty()) continue;
        auto& val = p.value();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < val.size(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            val[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
        }
    }
    return true;
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

nlohmann::json Adam::hyperparameters() const {
    return {{"learning_rate", lr_}, {"beta1", beta1_}, {"beta2", beta2_}, {"epsilon", eps_}, {"step_count", t_}};
}

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& params, Adam* adam,
                     const nlohmann::json& extra) {
    std::vector<double> blob;
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& p : params) {
        entries.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", blob.size()}});
        blob.insert(blob.end(), p.tensor.value().begin(), p.tensor.value().end());
    }
    nlohmann::json side{{"format", "mumimo-checkpoint-v1"}, {"dtype", "float64_le"}, {"params", entries}, {"extra", extra}};
    if (adam != nullptr) {
        if (adam->first_moments().size() != params.size()) throw std::invalid_argument("save_checkpoint: optimizer/param mismatch");
        side["adam"] = adam->hyperparameters();
        side["adam"]["moments_offset"] = blob.size();
        for (const auto& m : adam->first_moments()) blob.insert(blob.end(), m.begin(), m.end());
        for (const auto& v : adam->second_moments()) blob.insert(blob.end(), v.begin(), v.end());
    }
    write_f64_blob(path, blob);
    write_json(sidecar_path(path), side);
}

nlohmann::json load_checkpoint(const std::string& path, const std::vector<NamedTensor>& params, Adam* adam) {
    const nlohmann::json side = read_json(sidecar_path(path));
    if (side.value("format", "") != "mumimo-checkpoint-v1") throw std::runtime_error(path + ": not a checkpoint");
    const std::vector<double> blob = read_f64_blob(path);
    for (const auto& p : params) {
        const nlohmann::json* found = nullptr;
        for (const auto& e : side.at("params"))
            if (e.at("name") == p.name) found = &e;
        if (found == nullptr) throw std::runtime_error(path + ": missing parameter '" + p.name + "'");
        const Shape s = found->at("shape").get<Shape>();
        if (s != p.tensor.shape()) {
            throw std::runtime_error(path + ": parameter '" + p.name + "' has shape " + shape_str(s) + ", expected " +
                                     shape_str(p.tensor.shape()));
        }
        const std::size_t off = found->at("offset").get<std::size_t>();
        if (off + numel(s) > blob.size()) throw std::runtime_error(path + ": truncated blob");
        Tensor t = p.tensor;
        std::copy(blob.begin() + off, blob.begin() + off + numel(s), t.value().begin());
    }
    if (adam != nullptr && side.contains("adam")) {
        const auto& a = side.at("adam");
        std::size_t off = a.at("moments_offset").get<std::size_t>();
        for (auto& m : adam->first_moments()) {
            std::copy(blob.begin() + off, blob.begin() + off + m.size(), m.begin());
            off += m.size();
        }
        for (auto& v : adam->second_moments()) {
            std::copy(blob.begin() + off, blob.begin() + off + v.size(), v.begin());
            off += v.size();
        }
        adam->set_step_count(a.at("step_count").get<long>());
    }
    return side.value("extra", nlohmann::json::object());
}

}  // namespace mumimo::ad
