#ifndef MEGA_AUTODIFF_HPP
#define MEGA_AUTODIFF_HPP

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "mega/tensor.hpp"

namespace mega {

// Reverse-mode autodiff over Tensor values. Graphs are built dynamically by
// the op functions below; backward() walks the graph once in reverse
// topological order and accumulates gradients into every node that requires
// them. Leaves with requires_grad=false (frozen network parameters, data
// constants) still propagate gradients *through* themselves to upstream
// nodes when they are interior, but never accumulate as leaves.

struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily, same shape as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.data.empty()) grad = Tensor(value.shape);
    }
};

using Var = std::shared_ptr<Node>;

inline Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return n;
}

inline Var make_input(Tensor v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return n;
}

inline Var make_param(Tensor v) { return make_input(std::move(v), true); }

inline Var detach(const Var& v) { return constant(v->value); }

inline Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->inputs = std::move(inputs);
    for (const auto& p : n->inputs) {
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    if (n->requires_grad) n->backward_fn = std::move(bw);
    return n;
}

// Accumulates d(root)/d(node) into node->grad for every reachable node with
// requires_grad. The root is seeded with ones (call on scalar losses).
inline void backward(const Var& root) {
    root->ensure_grad();
    for (double& g : root->grad.data) g += 1.0;

    // iterative postorder DFS: leaves first, root last
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        // Ops with inactive subgradients (hinges, zero distances) may skip
        // accumulation entirely, so a visited node can still hold no grad
        // storage; allocate zeros before its backward fn reads self.grad.
        n->ensure_grad();
        if (n->backward_fn) n->backward_fn(*n);
    }
}

namespace detail {
inline void accum(const Var& input, const Tensor& g) {
    if (!input->requires_grad) return;
    input->ensure_grad();
    const std::size_t n = g.data.size();
    for (std::size_t i = 0; i < n; ++i) input->grad.data[i] += g.data[i];
}
}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b) {
    require(a->value.shape == b->value.shape, "add: shape mismatch " + a->value.shape.str() + " vs " + b->value.shape.str());
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->value.data[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        detail::accum(self.inputs[0], self.grad);
        detail::accum(self.inputs[1], self.grad);
    });
}

inline Var sub(const Var& a, const Var& b) {
    require(a->value.shape == b->value.shape, "sub: shape mismatch " + a->value.shape.str() + " vs " + b->value.shape.str());
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b->value.data[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        detail::accum(self.inputs[0], self.grad);
        if (self.inputs[1]->requires_grad) {
            auto& in = self.inputs[1];
            in->ensure_grad();
            for (std::size_t i = 0; i < self.grad.data.size(); ++i) in->grad.data[i] -= self.grad.data[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    require(a->value.shape == b->value.shape, "mul: shape mismatch");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b->value.data[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        auto& a = self.inputs[0];
        auto& b = self.inputs[1];
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < self.grad.data.size(); ++i)
                a->grad.data[i] += self.grad.data[i] * b->value.data[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::size_t i = 0; i < self.grad.data.size(); ++i)
                b->grad.data[i] += self.grad.data[i] * a->value.data[i];
        }
    });
}

inline Var mul_scalar(const Var& a, double c) {
    Tensor out = a->value;
    for (double& v : out.data) v *= c;
    return make_op(std::move(out), {a}, [c](Node& self) {
        auto& in = self.inputs[0];
        if (!in->requires_grad) return;
        in->ensure_grad();
        for (std::size_t i = 0; i < self.grad.data.size(); ++i) in->grad.data[i] += c * self.grad.data[i];
    });
}

inline Var add_scalar(const Var& a, double c) {
    Tensor out = a->value;
    for (double& v : out.data) v += c;
    return make_op(std::move(out), {a}, [](Node& self) { detail::accum(self.inputs[0], self.grad); });
}

inline Var neg(const Var& a) { return mul_scalar(a, -1.0); }

inline Var relu(const Var& a) {
    Tensor out = a->value;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return make_op(std::move(out), {a}, [](Node& self) {
        auto& in = self.inputs[0];
        if (!in->requires_grad) return;
        in->ensure_grad();
        // subgradient 0 at the kink
        for (std::size_t i = 0; i < self.grad.data.size(); ++i)
            if (in->value.data[i] > 0.0) in->grad.data[i] += self.grad.data[i];
    });
}

inline Var leaky_relu(const Var& a, double slope = 0.2) {
    Tensor out = a->value;
    for (double& v : out.data) v = v > 0.0 ? v : slope * v;
    return make_op(std::move(out), {a}, [slope](Node& self) {
        auto& in = self.inputs[0];
        if (!in->requires_grad) return;
        in->ensure_grad();
        for (std::size_t i = 0; i < self.grad.data.size(); ++i)
            in->grad.data[i] += (in->value.data[i] > 0.0 ? 1.0 : slope) * self.grad.data[i];
    });
}

inline double sigmoid_scalar(double z) {
    if (z >= 0.0) {
        double e = std::exp(-z);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(z);
    return e / (1.0 + e);
}

// log(sigmoid(z)), stable for large |z|
inline double log_sigmoid_scalar(double z) {
    if (z >= 0.0) return -std::log1p(std::exp(-z));
    return z - std::log1p(std::exp(z));
}

inline Var sigmoid(const Var& a) {
    Tensor out = a->value;
    for (double& v : out.data) v = sigmoid_scalar(v);
    Tensor saved = out;
    return make_op(std::move(out), {a}, [saved](Node& self) {
        auto& in = self.inputs[0];
        if (!in->requires_grad) return;
        in->ensure_grad();
        for (std::size_t i = 0; i < self.grad.data.size(); ++i) {
            double y = saved.data[i];
            in->grad.data[i] += self.grad.data[i] * y * (1.0 - y);
        }
    });
}

inline Var log_sigmoid(const Var& a) {
    Tensor out = a->value;
    for (double& v : out.data) v = log_sigmoid_scalar(v);
    return make_op(std::move(out), {a}, [](Node& self) {
        auto& in = self.inputs[0];
        if (!in->requires_grad) return;
        in->ensure_grad();
        for (std::size_t i = 0; i < self.grad.data.size(); ++i)
            in->grad.data[i] += self.grad.data[i] * sigmoid_scalar(-in->value.data[i]);
    });
}

// Clamp to elementwise [lo, hi] bounds with pass-through (identity)
// gradients. Hard-zero gradients at the clamp boundary stall generator
// training, so the boundary behaves as a straight-through estimator.
inline Var clamp_pass(const Var& a, const Tensor& lo, const Tensor& hi) {
    require(a->value.shape == lo.shape && a->value.shape == hi.shape, "clamp_pass: bounds shape mismatch");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = std::min(std::max(out.data[i], lo.data[i]), hi.data[i]);
    return make_op(std::move(out), {a}, [](Node& self) { detail::accum(self.inputs[0], self.grad); });
}

inline Var clamp01_pass(const Var& a) {
    Tensor out = a->value;
    for (double& v : out.data) v = std::min(std::max(v, 0.0), 1.0);
    return make_op(std::move(out), {a}, [](Node& self) { detail::accum(self.inputs[0], self.grad); });
}

// ---------------------------------------------------------------- reductions

inline Var sum_all(const Var& a) {
    Tensor out = Tensor::scalar(a->value.sum());
    return make_op(std::move(out), {a}, [](Node& self) {
        auto& in = self.inputs[0];
        if (!in->requires_grad) return;
        in->ensure_grad();
        double g = self.grad.data[0];
        for (double& v : in->grad.data) v += g;
    });
}

inline Var mean_all(const Var& a) {
    int n = a->value.numel();
    require(n > 0, "mean_all: empty tensor");
    Tensor out = Tensor::scalar(a->value.sum() / n);
    return make_op(std::move(out), {a}, [n](Node& self) {
        auto& in = self.inputs[0];
        if (!in->requires_grad) return;
        in->ensure_grad();
        double g = self.grad.data[0] / n;
        for (double& v : in->grad.data) v += g;
    });
}

inline Var reshape(const Var& a, Shape s) {
    require(s.numel() == a->value.numel(), "reshape: numel mismatch");
    Tensor out = a->value;
    out.shape = s;
    return make_op(std::move(out), {a}, [](Node& self) { detail::accum(self.inputs[0], self.grad); });
}

// ---------------------------------------------------------------- matrix ops

// x: N x Din, w: Dout x Din, b: Dout -> N x Dout
inline Var linear(const Var& x, const Var& w, const Var& b) {
    require(x->value.shape.rank == 2 && w->value.shape.rank == 2, "linear: rank-2 inputs required");
    int N = x->value.shape.d[0], Din = x->value.shape.d[1], Dout = w->value.shape.d[0];
    require(w->value.shape.d[1] == Din, "linear: weight/input dim mismatch");
    require(b->value.numel() == Dout, "linear: bias dim mismatch");
    Tensor out({N, Dout});
    gemm_nt(N, Dout, Din, x->value.data.data(), w->value.data.data(), out.data.data());
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < Dout; ++j) out.at2(i, j) += b->value.data[static_cast<std::size_t>(j)];
    return make_op(std::move(out), {x, w, b}, [N, Din, Dout](Node& self) {
        auto& x = self.inputs[0];
        auto& w = self.inputs[1];
        auto& b = self.inputs[2];
        if (x->requires_grad) {
            x->ensure_grad();
            gemm_nn(N, Din, Dout, self.grad.data.data(), w->value.data.data(), x->grad.data.data());
        }
        if (w->requires_grad) {
            w->ensure_grad();
            gemm_tn(Dout, Din, N, self.grad.data.data(), x->value.data.data(), w->grad.data.data());
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < Dout; ++j) b->grad.data[static_cast<std::size_t>(j)] += self.grad.at2(i, j);
        }
    });
}

// out[i,:] = x[idx[i],:]
inline Var gather_rows(const Var& x, std::vector<int> idx) {
    require(x->value.shape.rank == 2, "gather_rows: rank-2 input required");
    int D = x->value.shape.d[1];
    Tensor out({static_cast<int>(idx.size()), D});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] >= 0 && idx[i] < x->value.shape.d[0], "gather_rows: index out of range");
        std::memcpy(out.row(static_cast<int>(i)), x->value.row(idx[i]), sizeof(double) * static_cast<std::size_t>(D));
    }
    return make_op(std::move(out), {x}, [idx = std::move(idx), D](Node& self) {
        auto& in = self.inputs[0];
        if (!in->requires_grad) return;
        in->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const double* g = self.grad.row(static_cast<int>(i));
            double* dst = in->grad.row(idx[i]);
            for (int j = 0; j < D; ++j) dst[j] += g[j];
        }
    });
}

// Row-wise Euclidean distance between two N x D matrices -> N vector.
// Subgradient 0 where the distance is exactly zero.
inline Var row_l2_distance(const Var& a, const Var& b) {
    require(a->value.shape == b->value.shape && a->value.shape.rank == 2, "row_l2_distance: N x D inputs required");
    int N = a->value.shape.d[0], D = a->value.shape.d[1];
    Tensor out({N});
    for (int i = 0; i < N; ++i) out.data[static_cast<std::size_t>(i)] = euclidean(a->value.row(i), b->value.row(i), D);
    Tensor dists = out;
    return make_op(std::move(out), {a, b}, [N, D, dists](Node& self) {
        auto& a = self.inputs[0];
        auto& b = self.inputs[1];
        for (int i = 0; i < N; ++i) {
            double d = dists.data[static_cast<std::size_t>(i)];
            if (d <= 0.0) continue;
            double coef = self.grad.data[static_cast<std::size_t>(i)] / d;
            const double* av = a->value.row(i);
            const double* bv = b->value.row(i);
            if (a->requires_grad) {
                a->ensure_grad();
                double* g = a->grad.row(i);
                for (int j = 0; j < D; ++j) g[j] += coef * (av[j] - bv[j]);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                double* g = b->grad.row(i);
                for (int j = 0; j < D; ++j) g[j] -= coef * (av[j] - bv[j]);
            }
        }
    });
}

// Softmax cross-entropy over logits (N x K) with integer labels -> scalar mean.
inline Var cross_entropy_logits(const Var& logits, const std::vector<int>& labels) {
    require(logits->value.shape.rank == 2, "cross_entropy_logits: rank-2 logits required");
    int N = logits->value.shape.d[0], K = logits->value.shape.d[1];
    require(static_cast<int>(labels.size()) == N, "cross_entropy_logits: label count mismatch");
    Tensor probs({N, K});
    double loss = 0.0;
    for (int i = 0; i < N; ++i) {
        const double* z = logits->value.row(i);
        double m = z[0];
        for (int k = 1; k < K; ++k) m = std::max(m, z[k]);
        double sum = 0.0;
        for (int k = 0; k < K; ++k) {
            double e = std::exp(z[k] - m);
            probs.at2(i, k) = e;
            sum += e;
        }
        for (int k = 0; k < K; ++k) probs.at2(i, k) /= sum;
        require(labels[static_cast<std::size_t>(i)] >= 0 && labels[static_cast<std::size_t>(i)] < K,
                "cross_entropy_logits: label out of range");
        loss -= std::log(std::max(probs.at2(i, labels[static_cast<std::size_t>(i)]), 1e-300));
    }
    loss /= N;
    return make_op(Tensor::scalar(loss), {logits}, [N, K, probs, labels](Node& self) {
        auto& in = self.inputs[0];
        if (!in->requires_grad) return;
        in->ensure_grad();
        double g = self.grad.data[0] / N;
        for (int i = 0; i < N; ++i)
            for (int k = 0; k < K; ++k)
                in->grad.at2(i, k) += g * (probs.at2(i, k) - (labels[static_cast<std::size_t>(i)] == k ? 1.0 : 0.0));
    });
}

// ---------------------------------------------------------------- conv / pool

namespace detail {

inline void im2col(const double* img, int C, int H, int W, int k, int stride, int pad, int OH, int OW, double* col) {
    // col layout: (C*k*k) x (OH*OW)
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* dst = col + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * OH * OW;
                for (int oy = 0; oy < OH; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        for (int ox = 0; ox < OW; ++ox) dst[oy * OW + ox] = 0.0;
                        continue;
                    }
                    const double* src = img + (static_cast<std::size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        int ix = ox * stride - pad + kx;
                        dst[oy * OW + ox] = (ix >= 0 && ix < W) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

inline void col2im_accum(const double* col, int C, int H, int W, int k, int stride, int pad, int OH, int OW, double* img) {
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* src = col + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * OH * OW;
                for (int oy = 0; oy < OH; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    double* dst = img + (static_cast<std::size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) dst[ix] += src[oy * OW + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// x: N x Cin x H x W, w: Cout x Cin x k x k, b: Cout
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    require(x->value.shape.rank == 4 && w->value.shape.rank == 4, "conv2d: rank-4 input and weight required");
    int N = x->value.shape.d[0], Cin = x->value.shape.d[1], H = x->value.shape.d[2], W = x->value.shape.d[3];
    int Cout = w->value.shape.d[0], k = w->value.shape.d[2];
    require(w->value.shape.d[1] == Cin && w->value.shape.d[3] == k, "conv2d: weight shape mismatch");
    require(b->value.numel() == Cout, "conv2d: bias shape mismatch");
    int OH = (H + 2 * pad - k) / stride + 1;
    int OW = (W + 2 * pad - k) / stride + 1;
    require(OH > 0 && OW > 0, "conv2d: output would be empty");

    const int ck2 = Cin * k * k;
    Tensor out({N, Cout, OH, OW});
    std::vector<double> col(static_cast<std::size_t>(ck2) * OH * OW);
    for (int n = 0; n < N; ++n) {
        detail::im2col(&x->value.data[x->value.idx4(n, 0, 0, 0)], Cin, H, W, k, stride, pad, OH, OW, col.data());
        double* o = &out.data[out.idx4(n, 0, 0, 0)];
        gemm_nn(Cout, OH * OW, ck2, w->value.data.data(), col.data(), o);
        for (int c = 0; c < Cout; ++c) {
            double bias = b->value.data[static_cast<std::size_t>(c)];
            double* oc = o + static_cast<std::size_t>(c) * OH * OW;
            for (int i = 0; i < OH * OW; ++i) oc[i] += bias;
        }
    }
    return make_op(std::move(out), {x, w, b}, [N, Cin, H, W, Cout, k, stride, pad, OH, OW, ck2](Node& self) {
        auto& x = self.inputs[0];
        auto& w = self.inputs[1];
        auto& b = self.inputs[2];
        std::vector<double> col(static_cast<std::size_t>(ck2) * OH * OW);
        std::vector<double> dcol(static_cast<std::size_t>(ck2) * OH * OW);
        if (x->requires_grad) x->ensure_grad();
        if (w->requires_grad) w->ensure_grad();
        if (b->requires_grad) b->ensure_grad();
        for (int n = 0; n < N; ++n) {
            const double* g = &self.grad.data[self.grad.idx4(n, 0, 0, 0)];
            if (w->requires_grad || x->requires_grad) {
                if (w->requires_grad) {
                    detail::im2col(&x->value.data[x->value.idx4(n, 0, 0, 0)], Cin, H, W, k, stride, pad, OH, OW,
                                   col.data());
                    // dW += g * col^T
                    gemm_nt(Cout, ck2, OH * OW, g, col.data(), w->grad.data.data());
                }
                if (x->requires_grad) {
                    std::fill(dcol.begin(), dcol.end(), 0.0);
                    gemm_tn(ck2, OH * OW, Cout, w->value.data.data(), g, dcol.data());
                    detail::col2im_accum(dcol.data(), Cin, H, W, k, stride, pad, OH, OW,
                                         &x->grad.data[x->grad.idx4(n, 0, 0, 0)]);
                }
            }
            if (b->requires_grad) {
                for (int c = 0; c < Cout; ++c) {
                    const double* gc = g + static_cast<std::size_t>(c) * OH * OW;
                    double s = 0.0;
                    for (int i = 0; i < OH * OW; ++i) s += gc[i];
                    b->grad.data[static_cast<std::size_t>(c)] += s;
                }
            }
        }
    });
}

inline Var upsample_nearest2(const Var& x) {
    require(x->value.shape.rank == 4, "upsample_nearest2: rank-4 input required");
    int N = x->value.shape.d[0], C = x->value.shape.d[1], H = x->value.shape.d[2], W = x->value.shape.d[3];
    Tensor out({N, C, H * 2, W * 2});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) {
                    double v = x->value.at4(n, c, y, xx);
                    out.at4(n, c, 2 * y, 2 * xx) = v;
                    out.at4(n, c, 2 * y, 2 * xx + 1) = v;
                    out.at4(n, c, 2 * y + 1, 2 * xx) = v;
                    out.at4(n, c, 2 * y + 1, 2 * xx + 1) = v;
                }
    return make_op(std::move(out), {x}, [N, C, H, W](Node& self) {
        auto& in = self.inputs[0];
        if (!in->requires_grad) return;
        in->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx)
                        in->grad.at4(n, c, y, xx) += self.grad.at4(n, c, 2 * y, 2 * xx) +
                                                     self.grad.at4(n, c, 2 * y, 2 * xx + 1) +
                                                     self.grad.at4(n, c, 2 * y + 1, 2 * xx) +
                                                     self.grad.at4(n, c, 2 * y + 1, 2 * xx + 1);
    });
}

inline Var maxpool2(const Var& x) {
    require(x->value.shape.rank == 4, "maxpool2: rank-4 input required");
    int N = x->value.shape.d[0], C = x->value.shape.d[1], H = x->value.shape.d[2], W = x->value.shape.d[3];
    require(H % 2 == 0 && W % 2 == 0, "maxpool2: even spatial dims required");
    int OH = H / 2, OW = W / 2;
    Tensor out({N, C, OH, OW});
    std::vector<std::uint32_t> argmax(static_cast<std::size_t>(out.numel()));
    std::size_t oi = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < OH; ++y)
                for (int xx = 0; xx < OW; ++xx, ++oi) {
                    double best = -1e300;
                    std::uint32_t bi = 0;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            std::size_t idx = x->value.idx4(n, c, 2 * y + dy, 2 * xx + dx);
                            if (x->value.data[idx] > best) {
                                best = x->value.data[idx];
                                bi = static_cast<std::uint32_t>(idx);
                            }
                        }
                    out.data[oi] = best;
                    argmax[oi] = bi;
                }
    return make_op(std::move(out), {x}, [argmax = std::move(argmax)](Node& self) {
        auto& in = self.inputs[0];
        if (!in->requires_grad) return;
        in->ensure_grad();
        for (std::size_t i = 0; i < argmax.size(); ++i) in->grad.data[argmax[i]] += self.grad.data[i];
    });
}

inline Var avgpool2(const Var& x) {
    require(x->value.shape.rank == 4, "avgpool2: rank-4 input required");
    int N = x->value.shape.d[0], C = x->value.shape.d[1], H = x->value.shape.d[2], W = x->value.shape.d[3];
    require(H % 2 == 0 && W % 2 == 0, "avgpool2: even spatial dims required");
    int OH = H / 2, OW = W / 2;
    Tensor out({N, C, OH, OW});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < OH; ++y)
                for (int xx = 0; xx < OW; ++xx)
                    out.at4(n, c, y, xx) = 0.25 * (x->value.at4(n, c, 2 * y, 2 * xx) +
                                                   x->value.at4(n, c, 2 * y, 2 * xx + 1) +
                                                   x->value.at4(n, c, 2 * y + 1, 2 * xx) +
                                                   x->value.at4(n, c, 2 * y + 1, 2 * xx + 1));
    return make_op(std::move(out), {x}, [N, C, OH, OW](Node& self) {
        auto& in = self.inputs[0];
        if (!in->requires_grad) return;
        in->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < OH; ++y)
                    for (int xx = 0; xx < OW; ++xx) {
                        double g = 0.25 * self.grad.at4(n, c, y, xx);
                        in->grad.at4(n, c, 2 * y, 2 * xx) += g;
                        in->grad.at4(n, c, 2 * y, 2 * xx + 1) += g;
                        in->grad.at4(n, c, 2 * y + 1, 2 * xx) += g;
                        in->grad.at4(n, c, 2 * y + 1, 2 * xx + 1) += g;
                    }
    });
}

// N x C x H x W -> N x C
inline Var global_avg_pool(const Var& x) {
    require(x->value.shape.rank == 4, "global_avg_pool: rank-4 input required");
    int N = x->value.shape.d[0], C = x->value.shape.d[1], H = x->value.shape.d[2], W = x->value.shape.d[3];
    int hw = H * W;
    Tensor out({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* src = &x->value.data[x->value.idx4(n, c, 0, 0)];
            double s = 0.0;
            for (int i = 0; i < hw; ++i) s += src[i];
            out.at2(n, c) = s / hw;
        }
    return make_op(std::move(out), {x}, [N, C, hw](Node& self) {
        auto& in = self.inputs[0];
        if (!in->requires_grad) return;
        in->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double g = self.grad.at2(n, c) / hw;
                double* dst = &in->grad.data[in->grad.idx4(n, c, 0, 0)];
                for (int i = 0; i < hw; ++i) dst[i] += g;
            }
    });
}

// Per-sample, per-channel normalization; gamma/beta are per-channel.
inline Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    require(x->value.shape.rank == 4, "instance_norm: rank-4 input required");
    int N = x->value.shape.d[0], C = x->value.shape.d[1], H = x->value.shape.d[2], W = x->value.shape.d[3];
    require(gamma->value.numel() == C && beta->value.numel() == C, "instance_norm: gamma/beta must be per-channel");
    int m = H * W;
    Tensor out(x->value.shape);
    Tensor xhat(x->value.shape);
    std::vector<double> inv_std(static_cast<std::size_t>(N) * C);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* src = &x->value.data[x->value.idx4(n, c, 0, 0)];
            double mean = 0.0;
            for (int i = 0; i < m; ++i) mean += src[i];
            mean /= m;
            double var = 0.0;
            for (int i = 0; i < m; ++i) {
                double d = src[i] - mean;
                var += d * d;
            }
            var /= m;
            double is = 1.0 / std::sqrt(var + eps);
            inv_std[static_cast<std::size_t>(n) * C + c] = is;
            double g = gamma->value.data[static_cast<std::size_t>(c)];
            double bt = beta->value.data[static_cast<std::size_t>(c)];
            double* xh = &xhat.data[xhat.idx4(n, c, 0, 0)];
            double* o = &out.data[out.idx4(n, c, 0, 0)];
            for (int i = 0; i < m; ++i) {
                xh[i] = (src[i] - mean) * is;
                o[i] = g * xh[i] + bt;
            }
        }
    return make_op(std::move(out), {x, gamma, beta},
                   [N, C, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       auto& x = self.inputs[0];
                       auto& gamma = self.inputs[1];
                       auto& beta = self.inputs[2];
                       if (x->requires_grad) x->ensure_grad();
                       if (gamma->requires_grad) gamma->ensure_grad();
                       if (beta->requires_grad) beta->ensure_grad();
                       for (int n = 0; n < N; ++n)
                           for (int c = 0; c < C; ++c) {
                               const double* g = &self.grad.data[self.grad.idx4(n, c, 0, 0)];
                               const double* xh = &xhat.data[xhat.idx4(n, c, 0, 0)];
                               double sum_g = 0.0, sum_gx = 0.0;
                               for (int i = 0; i < m; ++i) {
                                   sum_g += g[i];
                                   sum_gx += g[i] * xh[i];
                               }
                               if (beta->requires_grad) beta->grad.data[static_cast<std::size_t>(c)] += sum_g;
                               if (gamma->requires_grad) gamma->grad.data[static_cast<std::size_t>(c)] += sum_gx;
                               if (x->requires_grad) {
                                   double gm = gamma->value.data[static_cast<std::size_t>(c)];
                                   double is = inv_std[static_cast<std::size_t>(n) * C + c];
                                   double mg = sum_g / m, mgx = sum_gx / m;
                                   double* dst = &x->grad.data[x->grad.idx4(n, c, 0, 0)];
                                   for (int i = 0; i < m; ++i) dst[i] += gm * is * (g[i] - mg - xh[i] * mgx);
                               }
                           }
                   });
}

// ---------------------------------------------------------------- image ops

// Per-sample horizontal flip (flags[n] != 0 flips sample n).
inline Var hflip_images(const Var& x, std::vector<std::uint8_t> flags) {
    require(x->value.shape.rank == 4, "hflip_images: rank-4 input required");
    int N = x->value.shape.d[0], C = x->value.shape.d[1], H = x->value.shape.d[2], W = x->value.shape.d[3];
    require(static_cast<int>(flags.size()) == N, "hflip_images: flag count mismatch");
    Tensor out = x->value;
    for (int n = 0; n < N; ++n) {
        if (!flags[static_cast<std::size_t>(n)]) continue;
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) out.at4(n, c, y, xx) = x->value.at4(n, c, y, W - 1 - xx);
    }
    return make_op(std::move(out), {x}, [flags = std::move(flags), N, C, H, W](Node& self) {
        auto& in = self.inputs[0];
        if (!in->requires_grad) return;
        in->ensure_grad();
        for (int n = 0; n < N; ++n) {
            bool f = flags[static_cast<std::size_t>(n)] != 0;
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx)
                        in->grad.at4(n, c, y, f ? (W - 1 - xx) : xx) += self.grad.at4(n, c, y, xx);
        }
    });
}

struct CropBox {
    // crop origin and size in input pixels; output is resized back to the
    // full input resolution with bilinear sampling
    int x0 = 0, y0 = 0, w = 0, h = 0;
};

inline Var crop_resize_bilinear(const Var& x, std::vector<CropBox> boxes) {
    require(x->value.shape.rank == 4, "crop_resize_bilinear: rank-4 input required");
    int N = x->value.shape.d[0], C = x->value.shape.d[1], H = x->value.shape.d[2], W = x->value.shape.d[3];
    require(static_cast<int>(boxes.size()) == N, "crop_resize_bilinear: box count mismatch");
    for (const auto& b : boxes)
        require(b.w >= 1 && b.h >= 1 && b.x0 >= 0 && b.y0 >= 0 && b.x0 + b.w <= W && b.y0 + b.h <= H,
                "crop_resize_bilinear: box out of range");

    // precompute sampling taps per sample: (y0,y1,wy, x0,x1,wx) per output pixel
    struct Tap {
        int lo, hi;
        double frac;
    };
    auto make_taps = [](int out_n, int crop_lo, int crop_n, int /*limit*/) {
        std::vector<Tap> taps(static_cast<std::size_t>(out_n));
        double scale = static_cast<double>(crop_n) / out_n;
        for (int i = 0; i < out_n; ++i) {
            double src = (i + 0.5) * scale - 0.5;
            if (src < 0.0) src = 0.0;
            if (src > crop_n - 1) src = crop_n - 1;
            int lo = static_cast<int>(std::floor(src));
            int hi = std::min(lo + 1, crop_n - 1);
            taps[static_cast<std::size_t>(i)] = {crop_lo + lo, crop_lo + hi, src - lo};
        }
        return taps;
    };

    std::vector<std::vector<Tap>> ytaps(static_cast<std::size_t>(N)), xtaps(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n) {
        ytaps[static_cast<std::size_t>(n)] = make_taps(H, boxes[static_cast<std::size_t>(n)].y0, boxes[static_cast<std::size_t>(n)].h, H);
        xtaps[static_cast<std::size_t>(n)] = make_taps(W, boxes[static_cast<std::size_t>(n)].x0, boxes[static_cast<std::size_t>(n)].w, W);
    }

    Tensor out(x->value.shape);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y) {
                const auto& ty = ytaps[static_cast<std::size_t>(n)][static_cast<std::size_t>(y)];
                for (int xx = 0; xx < W; ++xx) {
                    const auto& tx = xtaps[static_cast<std::size_t>(n)][static_cast<std::size_t>(xx)];
                    double v00 = x->value.at4(n, c, ty.lo, tx.lo);
                    double v01 = x->value.at4(n, c, ty.lo, tx.hi);
                    double v10 = x->value.at4(n, c, ty.hi, tx.lo);
                    double v11 = x->value.at4(n, c, ty.hi, tx.hi);
                    double top = v00 + (v01 - v00) * tx.frac;
                    double bot = v10 + (v11 - v10) * tx.frac;
                    out.at4(n, c, y, xx) = top + (bot - top) * ty.frac;
                }
            }
    return make_op(std::move(out), {x},
                   [N, C, H, W, ytaps = std::move(ytaps), xtaps = std::move(xtaps)](Node& self) {
                       auto& in = self.inputs[0];
                       if (!in->requires_grad) return;
                       in->ensure_grad();
                       for (int n = 0; n < N; ++n)
                           for (int c = 0; c < C; ++c)
                               for (int y = 0; y < H; ++y) {
                                   const auto& ty = ytaps[static_cast<std::size_t>(n)][static_cast<std::size_t>(y)];
                                   for (int xx = 0; xx < W; ++xx) {
                                       const auto& tx = xtaps[static_cast<std::size_t>(n)][static_cast<std::size_t>(xx)];
                                       double g = self.grad.at4(n, c, y, xx);
                                       double fy = ty.frac, fx = tx.frac;
                                       in->grad.at4(n, c, ty.lo, tx.lo) += g * (1 - fy) * (1 - fx);
                                       in->grad.at4(n, c, ty.lo, tx.hi) += g * (1 - fy) * fx;
                                       in->grad.at4(n, c, ty.hi, tx.lo) += g * fy * (1 - fx);
                                       in->grad.at4(n, c, ty.hi, tx.hi) += g * fy * fx;
                                   }
                               }
                   });
}

// out[n,...] = x[n,...] + deltas[n]
inline Var add_per_sample(const Var& x, std::vector<double> deltas) {
    require(x->value.shape.rank == 4, "add_per_sample: rank-4 input required");
    int N = x->value.shape.d[0];
    require(static_cast<int>(deltas.size()) == N, "add_per_sample: delta count mismatch");
    std::size_t per = x->value.data.size() / static_cast<std::size_t>(N);
    Tensor out = x->value;
    for (int n = 0; n < N; ++n) {
        double d = deltas[static_cast<std::size_t>(n)];
        double* p = out.data.data() + static_cast<std::size_t>(n) * per;
        for (std::size_t i = 0; i < per; ++i) p[i] += d;
    }
    return make_op(std::move(out), {x}, [](Node& self) { detail::accum(self.inputs[0], self.grad); });
}

}  // namespace mega

#endif
