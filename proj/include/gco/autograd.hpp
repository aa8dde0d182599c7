#ifndef GCO_AUTOGRAD_HPP
#define GCO_AUTOGRAD_HPP

// Small tape autograd over TensorT. Ops run eagerly and record a backward
// closure; backward() walks the tape in reverse topological order.
// Instantiated with float for training/inference and double for the
// finite-difference gradient checks.

#include <functional>
#include <memory>
#include <unordered_set>

#include "gco/kernels.hpp"

namespace gco::ag {

template <typename T>
struct Node {
    TensorT<T> val;
    TensorT<T> grad;
    bool requires_grad = false;
    std::string name;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> back;

    void ensure_grad() {
        if (grad.shape != val.shape) {
            grad.shape = val.shape;
            grad.v.assign(val.v.size(), T(0));
        }
    }
    void zero_grad() { grad.v.assign(grad.v.size(), T(0)); grad.shape = val.shape; }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> leaf(TensorT<T> t, bool requires_grad = false, std::string name = "") {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(t);
    n->requires_grad = requires_grad;
    n->name = std::move(name);
    if (requires_grad) n->ensure_grad();
    return n;
}

template <typename T>
Var<T> make_op(TensorT<T> out, std::vector<Var<T>> parents, std::function<void(Node<T>&)> back) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(out);
    n->parents = std::move(parents);
    for (auto& p : n->parents)
        if (p && p->requires_grad) { n->requires_grad = true; break; }
    if (n->requires_grad) n->back = std::move(back);
    return n;
}

template <typename T>
void backward(const Var<T>& root) {
    if (root->val.numel() != 1)
        throw ValidationError("backward: root must be a scalar");
    // reverse topological order
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node<T>* p = n->parents[i++].get();
            if (p && p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (auto* n : order) n->ensure_grad();
    root->grad.v[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->back) n->back(*n);
    }
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (!a->val.same_shape(b->val))
        throw ValidationError("add: shape mismatch " + a->val.shape_str() + " vs " + b->val.shape_str());
    TensorT<T> out = a->val;
    const int64_t n = out.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; i++) out.v[i] += b->val.v[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
        for (int k = 0; k < 2; k++) {
            auto& p = self.parents[k];
            if (!p->requires_grad) continue;
            p->ensure_grad();
            const int64_t n = self.grad.numel();
            for (int64_t i = 0; i < n; i++) p->grad.v[i] += self.grad.v[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    TensorT<T> out = a->val;
    for (auto& x : out.v) x *= s;
    return make_op<T>(std::move(out), {a}, [s](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        const int64_t n = self.grad.numel();
        for (int64_t i = 0; i < n; i++) p->grad.v[i] += s * self.grad.v[i];
    });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    TensorT<T> out = a->val;
    const int64_t n = out.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; i++) {
        T x = out.v[i];
        out.v[i] = x / (T(1) + std::exp(-x));
    }
    return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        const int64_t n = self.grad.numel();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; i++) {
            T x = p->val.v[i];
            T sg = T(1) / (T(1) + std::exp(-x));
            p->grad.v[i] += self.grad.v[i] * sg * (T(1) + x * (T(1) - sg));
        }
    });
}

// x (C,H,W) + v[c] broadcast over spatial positions
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& v) {
    if (x->val.rank() != 3 || v->val.rank() != 1 || v->val.dim(0) != x->val.dim(0))
        throw ValidationError("add_channel_bias: expected (C,H,W) and (C)");
    TensorT<T> out = x->val;
    const int C = out.dim(0), HW = out.dim(1) * out.dim(2);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; c++) {
        T b = v->val.v[c];
        T* row = out.data() + static_cast<size_t>(c) * HW;
        for (int i = 0; i < HW; i++) row[i] += b;
    }
    return make_op<T>(std::move(out), {x, v}, [C, HW](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pv = self.parents[1];
        if (px->requires_grad) {
            px->ensure_grad();
            const int64_t n = self.grad.numel();
            for (int64_t i = 0; i < n; i++) px->grad.v[i] += self.grad.v[i];
        }
        if (pv->requires_grad) {
            pv->ensure_grad();
            for (int c = 0; c < C; c++) {
                double acc = 0.0;
                const T* row = self.grad.data() + static_cast<size_t>(c) * HW;
                for (int i = 0; i < HW; i++) acc += static_cast<double>(row[i]);
                pv->grad.v[c] += static_cast<T>(acc);
            }
        }
    });
}

// ---------------------------------------------------------------- conv / shape

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    if (x->val.rank() != 3 || w->val.rank() != 4)
        throw ValidationError("conv2d: expected x (C,H,W), w (OC,IC,KH,KW)");
    if (x->val.dim(0) != w->val.dim(1))
        throw ValidationError("conv2d: input channels " + std::to_string(x->val.dim(0)) +
                              " do not match weight " + std::to_string(w->val.dim(1)));
    ConvDims d = ConvDims::make(x->val.dim(0), x->val.dim(1), x->val.dim(2),
                                w->val.dim(0), w->val.dim(2), w->val.dim(3), stride, pad);
    TensorT<T> out({d.oc, d.oh, d.ow});
    kern::conv2d_fwd(x->val.data(), w->val.data(), b ? b->val.data() : nullptr, out.data(), d);
    std::vector<Var<T>> parents = {x, w};
    if (b) parents.push_back(b);
    return make_op<T>(std::move(out), std::move(parents), [d](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        if (px->requires_grad) {
            px->ensure_grad();
            TensorT<T> gx({d.ic, d.ih, d.iw});
            kern::conv2d_bwd_input(pw->val.data(), self.grad.data(), gx.data(), d);
            for (int64_t i = 0; i < gx.numel(); i++) px->grad.v[i] += gx.v[i];
        }
        if (pw->requires_grad) {
            pw->ensure_grad();
            T* gb = nullptr;
            if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                self.parents[2]->ensure_grad();
                gb = self.parents[2]->grad.data();
            }
            kern::conv2d_bwd_params(px->val.data(), self.grad.data(), pw->grad.data(), gb, d);
        }
    });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
    const int C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
    TensorT<T> out({C, H * 2, W * 2});
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; c++)
        for (int y = 0; y < 2 * H; y++)
            for (int xg = 0; xg < 2 * W; xg++)
                out.at(c, y, xg) = x->val.at(c, y / 2, xg / 2);
    return make_op<T>(std::move(out), {x}, [C, H, W](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int c = 0; c < C; c++)
            for (int y = 0; y < 2 * H; y++)
                for (int xg = 0; xg < 2 * W; xg++)
                    p->grad.at(c, y / 2, xg / 2) += self.grad.at(c, y, xg);
    });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw ValidationError("concat_channels: empty input");
    int H = xs[0]->val.dim(1), W = xs[0]->val.dim(2), C = 0;
    for (auto& x : xs) {
        if (x->val.rank() != 3 || x->val.dim(1) != H || x->val.dim(2) != W)
            throw ValidationError("concat_channels: spatial shape mismatch");
        C += x->val.dim(0);
    }
    TensorT<T> out({C, H, W});
    size_t off = 0;
    for (auto& x : xs) {
        std::memcpy(out.data() + off, x->val.data(), sizeof(T) * x->val.numel());
        off += x->val.numel();
    }
    return make_op<T>(std::move(out), xs, [](Node<T>& self) {
        size_t off = 0;
        for (auto& p : self.parents) {
            if (p->requires_grad) {
                p->ensure_grad();
                for (int64_t i = 0; i < p->val.numel(); i++)
                    p->grad.v[i] += self.grad.v[off + i];
            }
            off += p->val.numel();
        }
    });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, int c0, int c1) {
    const int C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
    if (c0 < 0 || c1 > C || c0 >= c1) throw ValidationError("slice_channels: bad range");
    TensorT<T> out({c1 - c0, H, W});
    const size_t plane = static_cast<size_t>(H) * W;
    std::memcpy(out.data(), x->val.data() + c0 * plane, sizeof(T) * out.numel());
    return make_op<T>(std::move(out), {x}, [c0, plane](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); i++)
            p->grad.v[c0 * plane + i] += self.grad.v[i];
    });
}

// (C,H,W) -> (H*W, C) token matrix
template <typename T>
Var<T> spatial_to_tokens(const Var<T>& x) {
    const int C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
    TensorT<T> out({H * W, C});
#pragma omp parallel for schedule(static)
    for (int i = 0; i < H * W; i++)
        for (int c = 0; c < C; c++)
            out.v[static_cast<size_t>(i) * C + c] = x->val.v[static_cast<size_t>(c) * H * W + i];
    return make_op<T>(std::move(out), {x}, [C, H, W](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < H * W; i++)
            for (int c = 0; c < C; c++)
                p->grad.v[static_cast<size_t>(c) * H * W + i] += self.grad.v[static_cast<size_t>(i) * C + c];
    });
}

template <typename T>
Var<T> tokens_to_spatial(const Var<T>& x, int H, int W) {
    const int N = x->val.dim(0), C = x->val.dim(1);
    if (N != H * W) throw ValidationError("tokens_to_spatial: token count mismatch");
    TensorT<T> out({C, H, W});
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; c++)
        for (int i = 0; i < N; i++)
            out.v[static_cast<size_t>(c) * N + i] = x->val.v[static_cast<size_t>(i) * C + c];
    return make_op<T>(std::move(out), {x}, [C, N](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int c = 0; c < C; c++)
            for (int i = 0; i < N; i++)
                p->grad.v[static_cast<size_t>(i) * C + c] += self.grad.v[static_cast<size_t>(c) * N + i];
    });
}

// ---------------------------------------------------------------- matrix ops

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    if (x->val.rank() != 2 || w->val.rank() != 2 || x->val.dim(1) != w->val.dim(0))
        throw ValidationError("linear: bad shapes");
    const int n = x->val.dim(0), din = w->val.dim(0), dout = w->val.dim(1);
    TensorT<T> out({n, dout});
    kern::linear_fwd(x->val.data(), w->val.data(), b ? b->val.data() : nullptr, out.data(), n, din, dout);
    std::vector<Var<T>> parents = {x, w};
    if (b) parents.push_back(b);
    return make_op<T>(std::move(out), std::move(parents), [n, din, dout](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        if (px->requires_grad) {
            px->ensure_grad();
            // gx[l,i] += sum_j gy[l,j] * w[i,j]
#pragma omp parallel for schedule(static)
            for (int l = 0; l < n; l++) {
                const T* gyr = self.grad.data() + static_cast<size_t>(l) * dout;
                T* gxr = px->grad.data() + static_cast<size_t>(l) * din;
                for (int i = 0; i < din; i++) {
                    const T* wr = pw->val.data() + static_cast<size_t>(i) * dout;
                    double acc = 0.0;
                    for (int j = 0; j < dout; j++) acc += static_cast<double>(gyr[j]) * static_cast<double>(wr[j]);
                    gxr[i] += static_cast<T>(acc);
                }
            }
        }
        if (pw->requires_grad) {
            pw->ensure_grad();
            // gw[i,j] += sum_l x[l,i] * gy[l,j]
#pragma omp parallel for schedule(static)
            for (int i = 0; i < din; i++) {
                T* gwr = pw->grad.data() + static_cast<size_t>(i) * dout;
                for (int l = 0; l < n; l++) {
                    T xv = px->val.data()[static_cast<size_t>(l) * din + i];
                    const T* gyr = self.grad.data() + static_cast<size_t>(l) * dout;
                    for (int j = 0; j < dout; j++) gwr[j] += xv * gyr[j];
                }
            }
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            auto& pb = self.parents[2];
            pb->ensure_grad();
            for (int j = 0; j < dout; j++) {
                double acc = 0.0;
                for (int l = 0; l < n; l++) acc += static_cast<double>(self.grad.data()[static_cast<size_t>(l) * dout + j]);
                pb->grad.v[j] += static_cast<T>(acc);
            }
        }
    });
}

// A (n,d) @ B(m,d)^T -> (n,m)
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
    if (a->val.dim(1) != b->val.dim(1)) throw ValidationError("matmul_nt: inner dim mismatch");
    const int n = a->val.dim(0), m = b->val.dim(0), d = a->val.dim(1);
    TensorT<T> out({n, m});
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; i++) {
        const T* ar = a->val.data() + static_cast<size_t>(i) * d;
        T* orow = out.data() + static_cast<size_t>(i) * m;
        for (int j = 0; j < m; j++) {
            const T* br = b->val.data() + static_cast<size_t>(j) * d;
            double acc = 0.0;
            for (int k = 0; k < d; k++) acc += static_cast<double>(ar[k]) * static_cast<double>(br[k]);
            orow[j] = static_cast<T>(acc);
        }
    }
    return make_op<T>(std::move(out), {a, b}, [n, m, d](Node<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            // ga[i,k] += sum_j g[i,j] * b[j,k]
#pragma omp parallel for schedule(static)
            for (int i = 0; i < n; i++) {
                const T* gr = self.grad.data() + static_cast<size_t>(i) * m;
                T* gar = pa->grad.data() + static_cast<size_t>(i) * d;
                for (int j = 0; j < m; j++) {
                    T gv = gr[j];
                    const T* br = pb->val.data() + static_cast<size_t>(j) * d;
                    for (int k = 0; k < d; k++) gar[k] += gv * br[k];
                }
            }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            // gb[j,k] += sum_i g[i,j] * a[i,k]
#pragma omp parallel for schedule(static)
            for (int j = 0; j < m; j++) {
                T* gbr = pb->grad.data() + static_cast<size_t>(j) * d;
                for (int i = 0; i < n; i++) {
                    T gv = self.grad.data()[static_cast<size_t>(i) * m + j];
                    const T* ar = pa->val.data() + static_cast<size_t>(i) * d;
                    for (int k = 0; k < d; k++) gbr[k] += gv * ar[k];
                }
            }
        }
    });
}

// P (n,m) @ V (m,d) -> (n,d)
template <typename T>
Var<T> matmul_nn(const Var<T>& p, const Var<T>& v) {
    if (p->val.dim(1) != v->val.dim(0)) throw ValidationError("matmul_nn: inner dim mismatch");
    const int n = p->val.dim(0), m = p->val.dim(1), d = v->val.dim(1);
    TensorT<T> out({n, d});
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; i++) {
        T* orow = out.data() + static_cast<size_t>(i) * d;
        std::memset(orow, 0, sizeof(T) * d);
        const T* pr = p->val.data() + static_cast<size_t>(i) * m;
        for (int j = 0; j < m; j++) {
            T pv = pr[j];
            const T* vr = v->val.data() + static_cast<size_t>(j) * d;
            for (int k = 0; k < d; k++) orow[k] += pv * vr[k];
        }
    }
    return make_op<T>(std::move(out), {p, v}, [n, m, d](Node<T>& self) {
        auto& pp = self.parents[0];
        auto& pv = self.parents[1];
        if (pp->requires_grad) {
            pp->ensure_grad();
#pragma omp parallel for schedule(static)
            for (int i = 0; i < n; i++) {
                const T* gr = self.grad.data() + static_cast<size_t>(i) * d;
                T* gpr = pp->grad.data() + static_cast<size_t>(i) * m;
                for (int j = 0; j < m; j++) {
                    const T* vr = pv->val.data() + static_cast<size_t>(j) * d;
                    double acc = 0.0;
                    for (int k = 0; k < d; k++) acc += static_cast<double>(gr[k]) * static_cast<double>(vr[k]);
                    gpr[j] += static_cast<T>(acc);
                }
            }
        }
        if (pv->requires_grad) {
            pv->ensure_grad();
#pragma omp parallel for schedule(static)
            for (int j = 0; j < m; j++) {
                T* gvr = pv->grad.data() + static_cast<size_t>(j) * d;
                for (int i = 0; i < n; i++) {
                    T pvv = pp->val.data()[static_cast<size_t>(i) * m + j];
                    const T* gr = self.grad.data() + static_cast<size_t>(i) * d;
                    for (int k = 0; k < d; k++) gvr[k] += pvv * gr[k];
                }
            }
        }
    });
}

// Row softmax with an optional key mask. Masked keys get zero probability.
// A row whose keys are all masked falls back to the unmasked softmax, so the
// empty prompt still yields a defined attention distribution.
template <typename T>
Var<T> softmax_rows(const Var<T>& x, const std::vector<uint8_t>* keymask) {
    const int n = x->val.dim(0), m = x->val.dim(1);
    if (keymask && static_cast<int>(keymask->size()) != m)
        throw ValidationError("softmax_rows: mask length mismatch");
    bool any_valid = false;
    if (keymask) {
        for (auto f : *keymask) any_valid |= (f != 0);
    }
    const bool use_mask = keymask && any_valid;
    TensorT<T> out({n, m});
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; i++) {
        const T* xr = x->val.data() + static_cast<size_t>(i) * m;
        T* orow = out.data() + static_cast<size_t>(i) * m;
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < m; j++)
            if (!use_mask || (*keymask)[j]) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (int j = 0; j < m; j++) {
            if (use_mask && !(*keymask)[j]) { orow[j] = T(0); continue; }
            T e = std::exp(xr[j] - mx);
            orow[j] = e;
            sum += static_cast<double>(e);
        }
        for (int j = 0; j < m; j++) orow[j] = static_cast<T>(orow[j] / sum);
    }
    return make_op<T>(std::move(out), {x}, [n, m](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
#pragma omp parallel for schedule(static)
        for (int i = 0; i < n; i++) {
            const T* pr = self.val.data() + static_cast<size_t>(i) * m;
            const T* gr = self.grad.data() + static_cast<size_t>(i) * m;
            T* gxr = p->grad.data() + static_cast<size_t>(i) * m;
            double dot = 0.0;
            for (int j = 0; j < m; j++) dot += static_cast<double>(pr[j]) * static_cast<double>(gr[j]);
            for (int j = 0; j < m; j++) gxr[j] += pr[j] * (gr[j] - static_cast<T>(dot));
        }
    });
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, int c0, int c1) {
    const int n = x->val.dim(0), d = x->val.dim(1);
    if (c0 < 0 || c1 > d || c0 >= c1) throw ValidationError("slice_cols: bad range");
    TensorT<T> out({n, c1 - c0});
    for (int i = 0; i < n; i++)
        std::memcpy(out.data() + static_cast<size_t>(i) * (c1 - c0),
                    x->val.data() + static_cast<size_t>(i) * d + c0, sizeof(T) * (c1 - c0));
    return make_op<T>(std::move(out), {x}, [n, d, c0, c1](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < n; i++)
            for (int j = c0; j < c1; j++)
                p->grad.v[static_cast<size_t>(i) * d + j] += self.grad.v[static_cast<size_t>(i) * (c1 - c0) + j - c0];
    });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& xs) {
    const int n = xs[0]->val.dim(0);
    int d = 0;
    for (auto& x : xs) {
        if (x->val.dim(0) != n) throw ValidationError("concat_cols: row mismatch");
        d += x->val.dim(1);
    }
    TensorT<T> out({n, d});
    int off = 0;
    for (auto& x : xs) {
        int dx = x->val.dim(1);
        for (int i = 0; i < n; i++)
            std::memcpy(out.data() + static_cast<size_t>(i) * d + off,
                        x->val.data() + static_cast<size_t>(i) * dx, sizeof(T) * dx);
        off += dx;
    }
    return make_op<T>(std::move(out), xs, [n, d](Node<T>& self) {
        int off = 0;
        for (auto& p : self.parents) {
            int dx = p->val.dim(1);
            if (p->requires_grad) {
                p->ensure_grad();
                for (int i = 0; i < n; i++)
                    for (int j = 0; j < dx; j++)
                        p->grad.v[static_cast<size_t>(i) * dx + j] +=
                            self.grad.v[static_cast<size_t>(i) * d + off + j];
            }
            off += dx;
        }
    });
}

// table (V,D), ids (L) -> (L,D); scatter-add on backward
template <typename T>
Var<T> gather_rows(const Var<T>& table, const std::vector<int>& ids) {
    const int V = table->val.dim(0), D = table->val.dim(1);
    TensorT<T> out({static_cast<int>(ids.size()), D});
    for (size_t i = 0; i < ids.size(); i++) {
        if (ids[i] < 0 || ids[i] >= V) throw ValidationError("gather_rows: id out of range");
        std::memcpy(out.data() + i * D, table->val.data() + static_cast<size_t>(ids[i]) * D, sizeof(T) * D);
    }
    return make_op<T>(std::move(out), {table}, [ids, D](Node<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (size_t i = 0; i < ids.size(); i++)
            for (int j = 0; j < D; j++)
                p->grad.v[static_cast<size_t>(ids[i]) * D + j] += self.grad.v[i * D + j];
    });
}

// ---------------------------------------------------------------- norms

// GroupNorm over (C,H,W). gamma/beta are per channel.
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps = T(1e-5)) {
    const int C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
    if (C % groups != 0) throw ValidationError("group_norm: channels not divisible by groups");
    const int cg = C / groups;
    const int64_t gsz = static_cast<int64_t>(cg) * H * W;
    TensorT<T> out({C, H, W});
    auto mean = std::make_shared<std::vector<double>>(groups);
    auto rstd = std::make_shared<std::vector<double>>(groups);
#pragma omp parallel for schedule(static)
    for (int g = 0; g < groups; g++) {
        const T* base = x->val.data() + static_cast<size_t>(g) * gsz;
        double m = 0.0;
        for (int64_t i = 0; i < gsz; i++) m += static_cast<double>(base[i]);
        m /= static_cast<double>(gsz);
        double var = 0.0;
        for (int64_t i = 0; i < gsz; i++) {
            double d = static_cast<double>(base[i]) - m;
            var += d * d;
        }
        var /= static_cast<double>(gsz);
        double rs = 1.0 / std::sqrt(var + static_cast<double>(eps));
        (*mean)[g] = m;
        (*rstd)[g] = rs;
        T* obase = out.data() + static_cast<size_t>(g) * gsz;
        for (int c = 0; c < cg; c++) {
            int ch = g * cg + c;
            T gm = gamma->val.v[ch], bt = beta->val.v[ch];
            const T* xr = base + static_cast<size_t>(c) * H * W;
            T* orow = obase + static_cast<size_t>(c) * H * W;
            for (int i = 0; i < H * W; i++)
                orow[i] = static_cast<T>((static_cast<double>(xr[i]) - m) * rs) * gm + bt;
        }
    }
    return make_op<T>(std::move(out), {x, gamma, beta},
                      [groups, cg, H, W, mean, rstd](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        const int64_t gsz = static_cast<int64_t>(cg) * H * W;
        const int hw = H * W;
        if (pg->requires_grad || pb->requires_grad) {
            pg->ensure_grad();
            pb->ensure_grad();
            for (int g = 0; g < groups; g++) {
                double m = (*mean)[g], rs = (*rstd)[g];
                for (int c = 0; c < cg; c++) {
                    int ch = g * cg + c;
                    const T* xr = px->val.data() + static_cast<size_t>(ch) * hw;
                    const T* gr = self.grad.data() + static_cast<size_t>(ch) * hw;
                    double sg = 0.0, sb = 0.0;
                    for (int i = 0; i < hw; i++) {
                        double xh = (static_cast<double>(xr[i]) - m) * rs;
                        sg += static_cast<double>(gr[i]) * xh;
                        sb += static_cast<double>(gr[i]);
                    }
                    pg->grad.v[ch] += static_cast<T>(sg);
                    pb->grad.v[ch] += static_cast<T>(sb);
                }
            }
        }
        if (px->requires_grad) {
            px->ensure_grad();
#pragma omp parallel for schedule(static)
            for (int g = 0; g < groups; g++) {
                double m = (*mean)[g], rs = (*rstd)[g];
                // s1 = mean(gy*gamma), s2 = mean(gy*gamma*xhat) over the group
                double s1 = 0.0, s2 = 0.0;
                for (int c = 0; c < cg; c++) {
                    int ch = g * cg + c;
                    double gm = static_cast<double>(pg->val.v[ch]);
                    const T* xr = px->val.data() + static_cast<size_t>(ch) * hw;
                    const T* gr = self.grad.data() + static_cast<size_t>(ch) * hw;
                    for (int i = 0; i < hw; i++) {
                        double gyg = static_cast<double>(gr[i]) * gm;
                        double xh = (static_cast<double>(xr[i]) - m) * rs;
                        s1 += gyg;
                        s2 += gyg * xh;
                    }
                }
                s1 /= static_cast<double>(gsz);
                s2 /= static_cast<double>(gsz);
                for (int c = 0; c < cg; c++) {
                    int ch = g * cg + c;
                    double gm = static_cast<double>(pg->val.v[ch]);
                    const T* xr = px->val.data() + static_cast<size_t>(ch) * hw;
                    const T* gr = self.grad.data() + static_cast<size_t>(ch) * hw;
                    T* gxr = px->grad.data() + static_cast<size_t>(ch) * hw;
                    for (int i = 0; i < hw; i++) {
                        double gyg = static_cast<double>(gr[i]) * gm;
                        double xh = (static_cast<double>(xr[i]) - m) * rs;
                        gxr[i] += static_cast<T>(rs * (gyg - s1 - xh * s2));
                    }
                }
            }
        }
    });
}

// LayerNorm over the last dim of (L,D) token matrices.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    const int L = x->val.dim(0), D = x->val.dim(1);
    TensorT<T> out({L, D});
    auto mean = std::make_shared<std::vector<double>>(L);
    auto rstd = std::make_shared<std::vector<double>>(L);
    for (int l = 0; l < L; l++) {
        const T* xr = x->val.data() + static_cast<size_t>(l) * D;
        double m = 0.0;
        for (int j = 0; j < D; j++) m += static_cast<double>(xr[j]);
        m /= D;
        double var = 0.0;
        for (int j = 0; j < D; j++) {
            double d = static_cast<double>(xr[j]) - m;
            var += d * d;
        }
        var /= D;
        double rs = 1.0 / std::sqrt(var + static_cast<double>(eps));
        (*mean)[l] = m;
        (*rstd)[l] = rs;
        T* orow = out.data() + static_cast<size_t>(l) * D;
        for (int j = 0; j < D; j++)
            orow[j] = static_cast<T>((static_cast<double>(xr[j]) - m) * rs) * gamma->val.v[j] + beta->val.v[j];
    }
    return make_op<T>(std::move(out), {x, gamma, beta}, [L, D, mean, rstd](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        if (pg->requires_grad || pb->requires_grad) {
            pg->ensure_grad();
            pb->ensure_grad();
            for (int l = 0; l < L; l++) {
                double m = (*mean)[l], rs = (*rstd)[l];
                const T* xr = px->val.data() + static_cast<size_t>(l) * D;
                const T* gr = self.grad.data() + static_cast<size_t>(l) * D;
                for (int j = 0; j < D; j++) {
                    double xh = (static_cast<double>(xr[j]) - m) * rs;
                    pg->grad.v[j] += static_cast<T>(static_cast<double>(gr[j]) * xh);
                    pb->grad.v[j] += gr[j];
                }
            }
        }
        if (px->requires_grad) {
            px->ensure_grad();
            for (int l = 0; l < L; l++) {
                double m = (*mean)[l], rs = (*rstd)[l];
                const T* xr = px->val.data() + static_cast<size_t>(l) * D;
                const T* gr = self.grad.data() + static_cast<size_t>(l) * D;
                T* gxr = px->grad.data() + static_cast<size_t>(l) * D;
                double s1 = 0.0, s2 = 0.0;
                for (int j = 0; j < D; j++) {
                    double gyg = static_cast<double>(gr[j]) * static_cast<double>(pg->val.v[j]);
                    double xh = (static_cast<double>(xr[j]) - m) * rs;
                    s1 += gyg;
                    s2 += gyg * xh;
                }
                s1 /= D;
                s2 /= D;
                for (int j = 0; j < D; j++) {
                    double gyg = static_cast<double>(gr[j]) * static_cast<double>(pg->val.v[j]);
                    double xh = (static_cast<double>(xr[j]) - m) * rs;
                    gxr[j] += static_cast<T>(rs * (gyg - s1 - xh * s2));
                }
            }
        }
    });
}

// ---------------------------------------------------------------- loss

// Mean squared error, optionally weighted by a mask: sum(w*(a-b)^2)/sum(w).
// Mask weights are fixed data, not differentiated through.
template <typename T>
Var<T> mse_masked(const Var<T>& pred, const Var<T>& target, const TensorT<T>* mask) {
    if (!pred->val.same_shape(target->val))
        throw ValidationError("mse: shape mismatch " + pred->val.shape_str() + " vs " + target->val.shape_str());
    if (mask && !mask->same_shape(pred->val)) throw ValidationError("mse: mask shape mismatch");
    const int64_t n = pred->val.numel();
    double wsum = 0.0;
    if (mask) {
        for (int64_t i = 0; i < n; i++) wsum += static_cast<double>(mask->v[i]);
        if (wsum <= 0.0) throw ValidationError("mse: mask selects no elements");
    } else {
        wsum = static_cast<double>(n);
    }
    double acc = 0.0;
    for (int64_t i = 0; i < n; i++) {
        double d = static_cast<double>(pred->val.v[i]) - static_cast<double>(target->val.v[i]);
        acc += (mask ? static_cast<double>(mask->v[i]) : 1.0) * d * d;
    }
    TensorT<T> out({1});
    out.v[0] = static_cast<T>(acc / wsum);
    auto maskcopy = mask ? std::make_shared<TensorT<T>>(*mask) : nullptr;
    return make_op<T>(std::move(out), {pred, target}, [maskcopy, wsum, n](Node<T>& self) {
        auto& pp = self.parents[0];
        auto& pt = self.parents[1];
        T g = self.grad.v[0];
        auto apply = [&](Var<T>& p, T sign) {
            p->ensure_grad();
            for (int64_t i = 0; i < n; i++) {
                double w = maskcopy ? static_cast<double>(maskcopy->v[i]) : 1.0;
                double d = static_cast<double>(pp->val.v[i]) - static_cast<double>(pt->val.v[i]);
                p->grad.v[i] += static_cast<T>(sign * g * static_cast<T>(2.0 * w * d / wsum));
            }
        };
        if (pp->requires_grad) apply(pp, T(1));
        if (pt->requires_grad) apply(pt, T(-1));
    });
}

} // namespace gco::ag

#endif
