#ifndef GCO_NET_HPP
#define GCO_NET_HPP

// Trainable building blocks on top of the autograd tape: parameter registry,
// linear/conv/norm layers, attention, residual blocks, Adam.

#include <unordered_map>

#include "gco/autograd.hpp"

namespace gco {

template <typename T>
struct ParamStore {
    std::vector<std::pair<std::string, ag::Var<T>>> items;
    std::unordered_map<std::string, size_t> index;

    ag::Var<T> add(const std::string& name, TensorT<T> init) {
        if (index.count(name)) throw ValidationError("duplicate parameter name: " + name);
        auto v = ag::leaf(std::move(init), true, name);
        index[name] = items.size();
        items.emplace_back(name, v);
        return v;
    }

    ag::Var<T>& get(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw ValidationError("unknown parameter: " + name);
        return items[it->second].second;
    }

    int64_t count() const {
        int64_t n = 0;
        for (auto& [k, v] : items) n += v->val.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [k, v] : items) v->zero_grad();
    }
};

// Initialisation helpers. One Rng threaded through construction keeps the
// whole net reproducible from a single seed.
template <typename T>
TensorT<T> he_init(std::vector<int> shape, int fan_in, Rng& rng, double gain = 1.0) {
    TensorT<T> t(std::move(shape));
    double std = gain * std::sqrt(2.0 / std::max(1, fan_in));
    for (auto& x : t.v) x = static_cast<T>(rng.normal() * std);
    return t;
}

template <typename T>
struct LinearLayer {
    ag::Var<T> w, b;

    LinearLayer() = default;
    LinearLayer(ParamStore<T>& ps, const std::string& name, int din, int dout, Rng& rng,
                double gain = 1.0) {
        w = ps.add(name + ".w", he_init<T>({din, dout}, din, rng, gain));
        b = ps.add(name + ".b", TensorT<T>({dout}));
    }
    ag::Var<T> forward(const ag::Var<T>& x) const { return ag::linear(x, w, b); }
};

template <typename T>
struct ConvLayer {
    ag::Var<T> w, b;
    int stride = 1, pad = 0;

    ConvLayer() = default;
    ConvLayer(ParamStore<T>& ps, const std::string& name, int ic, int oc, int k, int stride_,
              Rng& rng, double gain = 1.0)
        : stride(stride_), pad(k / 2) {
        w = ps.add(name + ".w", he_init<T>({oc, ic, k, k}, ic * k * k, rng, gain));
        b = ps.add(name + ".b", TensorT<T>({oc}));
    }
    ag::Var<T> forward(const ag::Var<T>& x) const { return ag::conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct GroupNormLayer {
    ag::Var<T> gamma, beta;
    int groups = 8;

    GroupNormLayer() = default;
    GroupNormLayer(ParamStore<T>& ps, const std::string& name, int channels, int groups_)
        : groups(groups_) {
        if (channels % groups != 0)
            throw ValidationError("group_norm: " + std::to_string(channels) +
                                  " channels not divisible by " + std::to_string(groups) + " groups");
        gamma = ps.add(name + ".g", TensorT<T>({channels}, T(1)));
        beta  = ps.add(name + ".b", TensorT<T>({channels}));
    }
    ag::Var<T> forward(const ag::Var<T>& x) const { return ag::group_norm(x, gamma, beta, groups); }
};

template <typename T>
struct LayerNormLayer {
    ag::Var<T> gamma, beta;

    LayerNormLayer() = default;
    LayerNormLayer(ParamStore<T>& ps, const std::string& name, int dim) {
        gamma = ps.add(name + ".g", TensorT<T>({dim}, T(1)));
        beta  = ps.add(name + ".b", TensorT<T>({dim}));
    }
    ag::Var<T> forward(const ag::Var<T>& x) const { return ag::layer_norm(x, gamma, beta); }
};

// Multi-head scaled dot-product attention over token matrices.
// q_in (Lq, D); kv_in (Lkv, Dkv); optional key mask of length Lkv.
template <typename T>
struct MultiHeadAttention {
    LinearLayer<T> q, k, v, o;
    int heads = 4;
    int dim = 0;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore<T>& ps, const std::string& name, int dim_, int kv_dim,
                       int heads_, Rng& rng)
        : heads(heads_), dim(dim_) {
        if (dim % heads != 0) throw ValidationError("attention: dim not divisible by heads");
        q = LinearLayer<T>(ps, name + ".q", dim, dim, rng);
        k = LinearLayer<T>(ps, name + ".k", kv_dim, dim, rng);
        v = LinearLayer<T>(ps, name + ".v", kv_dim, dim, rng);
        o = LinearLayer<T>(ps, name + ".o", dim, dim, rng, 0.2);
    }

    ag::Var<T> forward(const ag::Var<T>& q_in, const ag::Var<T>& kv_in,
                       const std::vector<uint8_t>* keymask = nullptr) const {
        auto Q = q.forward(q_in);
        auto K = k.forward(kv_in);
        auto V = v.forward(kv_in);
        const int dh = dim / heads;
        const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        std::vector<ag::Var<T>> outs;
        outs.reserve(heads);
        for (int h = 0; h < heads; h++) {
            auto Qh = ag::slice_cols(Q, h * dh, (h + 1) * dh);
            auto Kh = ag::slice_cols(K, h * dh, (h + 1) * dh);
            auto Vh = ag::slice_cols(V, h * dh, (h + 1) * dh);
            auto scores = ag::scale(ag::matmul_nt(Qh, Kh), sc);
            auto probs = ag::softmax_rows(scores, keymask);
            outs.push_back(ag::matmul_nn(probs, Vh));
        }
        return o.forward(ag::concat_cols(outs));
    }
};

// Self-attention over the flattened latent grid, with residual.
template <typename T>
struct SpatialSelfAttention {
    GroupNormLayer<T> norm;
    MultiHeadAttention<T> attn;

    SpatialSelfAttention() = default;
    SpatialSelfAttention(ParamStore<T>& ps, const std::string& name, int channels, int heads,
                         int groups, Rng& rng) {
        norm = GroupNormLayer<T>(ps, name + ".norm", channels, groups);
        attn = MultiHeadAttention<T>(ps, name + ".attn", channels, channels, heads, rng);
    }

    ag::Var<T> forward(const ag::Var<T>& x) const {
        const int H = x->val.dim(1), W = x->val.dim(2);
        auto tok = ag::spatial_to_tokens(norm.forward(x));
        auto out = attn.forward(tok, tok, nullptr);
        return ag::add(x, ag::tokens_to_spatial(out, H, W));
    }
};

// Cross-attention from latent tokens onto a text context, with residual.
template <typename T>
struct SpatialCrossAttention {
    GroupNormLayer<T> norm;
    MultiHeadAttention<T> attn;

    SpatialCrossAttention() = default;
    SpatialCrossAttention(ParamStore<T>& ps, const std::string& name, int channels, int context_dim,
                          int heads, int groups, Rng& rng) {
        norm = GroupNormLayer<T>(ps, name + ".norm", channels, groups);
        attn = MultiHeadAttention<T>(ps, name + ".attn", channels, context_dim, heads, rng);
    }

    ag::Var<T> forward(const ag::Var<T>& x, const ag::Var<T>& ctx,
                       const std::vector<uint8_t>* keymask) const {
        const int H = x->val.dim(1), W = x->val.dim(2);
        auto tok = ag::spatial_to_tokens(norm.forward(x));
        auto out = attn.forward(tok, ctx, keymask);
        return ag::add(x, ag::tokens_to_spatial(out, H, W));
    }
};

// GN -> SiLU -> conv -> +temb -> GN -> SiLU -> conv, with identity/1x1 skip.
template <typename T>
struct ResBlock {
    GroupNormLayer<T> gn1, gn2;
    ConvLayer<T> conv1, conv2, skip;
    LinearLayer<T> temb_proj;
    bool has_skip = false;

    ResBlock() = default;
    ResBlock(ParamStore<T>& ps, const std::string& name, int ic, int oc, int time_dim, int groups,
             Rng& rng) {
        gn1 = GroupNormLayer<T>(ps, name + ".gn1", ic, groups);
        conv1 = ConvLayer<T>(ps, name + ".conv1", ic, oc, 3, 1, rng);
        temb_proj = LinearLayer<T>(ps, name + ".temb", time_dim, oc, rng);
        gn2 = GroupNormLayer<T>(ps, name + ".gn2", oc, groups);
        conv2 = ConvLayer<T>(ps, name + ".conv2", oc, oc, 3, 1, rng, 0.2);
        if (ic != oc) {
            skip = ConvLayer<T>(ps, name + ".skip", ic, oc, 1, 1, rng);
            has_skip = true;
        }
    }

    ag::Var<T> forward(const ag::Var<T>& x, const ag::Var<T>& temb_row) const {
        auto h = conv1.forward(ag::silu(gn1.forward(x)));
        auto tb = temb_proj.forward(ag::silu(temb_row));  // (1, oc)
        auto tvec = std::make_shared<ag::Node<T>>();
        // reshape (1, oc) -> (oc) without copy semantics surprises
        tvec = reshape_row(tb);
        h = ag::add_channel_bias(h, tvec);
        h = conv2.forward(ag::silu(gn2.forward(h)));
        auto s = has_skip ? skip.forward(x) : x;
        return ag::add(h, s);
    }

    static ag::Var<T> reshape_row(const ag::Var<T>& x) {
        TensorT<T> out;
        out.shape = {x->val.dim(1)};
        out.v = x->val.v;
        return ag::make_op<T>(std::move(out), {x}, [](ag::Node<T>& self) {
            auto& p = self.parents[0];
            if (!p->requires_grad) return;
            p->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); i++) p->grad.v[i] += self.grad.v[i];
        });
    }
};

// Standard sinusoidal timestep embedding, sin block then cos block.
// Frequencies w_i = 10000^(-i/(half-1)), w_0 = 1.
template <typename T>
TensorT<T> timestep_embedding(double t, int dim) {
    if (dim <= 0 || dim % 2 != 0) throw ValidationError("timestep_embedding: dim must be even");
    const int half = dim / 2;
    TensorT<T> out({dim});
    for (int i = 0; i < half; i++) {
        double w = half == 1 ? 1.0 : std::pow(10000.0, -static_cast<double>(i) / (half - 1));
        out.v[i] = static_cast<T>(std::sin(w * t));
        out.v[half + i] = static_cast<T>(std::cos(w * t));
    }
    return out;
}

template <typename T>
struct Adam {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t t = 0;
    std::vector<std::vector<T>> m, v;

    explicit Adam(double lr_ = 1e-3) : lr(lr_) {}

    void step(ParamStore<T>& ps) {
        if (m.empty()) {
            m.resize(ps.items.size());
            v.resize(ps.items.size());
            for (size_t i = 0; i < ps.items.size(); i++) {
                m[i].assign(ps.items[i].second->val.v.size(), T(0));
                v[i].assign(ps.items[i].second->val.v.size(), T(0));
            }
        }
        t++;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t i = 0; i < ps.items.size(); i++) {
            auto& p = ps.items[i].second;
            p->ensure_grad();
            auto& pm = m[i];
            auto& pv = v[i];
            for (size_t j = 0; j < p->val.v.size(); j++) {
                double g = static_cast<double>(p->grad.v[j]);
                pm[j] = static_cast<T>(beta1 * pm[j] + (1.0 - beta1) * g);
                pv[j] = static_cast<T>(beta2 * pv[j] + (1.0 - beta2) * g * g);
                double mhat = pm[j] / bc1;
                double vhat = pv[j] / bc2;
                p->val.v[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }
};

} // namespace gco

#endif
