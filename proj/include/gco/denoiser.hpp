#ifndef GCO_DENOISER_HPP
#define GCO_DENOISER_HPP

// The UNet denoiser shared by both stages: timestep embedding, residual
// blocks, self-attention on the flattened latent grid, optional
// cross-attention on a text context, and the first-conv widening operation
// that grafts extra condition channels onto an existing checkpoint.

#include <json.hpp>

#include "gco/net.hpp"

namespace gco {

struct DenoiserConfig {
    int in_channels = 0;
    int out_channels = 0;
    int base_width = 32;
    int depth = 2;
    std::vector<int> attention_levels = {1};  // levels with self-attention
    int context_dim = 0;                      // 0 = no text conditioning
    int kernel_size = 3;                      // first conv
    int num_heads = 4;
    int groups = 8;
    std::vector<int> channel_mult;            // empty = 1,2,4,...

    std::vector<int> mults() const {
        if (!channel_mult.empty()) {
            if (static_cast<int>(channel_mult.size()) != depth)
                throw ValidationError("denoiser: channel_mult length must equal depth");
            return channel_mult;
        }
        std::vector<int> m(depth);
        for (int i = 0; i < depth; i++) m[i] = 1 << i;
        return m;
    }

    bool has_attention(int level) const {
        for (int l : attention_levels)
            if (l == level) return true;
        return false;
    }

    void validate() const {
        if (in_channels < 1 || out_channels < 1) throw ValidationError("denoiser: channels must be >= 1");
        if (base_width < 1 || depth < 1) throw ValidationError("denoiser: base_width and depth must be >= 1");
        if (kernel_size < 1 || kernel_size % 2 == 0) throw ValidationError("denoiser: kernel_size must be odd");
        if (context_dim < 0) throw ValidationError("denoiser: context_dim must be >= 0");
        auto m = mults();
        for (int i = 0; i < depth; i++)
            if ((base_width * m[i]) % groups != 0)
                throw ValidationError("denoiser: width at level " + std::to_string(i) +
                                      " not divisible by groups");
        for (int l : attention_levels)
            if (l < 0 || l >= depth)
                throw ValidationError("denoiser: attention level " + std::to_string(l) + " out of range");
    }

    nlohmann::json to_json() const {
        return {{"in_channels", in_channels}, {"out_channels", out_channels},
                {"base_width", base_width},   {"depth", depth},
                {"attention_levels", attention_levels}, {"context_dim", context_dim},
                {"kernel_size", kernel_size}, {"num_heads", num_heads},
                {"groups", groups},           {"channel_mult", channel_mult}};
    }

    static DenoiserConfig from_json(const nlohmann::json& j) {
        DenoiserConfig c;
        c.in_channels = j.at("in_channels").get<int>();
        c.out_channels = j.at("out_channels").get<int>();
        c.base_width = j.at("base_width").get<int>();
        c.depth = j.at("depth").get<int>();
        c.attention_levels = j.at("attention_levels").get<std::vector<int>>();
        c.context_dim = j.at("context_dim").get<int>();
        c.kernel_size = j.at("kernel_size").get<int>();
        c.num_heads = j.at("num_heads").get<int>();
        c.groups = j.at("groups").get<int>();
        c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
        return c;
    }
};

// Named parameter tensors plus config and training metadata. This is the
// in-memory form; checkpoint.hpp handles the on-disk archive.
struct DenoiserCheckpoint {
    DenoiserConfig config;
    std::vector<std::pair<std::string, Tensor>> params;
    nlohmann::json meta;  // step, seed, dataset_hash, layout, ...

    const Tensor* find(const std::string& name) const {
        for (auto& [k, t] : params)
            if (k == name) return &t;
        return nullptr;
    }
};

inline int64_t count_params(const DenoiserCheckpoint& ckpt) {
    int64_t n = 0;
    for (auto& [k, t] : ckpt.params) n += t.numel();
    return n;
}

template <typename T>
struct UNet {
    DenoiserConfig cfg;
    ParamStore<T> params;
    int time_dim = 0;

    ConvLayer<T> conv_in;
    LinearLayer<T> time1, time2;
    std::vector<ResBlock<T>> down_res;
    std::vector<SpatialSelfAttention<T>> down_attn;   // indexed by level, may be empty structs
    std::vector<SpatialCrossAttention<T>> down_cross;
    std::vector<char> level_has_attn;
    std::vector<ConvLayer<T>> down_conv;
    ResBlock<T> mid_res1, mid_res2;
    SpatialSelfAttention<T> mid_attn;
    SpatialCrossAttention<T> mid_cross;
    bool has_mid_attn = false;
    std::vector<ResBlock<T>> up_res;
    std::vector<SpatialSelfAttention<T>> up_attn;
    std::vector<SpatialCrossAttention<T>> up_cross;
    std::vector<ConvLayer<T>> up_conv;
    GroupNormLayer<T> out_norm;
    ConvLayer<T> out_conv;

    UNet(const DenoiserConfig& c, uint64_t seed) : cfg(c) {
        cfg.validate();
        Rng rng(derive_seed(seed, 0xdec0de));
        const auto mult = cfg.mults();
        time_dim = cfg.base_width * 4;
        const bool ctx = cfg.context_dim > 0;

        conv_in = ConvLayer<T>(params, "conv_in", cfg.in_channels, cfg.base_width * mult[0],
                               cfg.kernel_size, 1, rng);
        time1 = LinearLayer<T>(params, "time1", cfg.base_width, time_dim, rng);
        time2 = LinearLayer<T>(params, "time2", time_dim, time_dim, rng);

        down_res.resize(cfg.depth);
        down_attn.resize(cfg.depth);
        down_cross.resize(cfg.depth);
        level_has_attn.resize(cfg.depth, 0);
        up_res.resize(cfg.depth);
        up_attn.resize(cfg.depth);
        up_cross.resize(cfg.depth);

        int ch = cfg.base_width * mult[0];
        for (int l = 0; l < cfg.depth; l++) {
            int oc = cfg.base_width * mult[l];
            std::string p = "down" + std::to_string(l);
            down_res[l] = ResBlock<T>(params, p + ".res", ch, oc, time_dim, cfg.groups, rng);
            if (cfg.has_attention(l)) {
                level_has_attn[l] = 1;
                down_attn[l] = SpatialSelfAttention<T>(params, p + ".sattn", oc, cfg.num_heads, cfg.groups, rng);
                if (ctx)
                    down_cross[l] = SpatialCrossAttention<T>(params, p + ".cattn", oc, cfg.context_dim,
                                                             cfg.num_heads, cfg.groups, rng);
            }
            ch = oc;
            if (l + 1 < cfg.depth) {
                down_conv.push_back(ConvLayer<T>(params, p + ".down", ch, ch, 3, 2, rng));
            }
        }

        has_mid_attn = !cfg.attention_levels.empty();
        mid_res1 = ResBlock<T>(params, "mid.res1", ch, ch, time_dim, cfg.groups, rng);
        if (has_mid_attn) {
            mid_attn = SpatialSelfAttention<T>(params, "mid.sattn", ch, cfg.num_heads, cfg.groups, rng);
            if (ctx)
                mid_cross = SpatialCrossAttention<T>(params, "mid.cattn", ch, cfg.context_dim,
                                                     cfg.num_heads, cfg.groups, rng);
        }
        mid_res2 = ResBlock<T>(params, "mid.res2", ch, ch, time_dim, cfg.groups, rng);

        for (int l = cfg.depth - 1; l >= 0; l--) {
            int oc = cfg.base_width * mult[l];
            std::string p = "up" + std::to_string(l);
            // input = current channels + skip channels from level l
            up_res[l] = ResBlock<T>(params, p + ".res", ch + oc, oc, time_dim, cfg.groups, rng);
            if (cfg.has_attention(l)) {
                up_attn[l] = SpatialSelfAttention<T>(params, p + ".sattn", oc, cfg.num_heads, cfg.groups, rng);
                if (ctx)
                    up_cross[l] = SpatialCrossAttention<T>(params, p + ".cattn", oc, cfg.context_dim,
                                                           cfg.num_heads, cfg.groups, rng);
            }
            ch = oc;
            if (l > 0) {
                up_conv.push_back(ConvLayer<T>(params, p + ".up", ch, cfg.base_width * mult[l - 1], 3, 1, rng));
                ch = cfg.base_width * mult[l - 1];
            }
        }
        out_norm = GroupNormLayer<T>(params, "out.norm", ch, cfg.groups);
        out_conv = ConvLayer<T>(params, "out.conv", ch, cfg.out_channels, 3, 1, rng, 0.1);
    }

    // context: token embedding matrix (L, context_dim) or null; keymask flags
    // the valid (non-padding) context positions.
    ag::Var<T> forward(const ag::Var<T>& x, int t, const ag::Var<T>& context = nullptr,
                       const std::vector<uint8_t>* keymask = nullptr) const {
        if (x->val.dim(0) != cfg.in_channels)
            throw ValidationError("denoiser: input has " + std::to_string(x->val.dim(0)) +
                                  " channels, config expects " + std::to_string(cfg.in_channels));
        const bool ctx = cfg.context_dim > 0;
        if (ctx && !context) throw ValidationError("denoiser: missing text context");
        if (!ctx && context) throw ValidationError("denoiser: unexpected text context");

        TensorT<T> te = timestep_embedding<T>(static_cast<double>(t), cfg.base_width);
        te.shape = {1, cfg.base_width};
        auto temb = time2.forward(ag::silu(time1.forward(ag::leaf(std::move(te)))));

        auto h = conv_in.forward(x);
        std::vector<ag::Var<T>> skips(cfg.depth);
        for (int l = 0; l < cfg.depth; l++) {
            h = down_res[l].forward(h, temb);
            if (level_has_attn[l]) {
                h = down_attn[l].forward(h);
                if (ctx) h = down_cross[l].forward(h, context, keymask);
            }
            skips[l] = h;
            if (l + 1 < cfg.depth) h = down_conv[l].forward(h);
        }

        h = mid_res1.forward(h, temb);
        if (has_mid_attn) {
            h = mid_attn.forward(h);
            if (ctx) h = mid_cross.forward(h, context, keymask);
        }
        h = mid_res2.forward(h, temb);

        int upc = 0;
        for (int l = cfg.depth - 1; l >= 0; l--) {
            h = ag::concat_channels<T>({h, skips[l]});
            h = up_res[l].forward(h, temb);
            if (level_has_attn[l]) {
                h = up_attn[l].forward(h);
                if (ctx) h = up_cross[l].forward(h, context, keymask);
            }
            if (l > 0) h = up_conv[upc++].forward(ag::upsample_nearest2x(h));
        }
        return out_conv.forward(ag::silu(out_norm.forward(h)));
    }

    DenoiserCheckpoint to_checkpoint() const {
        DenoiserCheckpoint ck;
        ck.config = cfg;
        for (auto& [name, var] : params.items) {
            if constexpr (std::is_same_v<T, float>) {
                ck.params.emplace_back(name, var->val);
            } else {
                ck.params.emplace_back(name, var->val.template cast<float>());
            }
        }
        return ck;
    }

    void load(const DenoiserCheckpoint& ck) {
        for (auto& [name, t] : ck.params) {
            auto& var = params.get(name);
            if (var->val.shape != t.shape)
                throw ValidationError("checkpoint tensor " + name + " has shape " + t.shape_str() +
                                      ", expected " + var->val.shape_str());
            if constexpr (std::is_same_v<T, float>) {
                var->val = t;
            } else {
                var->val = t.template cast<T>();
            }
        }
    }
};

inline DenoiserCheckpoint init_denoiser(const DenoiserConfig& cfg, uint64_t seed) {
    UNet<float> net(cfg, seed);
    auto ck = net.to_checkpoint();
    ck.meta = {{"step", 0}, {"seed", seed}};
    return ck;
}

// Runs one denoiser forward pass without touching gradients.
inline Tensor apply_denoiser(UNet<float>& net, const Tensor& z, int t,
                             const Tensor* context = nullptr,
                             const std::vector<uint8_t>* keymask = nullptr) {
    ag::Var<float> ctx = nullptr;
    if (context) ctx = ag::leaf(*context);
    auto out = net.forward(ag::leaf(z), t, ctx, keymask);
    return out->val;
}

// Grows the first conv to accept `extra` additional input channels. Existing
// weights are preserved bit-exact, new channels start at zero so extended
// inputs are a no-op until trained.
inline DenoiserCheckpoint widen_input_channels(const DenoiserCheckpoint& ckpt, int extra) {
    if (extra < 1) throw ValidationError("widen_input_channels: extra must be >= 1");
    DenoiserCheckpoint out = ckpt;
    out.config.in_channels += extra;
    for (auto& [name, t] : out.params) {
        if (name != "conv_in.w") continue;
        const int oc = t.dim(0), ic = t.dim(1), kh = t.dim(2), kw = t.dim(3);
        Tensor w({oc, ic + extra, kh, kw});
        for (int o = 0; o < oc; o++)
            for (int i = 0; i < ic; i++)
                std::memcpy(&w.v[((static_cast<size_t>(o) * (ic + extra) + i) * kh) * kw],
                            &t.v[((static_cast<size_t>(o) * ic + i) * kh) * kw],
                            sizeof(float) * kh * kw);
        t = std::move(w);
        return out;
    }
    throw ValidationError("widen_input_channels: checkpoint has no conv_in.w");
}

} // namespace gco

#endif
