#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "udr/nn_ops.hpp"
#include "udr/param_store.hpp"
#include "udr/priors.hpp"
#include "udr/rng.hpp"
#include "udr/tasks.hpp"
#include "udr/tensor.hpp"

// Conditional denoiser for the pixel branch: a four-stage U-Net over the
// 6-channel (noisy ‖ degraded) input, with a self-attention mid block and
// a prior-fusion module ahead of every decoder upsample. The fusion module
// projects the classical prior stack to each stage's resolution and gates
// it per channel by task identity and by pooled image content.

namespace udr {

struct DenoiserConfig {
    std::array<long, 4> stage_channels{16, 32, 64, 96};
    long task_slots = kTaskSlots;
    long prior_channels = kPriorChannels;
    long time_dim = 64;
    // Ablation switches. learned_prior swaps the computed prior stack for
    // a trainable constant; per_task_blocks swaps the fusion module for a
    // task-indexed residual conv per decoder stage.
    bool learned_prior = false;
    bool per_task_blocks = false;
    long learned_prior_extent = 32;
};

template <class T>
struct EncoderFeatures {
    // f[l-1] lives at H/2^l with stage_channels[l-1] channels; f[3] is the
    // bottleneck consumed by the mid block.
    std::array<Tensor<T>, 4> f;
};

template <class T>
class Denoiser {
public:
    Denoiser(ParamStore<T>& ps, DenoiserConfig cfg = {}) : ps_(&ps), cfg_(cfg) {}

    const DenoiserConfig& config() const { return cfg_; }

    // Registers every parameter under the encoder./mid./decoder./pfm.
    // groups. Biases start at zero, weights at uniform fan-in bounds.
    static void init_params(ParamStore<T>& ps, const DenoiserConfig& cfg, Rng& rng) {
        const auto& sc = cfg.stage_channels;
        long cin = 6;
        for (int l = 1; l <= 4; ++l) {
            const long c = sc[static_cast<std::size_t>(l - 1)];
            const std::string s = "encoder.s" + std::to_string(l);
            init_resblock(ps, s + ".rb1", cin, c, cfg.time_dim, rng);
            init_resblock(ps, s + ".rb2", c, c, cfg.time_dim, rng);
            ps.conv_weight(s + ".down.w", c, c, 3, 3, rng);
            ps.bias(s + ".down.b", c);
            cin = c;
        }
        const long cb = sc[3];
        init_resblock(ps, "mid.rb1", cb, cb, cfg.time_dim, rng);
        ps.linear_weight("mid.attn.wq", cb, cb, rng);
        ps.bias("mid.attn.bq", cb);
        ps.linear_weight("mid.attn.wk", cb, cb, rng);
        ps.bias("mid.attn.bk", cb);
        ps.linear_weight("mid.attn.wv", cb, cb, rng);
        ps.bias("mid.attn.bv", cb);
        ps.linear_weight("mid.attn.wo", cb, cb, rng);
        ps.bias("mid.attn.bo", cb);
        init_resblock(ps, "mid.rb2", cb, cb, cfg.time_dim, rng);

        for (int l = 4; l >= 1; --l) {
            const long c = sc[static_cast<std::size_t>(l - 1)];
            const long cnext = l >= 2 ? sc[static_cast<std::size_t>(l - 2)] : sc[0];
            const std::string s = "decoder.s" + std::to_string(l);
            init_resblock(ps, s + ".rb", 2 * c, c, cfg.time_dim, rng);
            ps.conv_weight(s + ".up.w", cnext, c, 3, 3, rng);
            ps.bias(s + ".up.b", cnext);
            init_pfm_stage(ps, cfg, l, rng);
        }
        ps.conv_weight("decoder.head.w", 3, sc[0], 3, 3, rng);
        ps.bias("decoder.head.b", 3);

        if (cfg.learned_prior) {
            Rng sub = rng.fork(0x706f6f6cull);
            const long e = cfg.learned_prior_extent;
            ps.add("pfm.const_pool",
                   Tensor<T>::rand_uniform({cfg.prior_channels, e, e}, sub, T(0), T(1)));
        }
    }

    // Constant per-batch copy of the sinusoidal step code; never carries
    // gradient, so it is built outside the graph.
    static Tensor<T> time_vector(long t, long dim, long batch) {
        NoGradGuard ng;
        const Tensor<T> e = time_embedding<T>(t, dim);
        Tensor<T> out = Tensor<T>::zeros({batch, dim});
        for (long b = 0; b < batch; ++b)
            for (long i = 0; i < dim; ++i) out.data()[b * dim + i] = e.data()[i];
        return out;
    }

    EncoderFeatures<T> encoder_forward(Tensor<T> x6, Tensor<T> temb) const {
        if (x6.rank() != 4 || x6.dim(1) != 6)
            throw std::invalid_argument("encoder: expected [B,6,H,W] input, got " +
                                        shape_str(x6.shape()));
        if (x6.dim(2) % 16 != 0 || x6.dim(3) % 16 != 0)
            throw std::invalid_argument(
                "encoder: extents must be divisible by 16 (pad " + std::to_string(x6.dim(2)) + "x" +
                std::to_string(x6.dim(3)) + " up to " + std::to_string((x6.dim(2) + 15) / 16 * 16) +
                "x" + std::to_string((x6.dim(3) + 15) / 16 * 16) + ")");
        EncoderFeatures<T> feats;
        Tensor<T> u = x6;
        for (int l = 1; l <= 4; ++l) {
            const std::string s = "encoder.s" + std::to_string(l);
            u = resblock(u, temb, s + ".rb1");
            u = resblock(u, temb, s + ".rb2");
            u = conv2d(u, ps_->get(s + ".down.w"), ps_->get(s + ".down.b"), 2, 1);
            feats.f[static_cast<std::size_t>(l - 1)] = u;
        }
        return feats;
    }

    Tensor<T> mid_forward(Tensor<T> bottleneck, Tensor<T> temb) const {
        Tensor<T> u = resblock(bottleneck, temb, "mid.rb1");
        u = self_attention(u, ps_->get("mid.attn.wq"), ps_->get("mid.attn.bq"),
                           ps_->get("mid.attn.wk"), ps_->get("mid.attn.bk"),
                           ps_->get("mid.attn.wv"), ps_->get("mid.attn.bv"),
                           ps_->get("mid.attn.wo"), ps_->get("mid.attn.bo"));
        return resblock(u, temb, "mid.rb2");
    }

    // Fuses the prior stack into a decoder feature map. The stack is
    // refined by two stride-2 convs and a per-stage projection, resized to
    // the stage resolution, gated per channel by the task and content
    // weights, and folded back through a residual block.
    Tensor<T> pfm_forward(Tensor<T> f_l, Tensor<T> task, Tensor<T> pool, long stage,
                          Tensor<T> temb) const {
        if (stage < 1 || stage > 4)
            throw std::invalid_argument("pfm: stage must be in 1..4, got " + std::to_string(stage));
        const std::string p = "pfm.s" + std::to_string(stage);
        if (task.rank() != 2 || task.dim(1) != cfg_.task_slots)
            throw std::invalid_argument("pfm: expected task vector [B," +
                                        std::to_string(cfg_.task_slots) + "], got " +
                                        shape_str(task.shape()));
        if (cfg_.per_task_blocks) {
            const long slot = single_task_slot(task);
            const std::string q = p + ".task" + std::to_string(slot);
            return add(f_l, conv2d(f_l, ps_->get(q + ".w"), ps_->get(q + ".b"), 1, 1));
        }
        if (pool.rank() != 4 || pool.dim(1) != cfg_.prior_channels)
            throw std::invalid_argument("pfm: expected prior stack [B," +
                                        std::to_string(cfg_.prior_channels) + ",H,W], got " +
                                        shape_str(pool.shape()));
        Tensor<T> r = silu(conv2d(pool, ps_->get(p + ".ref1.w"), ps_->get(p + ".ref1.b"), 2, 1));
        r = silu(conv2d(r, ps_->get(p + ".ref2.w"), ps_->get(p + ".ref2.b"), 2, 1));
        r = conv2d(r, ps_->get(p + ".proj.w"), ps_->get(p + ".proj.b"));
        r = bilinear_resize(r, f_l.dim(2), f_l.dim(3));

        Tensor<T> wt = linear(task, ps_->get(p + ".task.w1"), ps_->get(p + ".task.b1"));
        wt = linear(silu(wt), ps_->get(p + ".task.w2"), ps_->get(p + ".task.b2"));
        Tensor<T> wc = linear(global_avg_pool(f_l), ps_->get(p + ".content.w1"),
                              ps_->get(p + ".content.b1"));
        wc = linear(silu(wc), ps_->get(p + ".content.w2"), ps_->get(p + ".content.b2"));

        Tensor<T> fused = add(scale_channels(r, wt), scale_channels(r, wc));
        return resblock(concat<T>({f_l, fused}, 1), temb, p + ".recon");
    }

    Tensor<T> decoder_forward(const EncoderFeatures<T>& feats, Tensor<T> mid, Tensor<T> task,
                              Tensor<T> pool, Tensor<T> temb) const {
        Tensor<T> u = mid;
        for (int l = 4; l >= 1; --l) {
            const std::string s = "decoder.s" + std::to_string(l);
            u = concat<T>({u, feats.f[static_cast<std::size_t>(l - 1)]}, 1);
            u = resblock(u, temb, s + ".rb");
            u = pfm_forward(u, task, pool, l, temb);
            u = conv2d(upsample_nearest2x(u), ps_->get(s + ".up.w"), ps_->get(s + ".up.b"), 1, 1);
        }
        return conv2d(u, ps_->get("decoder.head.w"), ps_->get("decoder.head.b"), 1, 1);
    }

    // Full x0 regression: concatenate the noisy state with the degraded
    // conditioning image and run encoder, mid, and fusion decoder.
    Tensor<T> forward(Tensor<T> x_t, Tensor<T> x_d, Tensor<T> task, Tensor<T> pool, long t) const {
        if (x_t.shape() != x_d.shape())
            throw std::invalid_argument("denoiser: x_t " + shape_str(x_t.shape()) +
                                        " and x_d " + shape_str(x_d.shape()) + " must match");
        if (x_t.rank() != 4 || x_t.dim(1) != 3)
            throw std::invalid_argument("denoiser: expected [B,3,H,W] images, got " +
                                        shape_str(x_t.shape()));
        Tensor<T> p = cfg_.learned_prior ? constant_pool(x_t.dim(0), x_t.dim(2), x_t.dim(3)) : pool;
        if (!cfg_.per_task_blocks) {
            if (p.rank() != 4 || p.dim(0) != x_t.dim(0) || p.dim(2) != x_t.dim(2) ||
                p.dim(3) != x_t.dim(3))
                throw std::invalid_argument("denoiser: prior stack " + shape_str(p.shape()) +
                                            " does not match images " + shape_str(x_t.shape()));
        }
        Tensor<T> temb = time_vector(t, cfg_.time_dim, x_t.dim(0));
        Tensor<T> x6 = concat<T>({x_t, x_d}, 1);
        EncoderFeatures<T> feats = encoder_forward(x6, temb);
        Tensor<T> m = mid_forward(feats.f[3], temb);
        return decoder_forward(feats, m, task, p, temb);
    }

private:
    static void init_resblock(ParamStore<T>& ps, const std::string& prefix, long cin, long cout,
                              long time_dim, Rng& rng) {
        ps.conv_weight(prefix + ".conv1.w", cout, cin, 3, 3, rng);
        ps.bias(prefix + ".conv1.b", cout);
        ps.linear_weight(prefix + ".temb.w", cout, time_dim, rng);
        ps.bias(prefix + ".temb.b", cout);
        ps.conv_weight(prefix + ".conv2.w", cout, cout, 3, 3, rng);
        ps.bias(prefix + ".conv2.b", cout);
        if (cin != cout) ps.conv_weight(prefix + ".skip.w", cout, cin, 1, 1, rng);
    }

    static void init_pfm_stage(ParamStore<T>& ps, const DenoiserConfig& cfg, int l, Rng& rng) {
        const long c = cfg.stage_channels[static_cast<std::size_t>(l - 1)];
        const std::string p = "pfm.s" + std::to_string(l);
        if (cfg.per_task_blocks) {
            for (long k = 0; k < cfg.task_slots; ++k) {
                ps.conv_weight(p + ".task" + std::to_string(k) + ".w", c, c, 3, 3, rng);
                ps.bias(p + ".task" + std::to_string(k) + ".b", c);
            }
            return;
        }
        ps.conv_weight(p + ".ref1.w", 16, cfg.prior_channels, 3, 3, rng);
        ps.bias(p + ".ref1.b", 16);
        ps.conv_weight(p + ".ref2.w", 16, 16, 3, 3, rng);
        ps.bias(p + ".ref2.b", 16);
        ps.conv_weight(p + ".proj.w", c, 16, 1, 1, rng);
        ps.bias(p + ".proj.b", c);
        ps.linear_weight(p + ".task.w1", 32, cfg.task_slots, rng);
        ps.bias(p + ".task.b1", 32);
        ps.linear_weight(p + ".task.w2", c, 32, rng);
        ps.bias(p + ".task.b2", c);
        ps.linear_weight(p + ".content.w1", 32, c, rng);
        ps.bias(p + ".content.b1", 32);
        ps.linear_weight(p + ".content.w2", c, 32, rng);
        ps.bias(p + ".content.b2", c);
        init_resblock(ps, p + ".recon", 2 * c, c, cfg.time_dim, rng);
    }

    // Two 3x3 convs with a time shift after the first, plus an identity or
    // 1x1 projection skip.
    Tensor<T> resblock(Tensor<T> x, Tensor<T> temb, const std::string& prefix) const {
        Tensor<T> h = conv2d(x, ps_->get(prefix + ".conv1.w"), ps_->get(prefix + ".conv1.b"), 1, 1);
        Tensor<T> shift = linear(temb, ps_->get(prefix + ".temb.w"), ps_->get(prefix + ".temb.b"));
        h = silu(add_channel_bias(h, shift));
        h = conv2d(h, ps_->get(prefix + ".conv2.w"), ps_->get(prefix + ".conv2.b"), 1, 1);
        Tensor<T> s = ps_->has(prefix + ".skip.w") ? conv2d(x, ps_->get(prefix + ".skip.w")) : x;
        return add(h, s);
    }

    // Per-task conv ablation runs whole batches through one task's block,
    // so mixed-task batches are rejected rather than silently mishandled.
    long single_task_slot(const Tensor<T>& task) const {
        long slot = -1;
        for (long b = 0; b < task.dim(0); ++b) {
            long best = 0;
            for (long k = 1; k < task.dim(1); ++k)
                if (task.data()[b * task.dim(1) + k] > task.data()[b * task.dim(1) + best]) best = k;
            if (slot < 0) slot = best;
            if (best != slot)
                throw std::invalid_argument(
                    "pfm: per-task conv ablation needs a single-task batch");
        }
        return slot;
    }

    Tensor<T> constant_pool(long batch, long h, long w) const {
        Tensor<T> base = ps_->get("pfm.const_pool");
        Tensor<T> one = bilinear_resize(
            reshape(base, {1, cfg_.prior_channels, cfg_.learned_prior_extent,
                           cfg_.learned_prior_extent}),
            h, w);
        if (batch == 1) return one;
        std::vector<Tensor<T>> copies(static_cast<std::size_t>(batch), one);
        return concat<T>(copies, 0);
    }

    ParamStore<T>* ps_;
    DenoiserConfig cfg_;
};

} // namespace udr
