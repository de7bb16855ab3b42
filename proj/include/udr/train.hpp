#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "udr/cpb.hpp"
#include "udr/data_synth.hpp"
#include "udr/diffusion.hpp"
#include "udr/losses.hpp"
#include "udr/metrics.hpp"
#include "udr/network.hpp"
#include "udr/param_store.hpp"
#include "udr/priors.hpp"
#include "udr/rng.hpp"
#include "udr/tasks.hpp"
#include "udr/tensor.hpp"

// Training protocols: stage 1 (denoiser on pixel tasks), stage 2 (coordinate
// branch on synthetic warps, everything else frozen), and task extension
// (new degradation into a spare one-hot slot, only the fusion group trains).
// All randomness forks from RunConfig.seed, so a config fixes the entire
// trajectory bit for bit.

namespace udr {

inline constexpr std::uint64_t kSaltStage1 = 0x73746731;  // data stream, stage 1
inline constexpr std::uint64_t kSaltStage2 = 0x73746732;  // data stream, stage 2
inline constexpr std::uint64_t kSaltExtend = 0x65787464;  // data stream, extension
inline constexpr std::uint64_t kSaltSample = 0x736d706c;  // per-sample page seeds
inline constexpr std::uint64_t kSaltVal = 0x76616c30;     // validation pages
inline constexpr std::uint64_t kSaltCpbInit = 0x63706269; // coordinate-branch init
inline constexpr std::uint64_t kSaltNetInit = 0x696e6974; // denoiser init

struct RunConfig {
    std::uint64_t seed = 0;
    long image_size = 32;
    long batch = 6; // 8 overshoots the desk-scale wall-clock budget on one core
    long iters_stage1 = 2000;
    long iters_stage2 = 400;
    long iters_extend = 300;
    long log_every = 50;
    long val_every = 500; // 0 disables validation logging
    long val_count = 2;
    double lr = 1e-4;
    double weight_decay = 5e-4;
    double loss_beta1 = 1.0;
    double loss_beta2 = 0.1;
    long t_max = 100;
    double noise_beta_start = 1e-4;
    double noise_beta_end = 0.02;
    long sample_steps = 10;
    long control_grid = kControlGrid;
    std::array<long, 4> stage_channels{16, 32, 64, 96};
    std::vector<std::string> tasks{"deblur", "deshadow", "illuminate", "binarize", "hw_remove"};
    std::string ablate; // "", "no-prior-pool", or "no-pfm"
    std::string out_dir;
};

inline void validate_run_config(const RunConfig& cfg) {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
    if (cfg.image_size < 32 || cfg.image_size % 16 != 0)
        fail("image_size must be a multiple of 16 and at least 32, got " +
             std::to_string(cfg.image_size));
    if (cfg.batch < 1) fail("batch must be >= 1");
    if (cfg.iters_stage1 < 1 || cfg.iters_stage2 < 1 || cfg.iters_extend < 1)
        fail("iteration counts must be >= 1");
    if (cfg.log_every < 1) fail("log_every must be >= 1");
    if (cfg.val_every < 0 || cfg.val_count < 1) fail("val_every must be >= 0, val_count >= 1");
    if (!(cfg.lr > 0.0)) fail("lr must be > 0");
    if (cfg.weight_decay < 0.0) fail("weight_decay must be >= 0");
    if (cfg.loss_beta1 < 0.0 || cfg.loss_beta2 < 0.0) fail("loss weights must be >= 0");
    if (cfg.t_max < 1) fail("t_max must be >= 1");
    if (!(cfg.noise_beta_start > 0.0 && cfg.noise_beta_start <= cfg.noise_beta_end &&
          cfg.noise_beta_end < 1.0))
        fail("need 0 < noise_beta_start <= noise_beta_end < 1");
    if (cfg.sample_steps < 1 || cfg.sample_steps > cfg.t_max)
        fail("sample_steps must be in [1, t_max]");
    if (cfg.control_grid < 2) fail("control_grid must be >= 2");
    for (long c : cfg.stage_channels)
        if (c < 1) fail("stage_channels must be positive");
    if (cfg.tasks.empty()) fail("task list is empty");
    std::set<std::string> seen;
    for (const auto& t : cfg.tasks) {
        const long idx = task_index(t); // throws for unregistered names
        if (idx >= kTaskSlots) fail("task '" + t + "' does not fit the one-hot slots");
        if (!seen.insert(t).second) fail("duplicate task '" + t + "'");
    }
    if (!cfg.ablate.empty() && cfg.ablate != "no-prior-pool" && cfg.ablate != "no-pfm")
        fail("ablate must be one of \"\", \"no-prior-pool\", \"no-pfm\", got '" + cfg.ablate + "'");
}

inline nlohmann::json config_to_json(const RunConfig& c) {
    return nlohmann::json{{"seed", c.seed},
                          {"image_size", c.image_size},
                          {"batch", c.batch},
                          {"iters_stage1", c.iters_stage1},
                          {"iters_stage2", c.iters_stage2},
                          {"iters_extend", c.iters_extend},
                          {"log_every", c.log_every},
                          {"val_every", c.val_every},
                          {"val_count", c.val_count},
                          {"lr", c.lr},
                          {"weight_decay", c.weight_decay},
                          {"loss_beta1", c.loss_beta1},
                          {"loss_beta2", c.loss_beta2},
                          {"t_max", c.t_max},
                          {"noise_beta_start", c.noise_beta_start},
                          {"noise_beta_end", c.noise_beta_end},
                          {"sample_steps", c.sample_steps},
                          {"control_grid", c.control_grid},
                          {"stage_channels", c.stage_channels},
                          {"tasks", c.tasks},
                          {"ablate", c.ablate},
                          {"out_dir", c.out_dir}};
}

inline RunConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
    static const std::set<std::string> known = {
        "seed",       "image_size",       "batch",          "iters_stage1", "iters_stage2",
        "iters_extend", "log_every",      "val_every",      "val_count",    "lr",
        "weight_decay", "loss_beta1",     "loss_beta2",     "t_max",        "noise_beta_start",
        "noise_beta_end", "sample_steps", "control_grid",   "stage_channels", "tasks",
        "ablate",     "out_dir"};
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw std::invalid_argument("config: unknown key '" + key + "'");
    RunConfig c;
    c.seed = j.value("seed", c.seed);
    c.image_size = j.value("image_size", c.image_size);
    c.batch = j.value("batch", c.batch);
    c.iters_stage1 = j.value("iters_stage1", c.iters_stage1);
    c.iters_stage2 = j.value("iters_stage2", c.iters_stage2);
    c.iters_extend = j.value("iters_extend", c.iters_extend);
    c.log_every = j.value("log_every", c.log_every);
    c.val_every = j.value("val_every", c.val_every);
    c.val_count = j.value("val_count", c.val_count);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.loss_beta1 = j.value("loss_beta1", c.loss_beta1);
    c.loss_beta2 = j.value("loss_beta2", c.loss_beta2);
    c.t_max = j.value("t_max", c.t_max);
    c.noise_beta_start = j.value("noise_beta_start", c.noise_beta_start);
    c.noise_beta_end = j.value("noise_beta_end", c.noise_beta_end);
    c.sample_steps = j.value("sample_steps", c.sample_steps);
    c.control_grid = j.value("control_grid", c.control_grid);
    c.stage_channels = j.value("stage_channels", c.stage_channels);
    c.tasks = j.value("tasks", c.tasks);
    c.ablate = j.value("ablate", c.ablate);
    c.out_dir = j.value("out_dir", c.out_dir);
    validate_run_config(c);
    return c;
}

inline std::string config_to_string(const RunConfig& c) { return config_to_json(c).dump(); }

inline RunConfig config_from_string(const std::string& s) {
    return config_from_json(nlohmann::json::parse(s));
}

inline DenoiserConfig denoiser_config(const RunConfig& cfg) {
    DenoiserConfig dc;
    dc.stage_channels = cfg.stage_channels;
    dc.learned_prior = cfg.ablate == "no-prior-pool";
    dc.per_task_blocks = cfg.ablate == "no-pfm";
    return dc;
}

struct TrainStats {
    std::vector<double> losses;
    std::vector<std::string> task_per_iter;
    double first_window_mean = 0;
    double last_window_mean = 0;
    std::map<std::string, double> per_task_last_mean; // over the last half
};

namespace detail {

inline double mean_of(const std::vector<double>& v, std::size_t lo, std::size_t hi) {
    double acc = 0;
    for (std::size_t i = lo; i < hi; ++i) acc += v[i];
    return hi > lo ? acc / static_cast<double>(hi - lo) : 0.0;
}

inline void finish_stats(TrainStats& st) {
    const std::size_t n = st.losses.size();
    if (n == 0) return;
    const std::size_t window = std::max<std::size_t>(1, std::min<std::size_t>(100, n / 2));
    st.first_window_mean = mean_of(st.losses, 0, window);
    st.last_window_mean = mean_of(st.losses, n - window, n);
    std::map<std::string, std::pair<double, long>> acc;
    for (std::size_t i = n / 2; i < n; ++i) {
        auto& [sum, count] = acc[st.task_per_iter[i]];
        sum += st.losses[i];
        ++count;
    }
    for (const auto& [task, sc] : acc)
        st.per_task_last_mean[task] = sc.first / static_cast<double>(sc.second);
}

// Slot index of a per-task conv block parameter ("pfm.s3.task5.w" -> 5).
// The fused module's task head ("pfm.s3.task.w1") has no digits after
// "task" and maps to -1 like every other name.
inline long task_block_slot(const std::string& name) {
    if (name.rfind("pfm.s", 0) != 0) return -1;
    const auto pos = name.find(".task", 5);
    if (pos == std::string::npos) return -1;
    std::size_t i = pos + 5;
    long slot = -1;
    while (i < name.size() && name[i] >= '0' && name[i] <= '9')
        slot = (slot < 0 ? 0 : slot * 10) + (name[i++] - '0');
    return (slot >= 0 && i < name.size() && name[i] == '.') ? slot : -1;
}

// Per-task conv blocks only receive gradients for the batch task, so the
// optimizer's missing-gradient guard requires the idle slots to sit out
// the step.
template <class T>
void step_masked(AdamW<T>& opt, ParamStore<T>& ps, const DenoiserConfig& dc, long active_slot) {
    if (!dc.per_task_blocks) {
        opt.step(ps);
        return;
    }
    std::vector<std::string> parked;
    for (const auto& name : ps.names()) {
        const long slot = task_block_slot(name);
        if (slot >= 0 && slot != active_slot && ps.trainable(name)) {
            ps.set_trainable(name, false);
            parked.push_back(name);
        }
    }
    opt.step(ps);
    for (const auto& name : parked) ps.set_trainable(name, true);
}

template <class T>
double loss_value(const Tensor<T>& loss) {
    return static_cast<double>(loss.data()[0]);
}

inline std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
    std::string out;
    for (auto s : seeds) {
        if (!out.empty()) out += ' ';
        out += std::to_string(s);
    }
    return out;
}

} // namespace detail

// Restores one [3,H,W] image in [0,1]. Extents that are not multiples of 16
// are reflect-padded for the network and cropped back afterwards.
template <class T>
Tensor<T> restore_image(const Denoiser<T>& net, const DiffusionSchedule& sched,
                        const Tensor<T>& img01, const std::string& task, std::uint64_t noise_seed,
                        long steps) {
    if (img01.rank() != 3 || img01.dim(0) != 3)
        throw std::invalid_argument("restore: expected [3,H,W], got " + shape_str(img01.shape()));
    const long H = img01.dim(1), W = img01.dim(2);
    const long H16 = ((H + 15) / 16) * 16, W16 = ((W + 15) / 16) * 16;
    const long ph = (H16 - H + 1) / 2, pw = (W16 - W + 1) / 2;
    NoGradGuard ng;
    Tensor<T> x = reshape(img01.detach(), {1, 3, H, W});
    if (ph > 0 || pw > 0) x = crop2d(reflect_pad2d(x, ph, pw), 0, 0, H16, W16);
    const auto slots = net.config().task_slots;
    Tensor<T> pool = reshape(build_prior_pool(reshape(x, {3, H16, W16})),
                             {1, kPriorChannels, H16, W16});
    Tensor<T> th = reshape(task_one_hot<T>(task, slots), {1, slots});
    auto denoise = [&](const Tensor<T>& x_t, const Tensor<T>& x_d, const Tensor<T>& tk,
                       const Tensor<T>& pp, long t) { return net.forward(x_t, x_d, tk, pp, t); };
    Tensor<T> out = clamp(sample<T>(x, th, pool, steps, denoise, sched, noise_seed), T(0), T(1));
    if (ph > 0 || pw > 0) out = crop2d(out, ph, pw, H, W);
    return reshape(out, {3, H, W});
}

// Mean restored-vs-clean PSNR on freshly generated validation pages.
template <class T>
double validation_psnr(const Denoiser<T>& net, const DiffusionSchedule& sched,
                       const RunConfig& cfg, const std::string& task, long count) {
    double acc = 0;
    for (long i = 0; i < count; ++i) {
        const std::uint64_t seed =
            Rng::mix(Rng::mix(cfg.seed, kSaltVal), static_cast<std::uint64_t>(i));
        const auto sp = make_sample<T>(task, seed, cfg.image_size, cfg.image_size);
        const auto restored =
            restore_image(net, sched, sp.input, task, Rng::mix(seed, 1), cfg.sample_steps);
        acc += psnr(restored, sp.gt);
    }
    return acc / static_cast<double>(count);
}

namespace detail {

// Timesteps for training draws, restricted to the ladder the sampler
// visits. Half the draws land on the entry step: it is the only step with
// no signal at all in the latent, so it is the hardest and the one every
// sampling run starts from. The rest spread uniformly over the interior.
inline long draw_timestep(Rng& ir, const RunConfig& cfg) {
    if (cfg.sample_steps == 1 || ir.uniform() < 0.5) return cfg.t_max;
    const auto ladder = timestep_ladder(cfg.t_max, cfg.sample_steps);
    const long i = ir.uniform_int(1, cfg.sample_steps - 1); // skip t_max and the trailing zero
    return ladder[static_cast<std::size_t>(i)];
}

// The latent the sampler actually sees at step t. Sampling starts from a
// standard normal, not from a forward marginal, and with this schedule
// alpha_bar stays well above zero at t_max, so the two differ a lot: the
// noise scale along the trajectory is sigma(t)/sigma(t_max) and the signal
// scale is whatever the reverse steps have accumulated by t (zero at the
// entry, sqrt(alpha_bar(t)) minus the shrunken entry deficit after).
// Training on forward marginals instead teaches the model to read signal
// that inference never provides; measured on the toy corpus that gap costs
// several dB of restored PSNR.
template <class T>
Tensor<T> trajectory_latent(Tensor<T> gt, Tensor<T> eps, long t, const DiffusionSchedule& sched) {
    const long t_max = static_cast<long>(sched.alpha_bar.size()) - 1;
    if (t < 0 || t > t_max)
        throw std::invalid_argument("trajectory_latent: t out of range: " + std::to_string(t));
    const double sig_t = std::sqrt(1.0 - sched.alpha_bar[static_cast<std::size_t>(t)]);
    const double sig_T = std::sqrt(1.0 - sched.alpha_bar[static_cast<std::size_t>(t_max)]);
    const double noise_c = sig_t / sig_T;
    const double signal_c = std::sqrt(sched.alpha_bar[static_cast<std::size_t>(t)]) -
                            noise_c * std::sqrt(sched.alpha_bar[static_cast<std::size_t>(t_max)]);
    return add(scale(gt, static_cast<T>(signal_c)), scale(eps, static_cast<T>(noise_c)));
}

} // namespace detail

// Stage 1: the denoiser learns all pixel tasks jointly. One task per batch,
// one shared timestep per batch, AdamW on every parameter group present.
template <class T>
TrainStats train_stage1(ParamStore<T>& ps, const RunConfig& cfg, std::ostream& log) {
    validate_run_config(cfg);
    if (!ps.has("decoder.head.w"))
        throw std::runtime_error("stage1: parameter store lacks the denoiser tensors");
    const DenoiserConfig dc = denoiser_config(cfg);
    const Denoiser<T> net(ps, dc);
    AdamW<T> opt(static_cast<T>(cfg.lr), static_cast<T>(cfg.weight_decay));
    const auto sched = make_schedule(cfg.t_max, cfg.noise_beta_start, cfg.noise_beta_end);
    const LossWeights lw{cfg.loss_beta1, cfg.loss_beta2};
    const long S = cfg.image_size;
    const long n_tasks = static_cast<long>(cfg.tasks.size());

    TrainStats stats;
    Rng stream(Rng::mix(cfg.seed, kSaltStage1));
    for (long it = 0; it < cfg.iters_stage1; ++it) {
        Rng ir = stream.fork(static_cast<std::uint64_t>(it));
        const std::string& task = cfg.tasks[static_cast<std::size_t>(
            n_tasks == 1 ? 0 : ir.uniform_int(0, n_tasks - 1))];
        const auto td = detail::draw_timestep(ir, cfg);

        std::vector<std::uint64_t> seeds(static_cast<std::size_t>(cfg.batch));
        std::vector<Tensor<T>> xs, gs, pls, ths;
        for (long b = 0; b < cfg.batch; ++b) {
            const auto s = Rng::mix(Rng::mix(cfg.seed, kSaltSample),
                                    static_cast<std::uint64_t>(it * cfg.batch + b));
            seeds[static_cast<std::size_t>(b)] = s;
            const auto sp = make_sample<T>(task, s, S, S);
            pls.push_back(reshape(build_prior_pool(sp.input), {1, kPriorChannels, S, S}));
            xs.push_back(reshape(sp.input, {1, 3, S, S}));
            gs.push_back(reshape(sp.gt, {1, 3, S, S}));
            ths.push_back(reshape(task_one_hot<T>(task, dc.task_slots), {1, dc.task_slots}));
        }
        Tensor<T> x_d = affine(concat(xs, 0), T(2), T(-1));
        Tensor<T> gt = affine(concat(gs, 0), T(2), T(-1));
        Tensor<T> pool = concat(pls, 0);
        Tensor<T> th = concat(ths, 0);

        Tensor<T> eps;
        {
            NoGradGuard ng;
            eps = Tensor<T>::randn(gt.shape(), ir);
        }
        Tensor<T> x_t = td.entry ? eps : forward_noise(gt, td.t, eps, sched);
        Tensor<T> pred = net.forward(x_t, x_d, th, pool, td.t);
        Tensor<T> loss = task_loss(pred, gt, task, lw);
        const double lv = detail::loss_value(loss);
        if (!std::isfinite(lv))
            throw std::runtime_error("stage1: non-finite loss at iteration " + std::to_string(it) +
                                     "; batch seeds: " + detail::join_seeds(seeds));
        ps.zero_grad_all();
        loss.backward();
        detail::step_masked(opt, ps, dc, task_index(task));

        stats.losses.push_back(lv);
        stats.task_per_iter.push_back(task);
        if ((it + 1) % cfg.log_every == 0)
            log << "stage1 iter=" << (it + 1) << " task=" << task << " t=" << td.t
                << (td.entry ? "*" : "") << " loss=" << lv << "\n";
        if (cfg.val_every > 0 && (it + 1) % cfg.val_every == 0) {
            log << "stage1 val iter=" << (it + 1);
            for (const auto& vt : cfg.tasks)
                log << " " << vt << "=" << validation_psnr(net, sched, cfg, vt, cfg.val_count);
            log << "\n";
        }
    }
    detail::finish_stats(stats);
    return stats;
}

// Stage 2: only the coordinate branch trains, on warped pages of varying
// extent. The denoiser stack (encoder included) stays frozen throughout.
template <class T>
TrainStats train_stage2(ParamStore<T>& ps, const RunConfig& cfg, std::ostream& log) {
    validate_run_config(cfg);
    if (!ps.has("encoder.s1.rb1.conv1.w"))
        throw std::runtime_error("stage2: checkpoint lacks the encoder tensors");
    if (cfg.control_grid != kWarpGrid)
        throw std::runtime_error("stage2: control_grid " + std::to_string(cfg.control_grid) +
                                 " does not match the warp supervision grid " +
                                 std::to_string(kWarpGrid));
    const DenoiserConfig dc = denoiser_config(cfg);
    const Denoiser<T> net(ps, dc);
    if (!ps.has("cpb.b1.w")) {
        Rng init(Rng::mix(cfg.seed, kSaltCpbInit));
        init_cpb_params(ps, dc, init);
    }
    ps.freeze_all_except_prefix("cpb.");
    AdamW<T> opt(static_cast<T>(cfg.lr), static_cast<T>(cfg.weight_decay));
    const std::array<long, 3> sizes{64, 96, 128};
    const long G = cfg.control_grid;

    TrainStats stats;
    Rng stream(Rng::mix(cfg.seed, kSaltStage2));
    for (long it = 0; it < cfg.iters_stage2; ++it) {
        Rng ir = stream.fork(static_cast<std::uint64_t>(it));
        const long S = sizes[static_cast<std::size_t>(ir.uniform_int(0, 2))];
        const std::uint64_t seed =
            Rng::mix(Rng::mix(cfg.seed, kSaltStage2), static_cast<std::uint64_t>(it) + 1);
        const auto sp = make_sample<T>(kDewarpTaskName, seed, S, S);
        Tensor<T> bm = cpb_forward(net, ps, reshape(sp.input, {1, 3, S, S}), G);
        Tensor<T> loss = cpb_loss(bm, reshape(sp.bm_gt, {1, 2, G, G}));
        const double lv = detail::loss_value(loss);
        if (!std::isfinite(lv))
            throw std::runtime_error("stage2: non-finite loss at iteration " + std::to_string(it) +
                                     "; sample seed: " + std::to_string(seed));
        ps.zero_grad_all();
        loss.backward();
        opt.step(ps);

        stats.losses.push_back(lv);
        stats.task_per_iter.push_back(kDewarpTaskName);
        if ((it + 1) % cfg.log_every == 0)
            log << "stage2 iter=" << (it + 1) << " size=" << S << " loss=" << lv << "\n";
    }
    ps.unfreeze_all();
    detail::finish_stats(stats);
    return stats;
}

// Task extension: a new degradation claims a spare one-hot slot and only the
// fusion group trains on it. Everything else must come out byte-identical.
template <class T>
TrainStats extend_task_train(ParamStore<T>& ps, const RunConfig& cfg, const std::string& new_task,
                             std::ostream& log) {
    validate_run_config(cfg);
    const DenoiserConfig dc = denoiser_config(cfg);
    const long idx = task_index(new_task); // throws for unregistered names
    if (idx >= dc.task_slots)
        throw std::runtime_error("extend: no spare one-hot slot for '" + new_task + "' (index " +
                                 std::to_string(idx) + ", slots " + std::to_string(dc.task_slots) +
                                 "); re-train with larger task_slots");
    if (std::find(cfg.tasks.begin(), cfg.tasks.end(), new_task) != cfg.tasks.end())
        throw std::runtime_error("extend: task '" + new_task + "' is already trained");
    if (!ps.has("decoder.head.w"))
        throw std::runtime_error("extend: checkpoint lacks the denoiser tensors");

    const Denoiser<T> net(ps, dc);
    ps.freeze_all_except_prefix("pfm.");
    AdamW<T> opt(static_cast<T>(cfg.lr), static_cast<T>(cfg.weight_decay));
    const auto sched = make_schedule(cfg.t_max, cfg.noise_beta_start, cfg.noise_beta_end);
    const LossWeights lw{cfg.loss_beta1, cfg.loss_beta2};
    const long S = cfg.image_size;

    TrainStats stats;
    Rng stream(Rng::mix(cfg.seed, kSaltExtend));
    for (long it = 0; it < cfg.iters_extend; ++it) {
        Rng ir = stream.fork(static_cast<std::uint64_t>(it));
        const auto td = detail::draw_timestep(ir, cfg);
        std::vector<std::uint64_t> seeds(static_cast<std::size_t>(cfg.batch));
        std::vector<Tensor<T>> xs, gs, pls, ths;
        for (long b = 0; b < cfg.batch; ++b) {
            const auto s = Rng::mix(Rng::mix(cfg.seed, kSaltExtend),
                                    static_cast<std::uint64_t>(it * cfg.batch + b) + 1);
            seeds[static_cast<std::size_t>(b)] = s;
            const auto sp = make_sample<T>(new_task, s, S, S);
            pls.push_back(reshape(build_prior_pool(sp.input), {1, kPriorChannels, S, S}));
            xs.push_back(reshape(sp.input, {1, 3, S, S}));
            gs.push_back(reshape(sp.gt, {1, 3, S, S}));
            ths.push_back(reshape(task_one_hot<T>(new_task, dc.task_slots), {1, dc.task_slots}));
        }
        Tensor<T> x_d = affine(concat(xs, 0), T(2), T(-1));
        Tensor<T> gt = affine(concat(gs, 0), T(2), T(-1));
        Tensor<T> pool = concat(pls, 0);
        Tensor<T> th = concat(ths, 0);
        Tensor<T> eps;
        {
            NoGradGuard ng;
            eps = Tensor<T>::randn(gt.shape(), ir);
        }
        Tensor<T> x_t = td.entry ? eps : forward_noise(gt, td.t, eps, sched);
        Tensor<T> pred = net.forward(x_t, x_d, th, pool, td.t);
        Tensor<T> loss = task_loss(pred, gt, new_task, lw);
        const double lv = detail::loss_value(loss);
        if (!std::isfinite(lv))
            throw std::runtime_error("extend: non-finite loss at iteration " + std::to_string(it) +
                                     "; batch seeds: " + detail::join_seeds(seeds));
        ps.zero_grad_all();
        loss.backward();
        detail::step_masked(opt, ps, dc, idx);

        stats.losses.push_back(lv);
        stats.task_per_iter.push_back(new_task);
        if ((it + 1) % cfg.log_every == 0)
            log << "extend iter=" << (it + 1) << " task=" << new_task << " loss=" << lv << "\n";
    }
    ps.unfreeze_all();
    detail::finish_stats(stats);
    return stats;
}

// Predicts the backward map and resamples the page with it. Returns both so
// callers can dump the map alongside the image.
template <class T>
std::pair<Tensor<T>, Tensor<T>> dewarp_image(const Denoiser<T>& net, ParamStore<T>& ps,
                                             const Tensor<T>& img01, long G) {
    if (img01.rank() != 3 || img01.dim(0) != 3)
        throw std::invalid_argument("dewarp: expected [3,H,W], got " + shape_str(img01.shape()));
    if (!ps.has("cpb.b1.w"))
        throw std::runtime_error(
            "dewarp: checkpoint lacks the coordinate-branch tensors; run train-stage2 first");
    const long H = img01.dim(1), W = img01.dim(2);
    const long H16 = ((H + 15) / 16) * 16, W16 = ((W + 15) / 16) * 16;
    const long ph = (H16 - H + 1) / 2, pw = (W16 - W + 1) / 2;
    NoGradGuard ng;
    Tensor<T> x = reshape(img01.detach(), {1, 3, H, W});
    if (ph > 0 || pw > 0) x = crop2d(reflect_pad2d(x, ph, pw), 0, 0, H16, W16);
    Tensor<T> bm = cpb_forward(net, ps, x, G);
    Tensor<T> out = dewarp(x, bm);
    if (ph > 0 || pw > 0) out = crop2d(out, ph, pw, H, W);
    return {reshape(out, {3, H, W}), reshape(bm, {2, G, G})};
}

// Per-task loss summary used by the training reports and the ablation
// comparison.
inline nlohmann::json stats_to_json(const TrainStats& st) {
    nlohmann::json per_task = nlohmann::json::object();
    for (const auto& [task, v] : st.per_task_last_mean) per_task[task] = v;
    return nlohmann::json{{"iterations", st.losses.size()},
                          {"first_window_mean", st.first_window_mean},
                          {"last_window_mean", st.last_window_mean},
                          {"per_task_last_mean", per_task}};
}

} // namespace udr
