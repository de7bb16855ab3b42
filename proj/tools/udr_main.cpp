#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "udr/checkpoint.hpp"
#include "udr/data_synth.hpp"
#include "udr/fd_suite.hpp"
#include "udr/image_io.hpp"
#include "udr/metrics.hpp"
#include "udr/priors.hpp"
#include "udr/train.hpp"

// Command-line surface over the restoration library. Every failure exits
// nonzero with a single "error: ..." line on stderr; checkpoint problems
// get distinct codes so scripts can tell a bad file from a bad flag.

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

constexpr int kExitError = 1;
constexpr int kExitIo = 3;
constexpr int kExitMagic = 4;
constexpr int kExitVersion = 5;
constexpr int kExitCrc = 6;
constexpr int kExitFormat = 7;

std::string one_line(std::string msg) {
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    return msg;
}

int checkpoint_exit_code(udr::CheckpointError::Kind kind) {
    switch (kind) {
        case udr::CheckpointError::Kind::io: return kExitIo;
        case udr::CheckpointError::Kind::magic: return kExitMagic;
        case udr::CheckpointError::Kind::version: return kExitVersion;
        case udr::CheckpointError::Kind::crc: return kExitCrc;
        case udr::CheckpointError::Kind::format: return kExitFormat;
    }
    return kExitError;
}

std::string slurp_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << text;
    if (!out) throw std::runtime_error("short write: " + path);
}

struct GlobalArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
};

udr::RunConfig make_config(const GlobalArgs& g) {
    udr::RunConfig cfg;
    if (!g.config_path.empty()) cfg = udr::config_from_string(slurp_text(g.config_path));
    if (g.seed) cfg.seed = *g.seed;
    if (!g.out.empty()) cfg.out_dir = g.out;
    udr::validate_run_config(cfg);
    return cfg;
}

// Loads a checkpoint plus its embedded config; --config replaces the
// embedded one wholesale, --seed overrides just the seed.
udr::RunConfig load_run(const GlobalArgs& g, const std::string& ckpt_path,
                        udr::ParamStore<float>& ps) {
    const std::string embedded = udr::load_checkpoint<float>(ckpt_path, ps);
    udr::RunConfig cfg = g.config_path.empty()
                             ? udr::config_from_string(embedded)
                             : udr::config_from_string(slurp_text(g.config_path));
    if (g.seed) cfg.seed = *g.seed;
    if (!g.out.empty()) cfg.out_dir = g.out;
    udr::validate_run_config(cfg);
    return cfg;
}

std::string require_out_dir(const GlobalArgs& g) {
    if (g.out.empty()) throw std::runtime_error("--out directory is required");
    fs::create_directories(g.out);
    return g.out;
}

json stats_report(const udr::TrainStats& stats, const udr::RunConfig& cfg) {
    json j = udr::stats_to_json(stats);
    j["ablate"] = cfg.ablate;
    j["seed"] = cfg.seed;
    return j;
}

int cmd_synth(const GlobalArgs& g, const std::string& task, long count, long size) {
    const auto out = require_out_dir(g);
    const std::uint64_t seed = g.seed.value_or(0);
    const fs::path dir = fs::path(out) / task;
    fs::create_directories(dir);
    for (long i = 0; i < count; ++i) {
        const auto s = udr::Rng::mix(udr::Rng::mix(seed, udr::kSaltSample),
                                     static_cast<std::uint64_t>(i));
        const auto sp = udr::make_sample<float>(task, s, size, size);
        const std::string stem = (dir / std::to_string(i)).string();
        udr::write_ppm(stem + "_in.ppm", sp.input);
        udr::write_ppm(stem + "_gt.ppm", sp.gt);
        if (sp.has_bm) udr::write_bm(stem + "_bm.bin", sp.bm_gt);
    }
    const json manifest = {{"task", task}, {"seed", seed}, {"count", count}, {"size", size}};
    write_text((dir / "manifest.json").string(), manifest.dump(2) + "\n");
    std::cout << "wrote " << count << " " << task << " pairs to " << dir.string() << "\n";
    return 0;
}

int cmd_train_stage1(const GlobalArgs& g, const std::string& ablate, long iters,
                     const std::string& compare_path) {
    udr::RunConfig cfg = make_config(g);
    if (!ablate.empty()) cfg.ablate = ablate;
    if (iters > 0) cfg.iters_stage1 = iters;
    udr::validate_run_config(cfg);
    const auto out = require_out_dir(g);

    udr::ParamStore<float> ps;
    udr::Rng init(udr::Rng::mix(cfg.seed, udr::kSaltNetInit));
    udr::Denoiser<float>::init_params(ps, udr::denoiser_config(cfg), init);
    const auto stats = udr::train_stage1(ps, cfg, std::cout);
    udr::save_checkpoint(ps, udr::config_to_string(cfg), (fs::path(out) / "stage1.uddf").string());

    const json report = stats_report(stats, cfg);
    write_text((fs::path(out) / "stage1_report.json").string(), report.dump(2) + "\n");
    if (!compare_path.empty()) {
        const json baseline = json::parse(slurp_text(compare_path));
        json delta = json::object();
        if (baseline.contains("per_task_last_mean"))
            for (const auto& [task, v] : report["per_task_last_mean"].items())
                if (baseline["per_task_last_mean"].contains(task))
                    delta[task] =
                        v.get<double>() - baseline["per_task_last_mean"][task].get<double>();
        const json cmp = {{"ablate", cfg.ablate},
                          {"model", report},
                          {"baseline", baseline},
                          {"per_task_delta", delta}};
        write_text((fs::path(out) / "ablation_report.json").string(), cmp.dump(2) + "\n");
    }
    std::cout << "stage1 done: first=" << stats.first_window_mean
              << " last=" << stats.last_window_mean << " checkpoint=" << out << "/stage1.uddf\n";
    return 0;
}

int cmd_train_stage2(const GlobalArgs& g, const std::string& ckpt, long iters) {
    udr::ParamStore<float> ps;
    udr::RunConfig cfg = load_run(g, ckpt, ps);
    if (iters > 0) cfg.iters_stage2 = iters;
    const auto out = require_out_dir(g);
    const auto stats = udr::train_stage2(ps, cfg, std::cout);
    udr::save_checkpoint(ps, udr::config_to_string(cfg), (fs::path(out) / "stage2.uddf").string());
    write_text((fs::path(out) / "stage2_report.json").string(),
               stats_report(stats, cfg).dump(2) + "\n");
    std::cout << "stage2 done: first=" << stats.first_window_mean
              << " last=" << stats.last_window_mean << " checkpoint=" << out << "/stage2.uddf\n";
    return 0;
}

int cmd_extend_task(const GlobalArgs& g, const std::string& ckpt, const std::string& task,
                    long iters) {
    udr::ParamStore<float> ps;
    udr::RunConfig cfg = load_run(g, ckpt, ps);
    if (iters > 0) cfg.iters_extend = iters;
    const auto out = require_out_dir(g);

    const udr::Denoiser<float> net(ps, udr::denoiser_config(cfg));
    const auto sched = udr::make_schedule(cfg.t_max, cfg.noise_beta_start, cfg.noise_beta_end);
    json drift_before = json::object(), drift_after = json::object();
    for (const auto& t : cfg.tasks)
        drift_before[t] = udr::validation_psnr(net, sched, cfg, t, cfg.val_count);

    const auto stats = udr::extend_task_train(ps, cfg, task, std::cout);
    for (const auto& t : cfg.tasks)
        drift_after[t] = udr::validation_psnr(net, sched, cfg, t, cfg.val_count);

    cfg.tasks.push_back(task);
    udr::save_checkpoint(ps, udr::config_to_string(cfg),
                         (fs::path(out) / "extended.uddf").string());
    json report = stats_report(stats, cfg);
    report["new_task"] = task;
    report["old_task_psnr_before"] = drift_before;
    report["old_task_psnr_after"] = drift_after;
    write_text((fs::path(out) / "extend_report.json").string(), report.dump(2) + "\n");
    std::cout << "extend done: task=" << task << " first=" << stats.first_window_mean
              << " last=" << stats.last_window_mean << " checkpoint=" << out << "/extended.uddf\n";
    return 0;
}

int cmd_restore(const GlobalArgs& g, const std::string& ckpt, const std::string& input,
                const std::string& task, long steps) {
    if (g.out.empty()) throw std::runtime_error("--out file is required");
    udr::ParamStore<float> ps;
    const udr::RunConfig cfg = load_run(g, ckpt, ps);
    if (std::find(cfg.tasks.begin(), cfg.tasks.end(), task) == cfg.tasks.end()) {
        std::string listed;
        for (const auto& t : cfg.tasks) listed += (listed.empty() ? "" : ", ") + t;
        throw std::runtime_error("unknown task '" + task + "'; registered tasks: " + listed);
    }
    const udr::Denoiser<float> net(ps, udr::denoiser_config(cfg));
    const auto sched = udr::make_schedule(cfg.t_max, cfg.noise_beta_start, cfg.noise_beta_end);
    const auto img = udr::read_ppm<float>(input);
    const auto restored = udr::restore_image(net, sched, img, task, g.seed.value_or(0),
                                             steps > 0 ? steps : cfg.sample_steps);
    udr::write_ppm(g.out, restored);
    std::cout << "restored " << input << " -> " << g.out << "\n";
    return 0;
}

int cmd_dewarp(const GlobalArgs& g, const std::string& ckpt, const std::string& input,
               const std::string& dump_bm) {
    if (g.out.empty()) throw std::runtime_error("--out file is required");
    udr::ParamStore<float> ps;
    const udr::RunConfig cfg = load_run(g, ckpt, ps);
    const udr::Denoiser<float> net(ps, udr::denoiser_config(cfg));
    const auto img = udr::read_ppm<float>(input);
    const auto [out, bm] = udr::dewarp_image(net, ps, img, cfg.control_grid);
    udr::write_ppm(g.out, out);
    if (!dump_bm.empty()) udr::write_bm(dump_bm, bm);
    std::cout << "dewarped " << input << " -> " << g.out << "\n";
    return 0;
}

json ink_mask_measures(const udr::Tensor<float>& restored, const udr::Tensor<float>& gt) {
    auto mask = [](const udr::Tensor<float>& img) {
        auto lum = udr::to_luminance(img);
        udr::Tensor<float> m = udr::Tensor<float>::zeros(lum.shape());
        for (long i = 0; i < lum.numel(); ++i) m.data()[i] = lum.data()[i] < 0.5f ? 1.0f : 0.0f;
        return m;
    };
    const auto fm = udr::f_measures(mask(restored), mask(gt));
    if (fm.empty_gt) return {{"fm", nullptr}, {"pfm", nullptr}};
    return {{"fm", fm.fm}, {"pfm", fm.pfm}};
}

int cmd_eval(const GlobalArgs& g, const std::string& ckpt, const std::string& task, long count,
             long size, long steps) {
    udr::ParamStore<float> ps;
    const udr::RunConfig cfg = load_run(g, ckpt, ps);
    const udr::Denoiser<float> net(ps, udr::denoiser_config(cfg));
    const auto sched = udr::make_schedule(cfg.t_max, cfg.noise_beta_start, cfg.noise_beta_end);
    const std::uint64_t seed = g.seed.value_or(cfg.seed);

    double sum_psnr = 0, sum_ssim = 0, sum_msssim = 0;
    for (long i = 0; i < count; ++i) {
        const auto s =
            udr::Rng::mix(udr::Rng::mix(seed, udr::kSaltVal), static_cast<std::uint64_t>(i));
        const auto sp = udr::make_sample<float>(task, s, size, size);
        udr::Tensor<float> outimg;
        if (task == udr::kDewarpTaskName)
            outimg = udr::dewarp_image(net, ps, sp.input, cfg.control_grid).first;
        else
            outimg = udr::restore_image(net, sched, sp.input, task, udr::Rng::mix(s, 1),
                                        steps > 0 ? steps : cfg.sample_steps);
        json row = {{"task", task},
                    {"seed", s},
                    {"psnr", udr::psnr(outimg, sp.gt)},
                    {"psnr_in", udr::psnr(sp.input, sp.gt)},
                    {"ssim", udr::ssim(outimg, sp.gt)},
                    {"msssim", udr::msssim(outimg, sp.gt).value},
                    {"fm", nullptr},
                    {"pfm", nullptr}};
        if (task == "binarize") row.update(ink_mask_measures(outimg, sp.gt));
        sum_psnr += row["psnr"].get<double>();
        sum_ssim += row["ssim"].get<double>();
        sum_msssim += row["msssim"].get<double>();
        std::cout << row.dump() << "\n";
    }
    const json agg = {{"aggregate", true},
                      {"task", task},
                      {"count", count},
                      {"psnr", sum_psnr / static_cast<double>(count)},
                      {"ssim", sum_ssim / static_cast<double>(count)},
                      {"msssim", sum_msssim / static_cast<double>(count)}};
    std::cout << agg.dump() << "\n";
    return 0;
}

int cmd_priors(const GlobalArgs& g, const std::string& input) {
    const auto out = require_out_dir(g);
    const auto img = udr::read_ppm<float>(input);
    const auto pool = udr::build_prior_pool(img);
    static const char* names[] = {"sobelx", "sobely", "canny",  "medianr", "mediang",
                                  "medianb", "gaussr", "gaussg", "gaussb",  "dctlow"};
    const long H = pool.dim(1), W = pool.dim(2);
    for (long c = 0; c < pool.dim(0); ++c) {
        udr::Tensor<float> ch = udr::Tensor<float>::zeros({1, H, W});
        for (long i = 0; i < H * W; ++i) ch.data()[i] = pool.data()[c * H * W + i];
        char fname[64];
        std::snprintf(fname, sizeof(fname), "prior_%02ld_%s.pgm", c, names[c]);
        udr::write_pgm((fs::path(out) / fname).string(), ch);
    }
    std::cout << "wrote 10 prior channels to " << out << "\n";
    return 0;
}

int cmd_gradcheck(long seeds, double tol) {
    bool all_pass = true;
    for (long s = 0; s < seeds; ++s) {
        const auto cases = udr::finite_difference_suite(static_cast<std::uint64_t>(s), tol);
        for (const auto& c : cases) {
            all_pass = all_pass && c.pass;
            std::cout << "seed " << s << " " << c.name << " " << (c.pass ? "pass" : "FAIL")
                      << " max_rel_err=" << c.max_rel_err
                      << (c.detail.empty() ? "" : " " + c.detail) << "\n";
        }
    }
    std::cout << (all_pass ? "gradcheck: all cases passed" : "gradcheck: FAILURES above") << "\n";
    return all_pass ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"unified document restoration toolkit"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalArgs g;
    app.add_option("--config", g.config_path, "run configuration JSON file");
    app.add_option("--seed", g.seed, "seed override");
    app.add_option("--out", g.out, "output directory or file");

    auto* synth = app.add_subcommand("synth", "generate degraded/clean page pairs");
    std::string synth_task = "deblur";
    long synth_count = 4, synth_size = 64;
    synth->add_option("--task", synth_task, "degradation name or 'dewarp'");
    synth->add_option("--count", synth_count, "pairs to generate");
    synth->add_option("--size", synth_size, "square page extent");

    auto* ts1 = app.add_subcommand("train-stage1", "train the denoiser on the pixel tasks");
    std::string ts1_ablate, ts1_compare;
    long ts1_iters = 0;
    ts1->add_option("--ablate", ts1_ablate, "'no-prior-pool' or 'no-pfm'");
    ts1->add_option("--iters", ts1_iters, "override iteration count");
    ts1->add_option("--compare", ts1_compare, "baseline report to diff against");

    auto* ts2 = app.add_subcommand("train-stage2", "train the coordinate branch on warps");
    std::string ts2_ckpt;
    long ts2_iters = 0;
    ts2->add_option("--ckpt", ts2_ckpt, "stage-1 checkpoint")->required();
    ts2->add_option("--iters", ts2_iters, "override iteration count");

    auto* ext = app.add_subcommand("extend-task", "train a new task into a spare slot");
    std::string ext_ckpt, ext_task = "denoise";
    long ext_iters = 0;
    ext->add_option("--ckpt", ext_ckpt, "trained checkpoint")->required();
    ext->add_option("--task", ext_task, "new task name");
    ext->add_option("--iters", ext_iters, "override iteration count");

    auto* res = app.add_subcommand("restore", "restore one degraded image");
    std::string res_ckpt, res_input, res_task;
    long res_steps = 0;
    res->add_option("--ckpt", res_ckpt, "trained checkpoint")->required();
    res->add_option("--input", res_input, "degraded PPM")->required();
    res->add_option("--task", res_task, "task name")->required();
    res->add_option("--steps", res_steps, "denoising steps");

    auto* dew = app.add_subcommand("dewarp", "flatten one warped page");
    std::string dew_ckpt, dew_input, dew_dump;
    dew->add_option("--ckpt", dew_ckpt, "stage-2 checkpoint")->required();
    dew->add_option("--input", dew_input, "warped PPM")->required();
    dew->add_option("--dump-bm", dew_dump, "also write the backward map here");

    auto* ev = app.add_subcommand("eval", "restore validation pages and report metrics");
    std::string ev_ckpt, ev_task = "deblur";
    long ev_count = 4, ev_size = 64, ev_steps = 0;
    ev->add_option("--ckpt", ev_ckpt, "trained checkpoint")->required();
    ev->add_option("--task", ev_task, "task name or 'dewarp'");
    ev->add_option("--count", ev_count, "validation pages");
    ev->add_option("--size", ev_size, "page extent");
    ev->add_option("--steps", ev_steps, "denoising steps");

    auto* pri = app.add_subcommand("priors", "dump the classical prior channels");
    std::string pri_input;
    pri->add_option("--input", pri_input, "input PPM")->required();

    auto* gc = app.add_subcommand("gradcheck", "finite-difference audit of the graphs");
    long gc_seeds = 10;
    double gc_tol = udr::kFdTolerance;
    gc->add_option("--seeds", gc_seeds, "number of seeds");
    gc->add_option("--tol", gc_tol, "max relative error");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) return cmd_synth(g, synth_task, synth_count, synth_size);
        if (*ts1) return cmd_train_stage1(g, ts1_ablate, ts1_iters, ts1_compare);
        if (*ts2) return cmd_train_stage2(g, ts2_ckpt, ts2_iters);
        if (*ext) return cmd_extend_task(g, ext_ckpt, ext_task, ext_iters);
        if (*res) return cmd_restore(g, res_ckpt, res_input, res_task, res_steps);
        if (*dew) return cmd_dewarp(g, dew_ckpt, dew_input, dew_dump);
        if (*ev) return cmd_eval(g, ev_ckpt, ev_task, ev_count, ev_size, ev_steps);
        if (*pri) return cmd_priors(g, pri_input);
        if (*gc) return cmd_gradcheck(gc_seeds, gc_tol);
    } catch (const udr::CheckpointError& e) {
        std::cerr << "error: checkpoint: " << one_line(e.what()) << "\n";
        return checkpoint_exit_code(e.kind);
    } catch (const std::exception& e) {
        std::cerr << "error: " << one_line(e.what()) << "\n";
        return kExitError;
    }
    std::cerr << "error: no subcommand\n";
    return kExitError;
}
