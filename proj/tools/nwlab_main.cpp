#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "nwlab/bench.hpp"
#include "nwlab/data.hpp"
#include "nwlab/gradcheck.hpp"
#include "nwlab/network.hpp"

using namespace nwlab;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitDivergence = 3;

std::string data_root() {
    const char* env = std::getenv("NWLAB_DATA_DIR");
    return env ? std::string(env) : std::string(".");
}

std::string resolve_data_path(const std::string& path) {
    if (std::filesystem::exists(path) || path.find('/') != std::string::npos) return path;
    const std::string joined = data_root() + "/" + path;
    return std::filesystem::exists(joined) ? joined : path;
}

int cmd_gen_data(const std::string& kind, const std::string& out, int count, uint64_t seed,
                 int frame, double digit_scale, const std::string& glyphs, int episodes,
                 int episode_len, int j, int k, int windows, bool stream, double drift_speed,
                 double drift_angle, double drift_rotate, double intensity_shift) {
    if (kind == "mnistpp") {
        GlyphBank bank = glyphs == "builtin" ? builtin_glyphs() : load_idx_images(glyphs);
        MovingMnistPPConfig cfg;
        cfg.frame_h = cfg.frame_w = frame;
        cfg.glyph_scale = digit_scale;
        Dataset d = generate_mnistpp_dataset(cfg, bank, seed, count);
        if (stream) d = make_mnistpp_stream(d, j);
        d.save(out);
        std::cout << "wrote " << d.records.size() << " records (" << d.seq_len << "x" << d.h << "x"
                  << d.w << ") to " << out << "\n";
        return 0;
    }
    if (kind == "radar") {
        RadarStreamConfig cfg;
        cfg.h = cfg.w = frame;
        cfg.seed = seed;
        cfg.episodes = episodes;
        cfg.episode_len = episode_len;
        cfg.drift_speed = drift_speed;
        cfg.drift_angle = drift_angle;
        cfg.drift_angle_per_episode = drift_rotate;
        cfg.intensity_shift_per_episode = intensity_shift;
        Dataset d = stream ? make_radar_stream(cfg, j) : make_radar_training_set(cfg, j, k, windows);
        d.save(out);
        std::cout << "wrote " << d.records.size() << " records (" << d.seq_len << "x" << d.h << "x"
                  << d.w << ") to " << out << "\n";
        return 0;
    }
    std::cerr << "unknown data kind '" << kind << "' (use mnistpp or radar)\n";
    return kExitValidation;
}

int cmd_params(const std::string& config) {
    NetworkConfig cfg = load_network_config(config);
    Network<float> net(cfg, 1);
    std::cout << cfg.name << ": " << net.parameter_count() << " parameters\n";
    return 0;
}

int cmd_train(const std::string& config, const std::string& data, const std::string& val,
              const std::string& out_dir, TrainSchedule schedule) {
    NetworkConfig cfg = load_network_config(config);
    Network<float> net(cfg, schedule.seed);
    Dataset train = Dataset::load(resolve_data_path(data));
    Dataset val_set;
    const Dataset* val_ptr = nullptr;
    if (!val.empty()) {
        val_set = Dataset::load(resolve_data_path(val));
        val_ptr = &val_set;
    }
    std::filesystem::create_directories(out_dir);
    TrainResult res =
        train_offline(net, train, val_ptr, schedule, out_dir + "/checkpoint.nwm");
    {
        std::ofstream os(out_dir + "/curve.csv");
        os << "iter,train_loss,val_score\n";
        for (const auto& p : res.curve) os << p[0] << "," << p[1] << "," << p[2] << "\n";
    }
    if (res.diverged) {
        std::cerr << "training diverged (non-finite loss) at iteration " << res.diverged_at << "\n";
        return kExitDivergence;
    }
    std::cout << "trained " << cfg.name << " for " << schedule.iterations
              << " iterations; checkpoint at " << out_dir << "/checkpoint.nwm\n";
    return 0;
}

int cmd_evaluate(const std::string& config, const std::string& checkpoint,
                 const std::string& stream_path, const std::string& mode, int k,
                 const std::string& out_dir, const std::string& baseline, bool plain_loss,
                 double online_lr) {
    Dataset stream_data = Dataset::load(resolve_data_path(stream_path));
    ProtocolStream stream{&stream_data, stream_data.seq_len, k};
    std::unique_ptr<ForecastModel> model;
    std::unique_ptr<Network<float>> net;
    if (baseline == "last-frame") {
        model = std::make_unique<LastFrameModel>();
    } else {
        NetworkConfig cfg = load_network_config(config);
        net = std::make_unique<Network<float>>(cfg, 1);
        if (!checkpoint.empty()) net->load_checkpoint(checkpoint);
        model = std::make_unique<DeepModel>(net.get(), !plain_loss,
                                            static_cast<float>(online_lr));
    }
    const ProtocolMode pm = mode == "online" ? ProtocolMode::Online : ProtocolMode::Offline;
    RunReport rep = run_protocol(*model, stream, pm, out_dir);
    std::cout << "model " << rep.model_id << " [" << rep.mode << "] scored "
              << rep.aggregate.n_frames << " frames\n"
              << SkillReport::csv_header() << "\n"
              << rep.aggregate.csv_row() << "\n";
    return 0;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out_dir) {
    std::vector<RunReport> reports;
    for (const auto& d : dirs) reports.push_back(RunReport::load(d));
    report_emit(reports, out_dir);
    std::cout << "report written to " << out_dir << "\n";
    return 0;
}

int cmd_gradcheck();

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"spatiotemporal sequence forecasting toolkit"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate MovingMNIST++ or synthetic radar data");
    std::string kind = "mnistpp", out = "data.nwd", glyphs = "builtin";
    int count = 100, frame = 64, episodes = 8, episode_len = 40, j = 5, k = 20, windows = 256;
    uint64_t seed = 1;
    double digit_scale = 1.0, drift_speed = 1.2, drift_angle = 0.6, drift_rotate = 0.0,
           intensity_shift = 0.0;
    bool stream = false;
    gen->add_option("--kind", kind, "mnistpp | radar");
    gen->add_option("--out", out)->required();
    gen->add_option("--count", count, "number of sequences (mnistpp)");
    gen->add_option("--seed", seed);
    gen->add_option("--frame", frame, "frame extent");
    gen->add_option("--digit-scale", digit_scale);
    gen->add_option("--glyphs", glyphs, "'builtin' or an IDX image file");
    gen->add_option("--episodes", episodes);
    gen->add_option("--episode-len", episode_len);
    gen->add_option("--j", j, "segment length / window input length");
    gen->add_option("--k", k, "window horizon (training sets)");
    gen->add_option("--windows", windows, "training windows (radar)");
    gen->add_flag("--stream", stream, "emit a protocol stream of J-frame segments");
    gen->add_option("--drift-speed", drift_speed);
    gen->add_option("--drift-angle", drift_angle);
    gen->add_option("--drift-rotate", drift_rotate, "drift angle change per episode");
    gen->add_option("--intensity-shift", intensity_shift, "gain change per episode");

    // train
    auto* tr = app.add_subcommand("train", "offline training from a config/preset");
    std::string config, data, val, out_dir = "run";
    TrainSchedule schedule;
    std::string loss_mode = "balanced";
    tr->add_option("--config", config)->required();
    tr->add_option("--data", data)->required();
    tr->add_option("--val", val);
    tr->add_option("--out", out_dir);
    tr->add_option("--iters", schedule.iterations)->required();
    tr->add_option("--batch", schedule.batch);
    tr->add_option("--clip", schedule.clip);
    tr->add_option("--loss", loss_mode, "balanced | plain");
    tr->add_option("--seed", schedule.seed);
    tr->add_option("--lr", schedule.lr);
    tr->add_option("--validate-every", schedule.validate_every);
    tr->add_option("--patience", schedule.patience_rounds);

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "run the streaming protocol on a checkpoint");
    std::string checkpoint, stream_path, mode = "offline", baseline;
    int horizon = 20;
    bool plain_loss = false;
    double online_lr = 1e-4;
    ev->add_option("--config", config);
    ev->add_option("--checkpoint", checkpoint);
    ev->add_option("--stream", stream_path)->required();
    ev->add_option("--mode", mode, "offline | online");
    ev->add_option("--k", horizon);
    ev->add_option("--out", out_dir);
    ev->add_option("--baseline", baseline, "'last-frame' to run the persistence baseline");
    ev->add_flag("--plain-loss", plain_loss, "use unweighted loss for online updates");
    ev->add_option("--online-lr", online_lr);

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference battery over all ops");

    // report
    auto* rp = app.add_subcommand("report", "aggregate evaluation runs into tables and plots");
    std::vector<std::string> report_dirs;
    rp->add_option("--runs", report_dirs, "evaluation output directories")->required();
    rp->add_option("--out", out_dir);

    // params
    auto* pc = app.add_subcommand("params", "print the parameter count of a preset");
    pc->add_option("--config", config)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed())
            return cmd_gen_data(kind, out, count, seed, frame, digit_scale, glyphs, episodes,
                                episode_len, j, k, windows, stream, drift_speed, drift_angle,
                                drift_rotate, intensity_shift);
        if (tr->parsed()) {
            schedule.balanced = loss_mode != "plain";
            return cmd_train(config, data, val, out_dir, schedule);
        }
        if (ev->parsed())
            return cmd_evaluate(config, checkpoint, stream_path, mode, horizon, out_dir, baseline,
                                plain_loss, online_lr);
        if (gc->parsed()) return cmd_gradcheck();
        if (rp->parsed()) return cmd_report(report_dirs, out_dir);
        if (pc->parsed()) return cmd_params(config);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    return 0;
}

namespace {

int cmd_gradcheck() {
    Rng rng(42);
    auto randn = [&](std::vector<int> shape, double s = 0.5) {
        TensorT<double> t(std::move(shape));
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.gaussian(0.0, s);
        return t;
    };
    int failures = 0;
    auto run = [&](const char* name, double err, double tol = 1e-4) {
        const bool ok = err < tol;
        std::cout << (ok ? "pass" : "FAIL") << "  " << name << "  max-rel-err " << err << "\n";
        if (!ok) ++failures;
    };

    for (int rep = 0; rep < 5; ++rep) {
        ConvSpec cs{1, 1, 1, 1, 1, 1};
        auto x = make_input(randn({2, 6, 6}), true);
        auto w = make_input(randn({3, 2, 3, 3}), true);
        auto b = make_input(randn({3}), true);
        run("conv2d", finite_difference_check(
                          [&](const std::vector<Var<double>>& in) {
                              return conv2d(in[0], in[1], in[2], cs);
                          },
                          {x, w, b}));
        DeconvSpec ds{2, 2, 1, 1};
        auto dw = make_input(randn({2, 3, 4, 4}), true);
        run("transposed_conv2d", finite_difference_check(
                                     [&](const std::vector<Var<double>>& in) {
                                         return transposed_conv2d(in[0], in[1], in[2], ds);
                                     },
                                     {x, dw, b}));
        auto img = make_input(randn({2, 5, 5}), true);
        auto u = make_input(randn({1, 5, 5}, 0.7), true);
        auto v = make_input(randn({1, 5, 5}, 0.7), true);
        run("bilinear_warp", finite_difference_check(
                                 [&](const std::vector<Var<double>>& in) {
                                     return bilinear_warp(in[0], in[1], in[2]);
                                 },
                                 {img, u, v}));
        run("activations", finite_difference_check(
                               [&](const std::vector<Var<double>>& in) {
                                   return mul(sigmoid(in[0]), leaky_relu(in[1], 0.2));
                               },
                               {make_input(randn({2, 4, 4}), true),
                                make_input(randn({2, 4, 4}), true)}));
    }
    std::cout << (failures ? "gradcheck FAILED\n" : "gradcheck passed\n");
    return failures ? kExitValidation : 0;
}

} // namespace
