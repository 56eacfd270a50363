// Command-line surface of the relational two-stage segmentation pipeline:
// phantom generation, end-to-end training, inference, evaluation, probes and
// complexity accounting.
#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "rtsu/cascade.hpp"
#include "rtsu/metrics.hpp"
#include "rtsu/phantom.hpp"
#include "rtsu/pipeline.hpp"
#include "rtsu/train.hpp"

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

rtsu::PhantomParams phantom_params_from_kv(const std::map<std::string, std::string>& kv) {
    rtsu::PhantomParams p;
    std::vector<std::string> errors;
    for (const auto& [key, value] : kv) {
        try {
            if (key == "dims") {
                auto d = std::stoll(value);
                p.dims = {d, d, d};
            } else if (key == "spacing") {
                p.spacing_mm = std::stod(value);
            } else if (key == "completeness") {
                p.fissure_completeness = std::stod(value);
            } else if (key == "lesions") {
                p.lesion_count = int(std::stoll(value));
            } else if (key == "noise") {
                p.noise_sigma = std::stod(value);
            } else {
                errors.push_back(key + " (unknown key)");
            }
        } catch (const std::exception&) {
            errors.push_back(key + "=" + value + " (not a number)");
        }
    }
    if (!errors.empty()) {
        std::string msg = "phantom params: invalid entries:";
        for (const auto& e : errors) msg += "\n  " + e;
        rtsu::fail(msg);
    }
    return p;
}

int cmd_phantom(std::uint64_t seed, const std::string& out_dir, int count,
                const std::string& params_file, std::int64_t dims_override) {
    rtsu::PhantomParams params;
    if (!params_file.empty()) params = phantom_params_from_kv(rtsu::parse_kv_file(params_file));
    if (dims_override > 0) params.dims = {dims_override, dims_override, dims_override};
    fs::create_directories(out_dir);
    std::ofstream manifest(fs::path(out_dir) / "manifest.txt");
    rtsu::require(bool(manifest), "phantom: cannot write manifest.txt");
    for (int i = 0; i < count; ++i) {
        auto pair = rtsu::phantom(seed + std::uint64_t(i), params);
        auto scan_name = rtsu::str("scan_", i / 1000, (i / 100) % 10, (i / 10) % 10, i % 10,
                                   ".mhd");
        auto label_name = rtsu::str("labels_", i / 1000, (i / 100) % 10, (i / 10) % 10, i % 10,
                                    ".mhd");
        rtsu::save_volume((fs::path(out_dir) / scan_name).string(), pair.scan,
                          rtsu::MhdType::Short);
        rtsu::save_labels((fs::path(out_dir) / label_name).string(), pair.labels);
        manifest << scan_name << " " << label_name << "\n";
    }
    std::cout << "wrote " << count << " phantom pair(s) to " << out_dir << " (seed " << seed
              << ")\n";
    return 0;
}

std::vector<std::pair<std::string, std::string>> read_manifest(const std::string& data_dir) {
    std::ifstream is(fs::path(data_dir) / "manifest.txt");
    rtsu::require(bool(is), rtsu::str("train: no manifest.txt under ", data_dir));
    std::vector<std::pair<std::string, std::string>> entries;
    std::string scan, labels;
    while (is >> scan >> labels)
        entries.push_back({(fs::path(data_dir) / scan).string(),
                           (fs::path(data_dir) / labels).string()});
    rtsu::require(!entries.empty(), rtsu::str("train: empty manifest under ", data_dir));
    return entries;
}

template <class Real>
int run_train(const rtsu::RunConfig& cfg, const std::string& data_dir,
              const std::string& out_dir) {
    auto entries = read_manifest(data_dir);
    std::vector<rtsu::TrainSample<Real>> samples;
    for (const auto& [scan_path, label_path] : entries) {
        auto scan = rtsu::load_volume(scan_path);
        auto ref = rtsu::load_labels(label_path);
        samples.push_back(rtsu::make_sample<Real>(scan, ref, cfg.inplane));
    }
    fs::create_directories(out_dir);
    std::ofstream log(fs::path(out_dir) / "loss_log.csv");
    rtsu::require(bool(log), "train: cannot write loss_log.csv");
    log << rtsu::kLossLogHeader << "\n";
    log.precision(10);
    auto t0 = Clock::now();
    auto st = rtsu::run_training<Real>(cfg, samples, [&](const rtsu::LossLogRow& row) {
        log << row.step << "," << row.total << "," << row.gld_lobes1 << "," << row.gld_border1
            << "," << row.gld_lobes2 << "," << row.gld_border2 << "," << row.k_fraction << "\n";
        if (row.step % 50 == 0)
            std::cout << "step " << row.step << "  total " << row.total << "  k "
                      << row.k_fraction << "\n";
    });
    rtsu::save_cascade_checkpoint((fs::path(out_dir) / "checkpoint.rtsu").string(), st.stage1,
                                  st.stage2, cfg);
    std::ofstream used(fs::path(out_dir) / "config_used.txt");
    used << "lr = " << cfg.lr << "\nmomentum = " << cfg.momentum << "\nsteps = " << cfg.steps
         << "\nseed = " << cfg.seed << "\nwidth_scale = " << cfg.width_scale << "\nmode = "
         << (cfg.mode == rtsu::TrainingMode::Initial ? "initial" : "retrain")
         << "\npatches_per_step = " << cfg.patches_per_step << "\npatch_size = " << cfg.patch_size
         << "\ninplane = " << cfg.inplane << "\nprecision = " << cfg.precision
         << "\nk_ce = " << cfg.k_ce << "\n";
    std::cout << "trained " << cfg.steps << " steps in " << seconds_since(t0)
              << "s, final loss " << st.log.back().total << "\n";
    return 0;
}

template <class Real>
int run_infer(const std::string& checkpoint, const std::string& in_path,
              const std::string& out_path) {
    auto bundle = rtsu::load_cascade_checkpoint<Real>(checkpoint);
    auto scan = rtsu::load_volume(in_path);
    if (fs::path(out_path).has_parent_path())
        fs::create_directories(fs::path(out_path).parent_path());
    auto t0 = Clock::now();
    auto [pre, rec] = rtsu::preprocess(scan, bundle.cfg.inplane);
    rtsu::Tensor<Real> input;
    if constexpr (std::is_same_v<Real, double>) {
        input = pre;
    } else {
        std::vector<Real> v(pre.values().size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = Real(pre.values()[i]);
        input = rtsu::Tensor<Real>::from(pre.shape(), std::move(v));
    }
    double t_pre = seconds_since(t0);
    t0 = Clock::now();
    auto out = rtsu::forward_full(input, bundle.stage1, bundle.stage2, 116);
    double t_net = seconds_since(t0);
    t0 = Clock::now();
    auto labels = rtsu::postprocess(out.labels, rec);
    rtsu::save_labels(out_path, labels);
    double t_post = seconds_since(t0);
    std::cout << "inference " << t_net << "s, pre-processing " << t_pre << "s, post-processing "
              << t_post << "s\n";
    return 0;
}

int cmd_eval(const std::string& pred_dir, const std::string& ref_dir,
             const std::string& out_path) {
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(pred_dir))
        if (entry.path().extension() == ".mhd") names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());
    rtsu::require(!names.empty(), rtsu::str("eval: no .mhd files under ", pred_dir));

    std::ostringstream doc;
    doc << "{\n  \"scans\": {\n";
    std::vector<std::string> errors;
    std::array<double, 5> iou_sum{};
    std::array<std::int64_t, 5> iou_n{};
    double overall_sum = 0;
    std::int64_t scans = 0;
    bool first = true;
    for (const auto& name : names) {
        fs::path ref_path = fs::path(ref_dir) / name;
        if (!fs::exists(ref_path)) {
            errors.push_back(rtsu::str("missing reference for ", name));
            continue;
        }
        auto pred = rtsu::load_labels((fs::path(pred_dir) / name).string());
        auto ref = rtsu::load_labels(ref_path.string());
        if (pred.dims_xyz != ref.dims_xyz) {
            errors.push_back(rtsu::str("dims mismatch for ", name));
            continue;
        }
        auto r = rtsu::report(pred.labels, ref.labels, ref.dhw(), ref.spacing_dhw());
        if (!first) doc << ",\n";
        first = false;
        std::string body = rtsu::report_to_json(r, 6);
        doc << "    \"" << name << "\": " << body;
        for (int l = 0; l < 5; ++l)
            if (r.lobe_present[std::size_t(l)]) {
                iou_sum[std::size_t(l)] += r.iou_lobe[std::size_t(l)];
                ++iou_n[std::size_t(l)];
            }
        overall_sum += r.iou_overall;
        ++scans;
    }
    doc << "\n  },\n  \"aggregate\": {\n";
    for (int l = 0; l < 5; ++l) {
        doc << "    \"iou_" << rtsu::lobe_keys()[std::size_t(l)] << "\": ";
        if (iou_n[std::size_t(l)] > 0)
            doc << iou_sum[std::size_t(l)] / double(iou_n[std::size_t(l)]);
        else
            doc << "null";
        doc << ",\n";
    }
    doc << "    \"iou_overall\": " << (scans ? overall_sum / double(scans) : 0.0) << ",\n";
    doc << "    \"scans\": " << scans << "\n  }\n}\n";
    std::ofstream os(out_path);
    rtsu::require(bool(os), rtsu::str("eval: cannot write ", out_path));
    os << doc.str();
    std::cout << "evaluated " << scans << " scan(s), report at " << out_path << "\n";
    for (const auto& e : errors) std::cerr << "error: " << e << "\n";
    return errors.empty() ? 0 : 1;
}

template <class Real>
int run_probe(const std::string& checkpoint, const std::string& in_path, const std::string& mode,
              const std::string& at_str, const std::string& out_path) {
    rtsu::Dims3 at{};
    {
        std::istringstream ss(at_str);
        char comma;
        ss >> at[0] >> comma >> at[1] >> comma >> at[2];
        rtsu::require(bool(ss), rtsu::str("probe: cannot parse --at ", at_str,
                                          " (expected d,h,w)"));
    }
    auto bundle = rtsu::load_cascade_checkpoint<Real>(checkpoint);
    auto scan = rtsu::load_volume(in_path);
    auto [pre, rec] = rtsu::preprocess(scan, bundle.cfg.inplane);
    rtsu::Tensor<Real> input;
    if constexpr (std::is_same_v<Real, double>) {
        input = pre;
    } else {
        std::vector<Real> v(pre.values().size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = Real(pre.values()[i]);
        input = rtsu::Tensor<Real>::from(pre.shape(), std::move(v));
    }
    const rtsu::Shape& s = input.shape();
    auto half = [&] {
        rtsu::NoGradGuard ng;
        return rtsu::resize_trilinear(input, s[2] / 2, s[3] / 2, s[4] / 2);
    }();
    rtsu::MuSource mu{{s[2] / 2, s[3] / 2, s[4] / 2}, {0, 0, 0}, false};
    fs::path out(out_path);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    auto stem = (out.parent_path() / out.stem()).string();

    auto save_mask = [&](const std::string& path, const std::vector<std::uint8_t>& mask,
                         const rtsu::Dims3& dims) {
        rtsu::LabelVolume v;
        v.dims_xyz = {dims[2], dims[1], dims[0]};
        v.spacing_xyz = {1, 1, 1};
        v.labels = mask;
        rtsu::save_labels(path, v);
    };
    if (mode == "erf") {
        auto masks = rtsu::erf_support(bundle.stage1, half, mu, at);
        save_mask(stem + "_before.mhd", masks.before, masks.input_dims);
        save_mask(stem + "_after.mhd", masks.after, masks.input_dims);
        std::int64_t nb = 0, na = 0;
        for (auto m : masks.before) nb += m;
        for (auto m : masks.after) na += m;
        std::cout << "erf voxels before " << nb << ", after " << na << "; wrote " << stem
                  << "_before.mhd and " << stem << "_after.mhd\n";
        return 0;
    }
    if (mode == "attention") {
        rtsu::NoGradGuard ng;
        rtsu::ForwardTrace<Real> trace;
        bundle.stage1.forward(half, mu, rtsu::BatchNormMode::Eval, &trace);
        const rtsu::Shape& bs = trace.bridge_pre.shape();
        rtsu::Dims3 bdims{bs[2], bs[3], bs[4]};
        auto grid_mu = rtsu::geometric_map<Real>(bdims, rtsu::RUNet<Real>::kBridgeStride,
                                                 {0, 0, 0}, mu.source_shape);
        auto probe = rtsu::attention_probe(trace.bridge_pre, grid_mu, bundle.stage1.nl, at);
        rtsu::Volume wv;
        wv.dims_xyz = {bdims[2], bdims[1], bdims[0]};
        wv.spacing_xyz = {1, 1, 1};
        wv.data.assign(probe.weights.begin(), probe.weights.end());
        rtsu::save_volume(out_path, wv, rtsu::MhdType::Double);
        rtsu::Volume lv = wv;
        lv.data.assign(probe.logits.begin(), probe.logits.end());
        rtsu::save_volume(stem + "_logits.mhd", lv, rtsu::MhdType::Double);
        std::cout << "wrote attention weights to " << out_path << " and logits to " << stem
                  << "_logits.mhd\n";
        return 0;
    }
    rtsu::fail(rtsu::str("probe: unknown mode ", mode, " (expected erf or attention)"));
}

int cmd_complexity(int stage, const std::string& dims_str, double width_scale) {
    rtsu::Dims3 dims{};
    std::istringstream ss(dims_str);
    char comma;
    ss >> dims[0] >> comma >> dims[1] >> comma >> dims[2];
    rtsu::require(bool(ss), rtsu::str("complexity: cannot parse --dims ", dims_str));
    auto cfg = stage == 1 ? rtsu::RUNetConfig::stage1(width_scale)
                          : rtsu::RUNetConfig::stage2(width_scale);
    auto params = rtsu::count_params(cfg);
    auto macs = rtsu::count_macs(cfg, dims);
    std::cout << "stage " << stage << " (width_scale " << width_scale << ")\n";
    std::cout << "parameters: " << params << " (" << double(params) / 1e6 << "M)\n";
    std::cout << "macs at " << dims[0] << "x" << dims[1] << "x" << dims[2] << ": conv "
              << double(macs.conv) / 1e9 << "G, attention " << double(macs.attention) / 1e9
              << "G, total " << double(macs.total()) / 1e9 << "G\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"relational two-stage lobe segmentation"};
    app.require_subcommand(1);

    auto* ph = app.add_subcommand("phantom", "generate synthetic lobe phantoms");
    std::uint64_t ph_seed = 1;
    std::string ph_out, ph_params;
    int ph_count = 1;
    std::int64_t ph_dims = 0;
    ph->add_option("--seed", ph_seed, "generator seed")->required();
    ph->add_option("--out", ph_out, "output directory")->required();
    ph->add_option("--count", ph_count, "number of scan/label pairs");
    ph->add_option("--dims", ph_dims, "cubic volume extent");
    ph->add_option("--params", ph_params, "flat key=value parameter file");

    auto* tr = app.add_subcommand("train", "end-to-end training of both stages");
    std::string tr_config, tr_data, tr_out;
    bool tr_paper_lr = false;
    tr->add_option("--config", tr_config, "flat key=value run config")->required();
    tr->add_option("--data", tr_data, "directory with manifest.txt")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_flag("--paper-lr", tr_paper_lr, "use the published 1e-6 learning rate");

    auto* in = app.add_subcommand("infer", "segment one scan");
    std::string in_ckpt, in_scan, in_out;
    in->add_option("--checkpoint", in_ckpt)->required();
    in->add_option("--in", in_scan, "input scan (.mhd)")->required();
    in->add_option("--out", in_out, "output labels (.mhd)")->required();

    auto* ev = app.add_subcommand("eval", "per-lobe metrics over a directory pair");
    std::string ev_pred, ev_ref, ev_out;
    ev->add_option("--pred", ev_pred)->required();
    ev->add_option("--ref", ev_ref)->required();
    ev->add_option("--out", ev_out)->required();

    auto* pr = app.add_subcommand("probe", "receptive-field or attention diagnostics");
    std::string pr_ckpt, pr_scan, pr_mode, pr_at, pr_out;
    pr->add_option("--checkpoint", pr_ckpt)->required();
    pr->add_option("--in", pr_scan)->required();
    pr->add_option("--mode", pr_mode, "erf or attention")->required();
    pr->add_option("--at", pr_at, "bridge-grid location d,h,w")->required();
    pr->add_option("--out", pr_out, "output volume (.mhd)")->required();

    auto* cx = app.add_subcommand("complexity", "parameter and MAC accounting");
    int cx_stage = 1;
    std::string cx_dims = "116,116,116";
    double cx_ws = 1.0;
    cx->add_option("--stage", cx_stage)->check(CLI::IsMember({1, 2}))->required();
    cx->add_option("--dims", cx_dims, "input dims d,h,w");
    cx->add_option("--width-scale", cx_ws);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*ph) return cmd_phantom(ph_seed, ph_out, ph_count, ph_params, ph_dims);
        if (*tr) {
            auto cfg = rtsu::parse_run_config(rtsu::parse_kv_file(tr_config));
            if (tr_paper_lr) cfg.lr = rtsu::kPaperLearningRate;
            return cfg.precision == "f32" ? run_train<float>(cfg, tr_data, tr_out)
                                          : run_train<double>(cfg, tr_data, tr_out);
        }
        if (*in) return run_infer<float>(in_ckpt, in_scan, in_out);
        if (*ev) return cmd_eval(ev_pred, ev_ref, ev_out);
        if (*pr) return run_probe<float>(pr_ckpt, pr_scan, pr_mode, pr_at, pr_out);
        if (*cx) return cmd_complexity(cx_stage, cx_dims, cx_ws);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
