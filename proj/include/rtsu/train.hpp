#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <type_traits>
#include <map>
#include <string>
#include <vector>

#include "rtsu/cascade.hpp"
#include "rtsu/losses.hpp"
#include "rtsu/pipeline.hpp"
#include "rtsu/runet.hpp"
#include "rtsu/volume.hpp"

namespace rtsu {

struct RunConfig {
    double lr = 1e-2;  // desk-scale default; the published rate is 1e-6
    double momentum = 0.9;
    std::int64_t steps = 200;
    std::uint64_t seed = 1;
    double width_scale = 1.0;
    TrainingMode mode = TrainingMode::Initial;
    std::int64_t patches_per_step = 2;
    std::int64_t patch_size = 116;  // stage-2 training window
    std::int64_t inplane = 256;     // pre-processing in-plane target
    std::string precision = "f64";
    double k_ce = 0.3;
};

inline constexpr double kPaperLearningRate = 1e-6;

// Strict parser: every unknown key and every invalid value is reported in one
// diagnostic.
inline RunConfig parse_run_config(const std::map<std::string, std::string>& kv) {
    RunConfig c;
    std::vector<std::string> errors;
    auto get_num = [&](const std::string& key, auto& out, auto validate) {
        auto it = kv.find(key);
        if (it == kv.end()) return;
        try {
            if constexpr (std::is_floating_point_v<std::decay_t<decltype(out)>>)
                out = std::stod(it->second);
            else
                out = static_cast<std::decay_t<decltype(out)>>(std::stoll(it->second));
            if (!validate(out)) errors.push_back(str(key, "=", it->second, " (out of range)"));
        } catch (const std::exception&) {
            errors.push_back(str(key, "=", it->second, " (not a number)"));
        }
    };
    const std::vector<std::string> known{"lr",    "momentum", "steps",     "seed",
                                         "width_scale", "mode", "patches_per_step",
                                         "patch_size",  "inplane", "precision", "k_ce"};
    for (const auto& [key, value] : kv)
        if (std::find(known.begin(), known.end(), key) == known.end())
            errors.push_back(str(key, " (unknown key)"));
    get_num("lr", c.lr, [](double v) { return v > 0; });
    get_num("momentum", c.momentum, [](double v) { return v >= 0 && v < 1; });
    get_num("steps", c.steps, [](std::int64_t v) { return v >= 1; });
    get_num("seed", c.seed, [](std::uint64_t) { return true; });
    get_num("width_scale", c.width_scale, [](double v) { return v > 0 && v <= 1; });
    get_num("patches_per_step", c.patches_per_step, [](std::int64_t v) { return v >= 1; });
    get_num("patch_size", c.patch_size, [](std::int64_t v) { return v >= 92; });
    get_num("inplane", c.inplane, [](std::int64_t v) { return v >= 16 && v % 16 == 0; });
    get_num("k_ce", c.k_ce, [](double v) { return v > 0 && v <= 1; });
    if (auto it = kv.find("mode"); it != kv.end()) {
        if (it->second == "initial")
            c.mode = TrainingMode::Initial;
        else if (it->second == "retrain")
            c.mode = TrainingMode::Retrain;
        else
            errors.push_back(str("mode=", it->second, " (expected initial or retrain)"));
    }
    if (auto it = kv.find("precision"); it != kv.end()) {
        if (it->second == "f32" || it->second == "f64")
            c.precision = it->second;
        else
            errors.push_back(str("precision=", it->second, " (expected f32 or f64)"));
    }
    if (c.patch_size % 8 != 4 && errors.empty())
        errors.push_back(str("patch_size=", c.patch_size, " (valid chain needs size = 8k+4)"));
    if (!errors.empty()) {
        std::string msg = "config: invalid entries:";
        for (const auto& e : errors) msg += "\n  " + e;
        fail(msg);
    }
    return c;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

template <class Real>
class Sgd {
public:
    Sgd(double lr, double momentum) : lr_(Real(lr)), momentum_(Real(momentum)) {}

    void attach(const std::vector<Tensor<Real>*>& params) {
        params_ = params;
        velocity_.clear();
        for (auto* p : params_) {
            p->set_requires_grad(true);
            p->zero_grad();
            velocity_.emplace_back(p->values().size(), Real(0));
        }
    }

    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& v = velocity_[i];
            auto& val = params_[i]->values();
            const auto& g = params_[i]->grad();
            for (std::size_t j = 0; j < val.size(); ++j) {
                v[j] = momentum_ * v[j] + g[j];
                val[j] -= lr_ * v[j];
            }
            params_[i]->zero_grad();
        }
    }

private:
    Real lr_, momentum_;
    std::vector<Tensor<Real>*> params_;
    std::vector<std::vector<Real>> velocity_;
};

// ---------------------------------------------------------------------------
// training samples
// ---------------------------------------------------------------------------

template <class Real>
struct TrainSample {
    Tensor<Real> scan;                      // pre-processed (1,1,D,H,W)
    Dims3 dims{};                           // full pre-processed dims
    std::vector<std::uint8_t> labels;       // reference at full resolution
    std::vector<std::uint8_t> border;
    std::vector<std::uint8_t> labels_coarse;  // nearest-neighbor at half res
    std::vector<std::uint8_t> border_coarse;
};

template <class Real>
TrainSample<Real> make_sample(const Volume& scan, const LabelVolume& ref, std::int64_t inplane) {
    auto [t, rec] = preprocess(scan, inplane);
    TrainSample<Real> s;
    const Shape& sh = t.shape();
    s.dims = {sh[2], sh[3], sh[4]};
    if constexpr (std::is_same_v<Real, double>) {
        s.scan = t;
    } else {
        std::vector<Real> v(t.values().size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = Real(t.values()[i]);
        s.scan = Tensor<Real>::from(sh, std::move(v));
    }
    s.labels = preprocess_labels(ref, rec);
    s.border = border_target(s.labels, s.dims);
    Dims3 half{s.dims[0] / 2, s.dims[1] / 2, s.dims[2] / 2};
    s.labels_coarse = resample_labels_nn(s.labels, s.dims, half);
    s.border_coarse = border_target(s.labels_coarse, half);
    return s;
}

// ---------------------------------------------------------------------------
// end-to-end training loop
// ---------------------------------------------------------------------------

struct LossLogRow {
    std::int64_t step;
    double total, gld_lobes1, gld_border1, gld_lobes2, gld_border2, k_fraction;
};

inline constexpr const char* kLossLogHeader =
    "step,total,gld_lobes1,gld_border1,gld_lobes2,gld_border2,k_fraction";

template <class Real>
struct TrainState {
    RUNet<Real> stage1, stage2;
    std::vector<LossLogRow> log;
};

inline std::vector<std::uint8_t> crop_labels(const std::vector<std::uint8_t>& full,
                                             const Dims3& dims, const Dims3& lo,
                                             std::int64_t n) {
    std::vector<std::uint8_t> out(std::size_t(n * n * n));
    for (std::int64_t z = 0; z < n; ++z)
        for (std::int64_t y = 0; y < n; ++y)
            for (std::int64_t x = 0; x < n; ++x)
                out[std::size_t((z * n + y) * n + x)] =
                    full[std::size_t(((lo[0] + z) * dims[1] + lo[1] + y) * dims[2] + lo[2] + x)];
    return out;
}

// One optimization step: coarse pass, OHEM patch choice, patch passes, a
// summed loss, one SGD update. Stage-2 terms are averaged over the patches of
// the step.
template <class Real>
LossLogRow train_step(TrainState<Real>& st, Sgd<Real>& opt, const TrainSample<Real>& sample,
                      const RunConfig& cfg, std::int64_t step, Rng& rng) {
    auto in = stage2_input(sample.scan, st.stage1, BatchNormMode::Train);
    auto l1 = generalized_dice(in.stage1.lobes, sample.labels_coarse);
    auto b1 = generalized_dice_binary(in.stage1.border, sample.border_coarse);

    double k = k_schedule(step, cfg.steps);
    auto specs = tile(sample.dims, cfg.patch_size);
    auto pool = ohem_select(in.up_lobes, sample.labels, specs, k);
    std::int64_t n_patches = std::min<std::int64_t>(cfg.patches_per_step,
                                                    std::int64_t(pool.size()));
    Tensor<Real> l2_sum, b2_sum, ce2_sum;
    for (std::int64_t p = 0; p < n_patches; ++p) {
        const auto& ps = specs[pool[std::size_t(rng.index(std::int64_t(pool.size())))]];
        auto heads = run_patch(in, st.stage2, ps, BatchNormMode::Train);
        Dims3 out_lo{ps.offset[0], ps.offset[1], ps.offset[2]};
        auto lab = crop_labels(sample.labels, sample.dims, out_lo, ps.out_size);
        auto bor = crop_labels(sample.border, sample.dims, out_lo, ps.out_size);
        auto l2 = generalized_dice(heads.lobes, lab);
        auto b2 = generalized_dice_binary(heads.border, bor);
        l2_sum = p == 0 ? l2 : add(l2_sum, l2);
        b2_sum = p == 0 ? b2 : add(b2_sum, b2);
        if (cfg.mode == TrainingMode::Retrain) {
            auto ce = topk_ce(heads.lobes, lab, cfg.k_ce);
            ce2_sum = p == 0 ? ce : add(ce2_sum, ce);
        }
    }
    auto l2m = scale(l2_sum, Real(1.0 / double(n_patches)));
    auto b2m = scale(b2_sum, Real(1.0 / double(n_patches)));
    auto total = add(add(add(l1, b1), l2m), b2m);
    if (cfg.mode == TrainingMode::Retrain) {
        auto ce1 = topk_ce(in.stage1.lobes, sample.labels_coarse, cfg.k_ce);
        total = add(total, add(ce1, scale(ce2_sum, Real(1.0 / double(n_patches)))));
    }
    LossLogRow row{step,
                   double(total.item()),
                   double(l1.item()),
                   double(b1.item()),
                   double(l2m.item()),
                   double(b2m.item()),
                   k};
    total.backward();
    opt.step();
    return row;
}

template <class Real>
TrainState<Real> run_training(const RunConfig& cfg, const std::vector<TrainSample<Real>>& data,
                              const std::function<void(const LossLogRow&)>& on_step = {}) {
    require(!data.empty(), "train: no samples");
    TrainState<Real> st;
    Rng seeds(cfg.seed);
    st.stage1 = RUNet<Real>::build(RUNetConfig::stage1(cfg.width_scale), seeds.next_u64());
    st.stage2 = RUNet<Real>::build(RUNetConfig::stage2(cfg.width_scale), seeds.next_u64());

    std::vector<Tensor<Real>*> params;
    for (auto& [name, t] : st.stage1.named_params()) params.push_back(t);
    for (auto& [name, t] : st.stage2.named_params()) params.push_back(t);
    Sgd<Real> opt(cfg.lr, cfg.momentum);
    opt.attach(params);

    Rng rng(seeds.next_u64());
    for (std::int64_t step = 0; step < cfg.steps; ++step) {
        const auto& sample = data[std::size_t(rng.index(std::int64_t(data.size())))];
        auto row = train_step(st, opt, sample, cfg, step, rng);
        st.log.push_back(row);
        if (on_step) on_step(row);
    }
    return st;
}

// ---------------------------------------------------------------------------
// checkpoint bundle (both stages + run metadata)
// ---------------------------------------------------------------------------

template <class Real>
void save_cascade_checkpoint(const std::string& path, RUNet<Real>& s1, RUNet<Real>& s2,
                             const RunConfig& cfg) {
    std::vector<ParamRecord> recs;
    auto add_net = [&recs](const std::string& prefix, RUNet<Real>& net) {
        for (auto& [name, t] : net.named_params()) {
            ParamRecord r;
            r.name = prefix + name;
            r.shape = t->shape();
            r.data.assign(t->values().begin(), t->values().end());
            recs.push_back(std::move(r));
        }
        for (auto& [name, buf] : net.named_buffers()) {
            ParamRecord r;
            r.name = prefix + name;
            r.shape = {std::int64_t(buf->size())};
            r.data.assign(buf->begin(), buf->end());
            recs.push_back(std::move(r));
        }
    };
    add_net("s1.", s1);
    add_net("s2.", s2);
    auto meta = [&recs](const std::string& name, double v) {
        recs.push_back({name, {1}, {v}});
    };
    meta("meta.width_scale", cfg.width_scale);
    meta("meta.inplane", double(cfg.inplane));
    meta("meta.patch_size", double(cfg.patch_size));
    meta("meta.seed", double(cfg.seed));
    write_checkpoint(path, recs);
}

template <class Real>
struct CascadeBundle {
    RUNet<Real> stage1, stage2;
    RunConfig cfg;
};

template <class Real>
CascadeBundle<Real> load_cascade_checkpoint(const std::string& path) {
    auto recs = read_checkpoint(path);
    std::map<std::string, const ParamRecord*> by_name;
    for (const auto& r : recs) by_name[r.name] = &r;
    auto meta = [&](const std::string& name) {
        auto it = by_name.find(name);
        require(it != by_name.end(), str("checkpoint: ", path, " lacks ", name));
        return it->second->data.at(0);
    };
    CascadeBundle<Real> b;
    b.cfg.width_scale = meta("meta.width_scale");
    b.cfg.inplane = std::int64_t(meta("meta.inplane"));
    b.cfg.patch_size = std::int64_t(meta("meta.patch_size"));
    b.cfg.seed = std::uint64_t(meta("meta.seed"));
    b.stage1 = RUNet<Real>::build(RUNetConfig::stage1(b.cfg.width_scale), 0);
    b.stage2 = RUNet<Real>::build(RUNetConfig::stage2(b.cfg.width_scale), 0);
    auto fill_net = [&](const std::string& prefix, RUNet<Real>& net) {
        for (auto& [name, t] : net.named_params()) {
            auto it = by_name.find(prefix + name);
            require(it != by_name.end(), str("checkpoint: ", path, " lacks ", prefix + name));
            require(it->second->shape == t->shape(),
                    str("checkpoint: ", prefix + name, " has shape ",
                        shape_str(it->second->shape), ", expected ", shape_str(t->shape())));
            auto& vals = t->values();
            for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = Real(it->second->data[i]);
        }
        for (auto& [name, buf] : net.named_buffers()) {
            auto it = by_name.find(prefix + name);
            require(it != by_name.end(), str("checkpoint: ", path, " lacks ", prefix + name));
            require(it->second->data.size() == buf->size(),
                    str("checkpoint: ", prefix + name, " size mismatch"));
            for (std::size_t i = 0; i < buf->size(); ++i) (*buf)[i] = Real(it->second->data[i]);
        }
    };
    fill_net("s1.", b.stage1);
    fill_net("s2.", b.stage2);
    return b;
}

// preprocess -> two-stage forward -> postprocess, at the checkpoint's
// pre-processing settings
template <class Real>
LabelVolume infer_volume(const Volume& scan, RUNet<Real>& s1, RUNet<Real>& s2,
                         std::int64_t inplane, std::int64_t patch_in = 116) {
    auto [t, rec] = preprocess(scan, inplane);
    Tensor<Real> input;
    if constexpr (std::is_same_v<Real, double>) {
        input = t;
    } else {
        std::vector<Real> v(t.values().size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = Real(t.values()[i]);
        input = Tensor<Real>::from(t.shape(), std::move(v));
    }
    auto out = forward_full(input, s1, s2, patch_in);
    return postprocess(out.labels, rec);
}

}  // namespace rtsu
