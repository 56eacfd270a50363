// Drives the installed command-line binary end to end over a temp directory:
// phantom generation, a short training run, inference, evaluation, probes,
// complexity accounting, and the documented error paths.
#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rtsu/volume.hpp"

namespace fs = std::filesystem;

namespace {

const std::string cli = RTSU_CLI_PATH;

struct Workspace {
    fs::path root;
    Workspace() : root(fs::temp_directory_path() / "rtsu_cli_test") {
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~Workspace() { fs::remove_all(root); }
    std::string p(const std::string& rel) const { return (root / rel).string(); }
};

int run(const std::string& args, const std::string& log_name, const Workspace& ws) {
    std::string cmd = cli + " " + args + " > " + ws.p(log_name) + " 2>&1";
    int rc = std::system(cmd.c_str());
    return rc == -1 ? -1 : WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
    std::ifstream is(path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

}  // namespace

TEST_CASE("command line end to end") {
    Workspace ws;

    // --- phantom ------------------------------------------------------------
    REQUIRE(run("phantom --seed 7 --out " + ws.p("data") + " --count 2 --dims 32",
                "phantom.log", ws) == 0);
    REQUIRE(fs::exists(ws.p("data/manifest.txt")));
    REQUIRE(fs::exists(ws.p("data/scan_0000.mhd")));
    REQUIRE(fs::exists(ws.p("data/labels_0001.mhd")));
    {
        std::ifstream mf(ws.p("data/manifest.txt"));
        std::string line;
        int lines = 0;
        while (std::getline(mf, line))
            if (!line.empty()) ++lines;
        REQUIRE(lines == 2);
    }
    // reproducible: regenerate with the same seed, compare bytes
    REQUIRE(run("phantom --seed 7 --out " + ws.p("data2") + " --count 1 --dims 32",
                "phantom2.log", ws) == 0);
    REQUIRE(slurp(ws.p("data/scan_0000.raw")) == slurp(ws.p("data2/scan_0000.raw")));

    // files load back
    auto vol = rtsu::load_volume(ws.p("data/scan_0000.mhd"));
    REQUIRE(vol.dims_xyz == std::array<std::int64_t, 3>{32, 32, 32});

    // --- train ---------------------------------------------------------------
    {
        std::ofstream cfg(ws.p("run.cfg"));
        cfg << "steps = 12\nlr = 0.005\nwidth_scale = 0.125\npatch_size = 92\n"
            << "patches_per_step = 1\ninplane = 32\nprecision = f32\nseed = 3\n";
    }
    REQUIRE(run("train --config " + ws.p("run.cfg") + " --data " + ws.p("data") + " --out " +
                ws.p("run"), "train.log", ws) == 0);
    REQUIRE(fs::exists(ws.p("run/checkpoint.rtsu")));
    REQUIRE(fs::exists(ws.p("run/config_used.txt")));
    {
        std::ifstream log(ws.p("run/loss_log.csv"));
        std::string header;
        std::getline(log, header);
        REQUIRE(header == "step,total,gld_lobes1,gld_border1,gld_lobes2,gld_border2,k_fraction");
        int rows = 0;
        std::string line;
        double first_k = -1, last_k = -1;
        while (std::getline(log, line)) {
            if (line.empty()) continue;
            ++rows;
            auto pos = line.rfind(',');
            double k = std::stod(line.substr(pos + 1));
            if (first_k < 0) first_k = k;
            last_k = k;
        }
        REQUIRE(rows == 12);  // one row per step
        REQUIRE(first_k == 1.0);
        REQUIRE(last_k < 1.0);
        REQUIRE(last_k >= 0.2);
    }
    // config validation lists every bad key
    {
        std::ofstream cfg(ws.p("bad.cfg"));
        cfg << "steps = 0\nbananas = 7\nprecision = f16\n";
    }
    REQUIRE(run("train --config " + ws.p("bad.cfg") + " --data " + ws.p("data") + " --out " +
                ws.p("runbad"), "trainbad.log", ws) != 0);
    auto bad_log = slurp(ws.p("trainbad.log"));
    REQUIRE(bad_log.find("bananas") != std::string::npos);
    REQUIRE(bad_log.find("steps") != std::string::npos);
    REQUIRE(bad_log.find("precision") != std::string::npos);

    // --- infer ----------------------------------------------------------------
    REQUIRE(run("infer --checkpoint " + ws.p("run/checkpoint.rtsu") + " --in " +
                ws.p("data/scan_0000.mhd") + " --out " + ws.p("pred/labels_0000.mhd"),
                "infer1.log", ws) == 0);
    auto pred = rtsu::load_labels(ws.p("pred/labels_0000.mhd"));
    REQUIRE(pred.dims_xyz == vol.dims_xyz);  // output dims equal input dims
    for (auto l : pred.labels) REQUIRE(l <= 5);
    REQUIRE(slurp(ws.p("infer1.log")).find("inference") != std::string::npos);

    // deterministic across repeated runs (bit compare)
    REQUIRE(run("infer --checkpoint " + ws.p("run/checkpoint.rtsu") + " --in " +
                ws.p("data/scan_0000.mhd") + " --out " + ws.p("pred2/labels_0000.mhd"),
                "infer2.log", ws) == 0);
    REQUIRE(slurp(ws.p("pred/labels_0000.raw")) == slurp(ws.p("pred2/labels_0000.raw")));

    // --- eval -----------------------------------------------------------------
    // identical directories give IOU 1 everywhere
    fs::create_directories(ws.p("refcopy"));
    fs::copy(ws.p("data/labels_0000.mhd"), ws.p("refcopy/labels_0000.mhd"));
    fs::copy(ws.p("data/labels_0000.raw"), ws.p("refcopy/labels_0000.raw"));
    REQUIRE(run("eval --pred " + ws.p("refcopy") + " --ref " + ws.p("data") + " --out " +
                ws.p("eval_self.json"), "eval1.log", ws) == 0);
    auto self_doc = slurp(ws.p("eval_self.json"));
    REQUIRE(self_doc.find("\"iou_overall\": 1") != std::string::npos);

    // a missing pair is surfaced as an error with nonzero exit
    fs::create_directories(ws.p("orphan"));
    fs::copy(ws.p("pred/labels_0000.mhd"), ws.p("orphan/nosuch.mhd"));
    fs::copy(ws.p("pred/labels_0000.raw"), ws.p("orphan/nosuch.raw"));
    REQUIRE(run("eval --pred " + ws.p("orphan") + " --ref " + ws.p("data") + " --out " +
                ws.p("eval_missing.json"), "eval2.log", ws) != 0);
    REQUIRE(slurp(ws.p("eval2.log")).find("missing reference") != std::string::npos);

    // --- probe ----------------------------------------------------------------
    REQUIRE(run("probe --checkpoint " + ws.p("run/checkpoint.rtsu") + " --in " +
                ws.p("data/scan_0000.mhd") + " --mode erf --at 1,1,1 --out " + ws.p("erf.mhd"),
                "probe1.log", ws) == 0);
    auto before = rtsu::load_labels(ws.p("erf_before.mhd"));
    auto after = rtsu::load_labels(ws.p("erf_after.mhd"));
    std::int64_t nb = 0, na = 0;
    for (std::size_t i = 0; i < before.labels.size(); ++i) {
        nb += before.labels[i];
        na += after.labels[i];
        REQUIRE(after.labels[i] >= before.labels[i]);  // support only grows
    }
    REQUIRE(nb > 0);
    REQUIRE(na >= nb);

    REQUIRE(run("probe --checkpoint " + ws.p("run/checkpoint.rtsu") + " --in " +
                ws.p("data/scan_0000.mhd") + " --mode attention --at 0,1,1 --out " +
                ws.p("attn.mhd"), "probe2.log", ws) == 0);
    auto attn = rtsu::load_volume(ws.p("attn.mhd"));
    double sum = 0;
    for (double w : attn.data) {
        REQUIRE(w >= 0.0);
        sum += w;
    }
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
    REQUIRE(fs::exists(ws.p("attn_logits.mhd")));

    // bad location is rejected
    REQUIRE(run("probe --checkpoint " + ws.p("run/checkpoint.rtsu") + " --in " +
                ws.p("data/scan_0000.mhd") + " --mode erf --at 9,0,0 --out " + ws.p("bad.mhd"),
                "probe3.log", ws) != 0);

    // --- complexity -------------------------------------------------------------
    REQUIRE(run("complexity --stage 1 --dims 64,64,64", "cx1.log", ws) == 0);
    auto cx1 = slurp(ws.p("cx1.log"));
    REQUIRE(cx1.find("3.84707M") != std::string::npos);
    REQUIRE(run("complexity --stage 2 --dims 116,116,116", "cx2.log", ws) == 0);
    auto cx2 = slurp(ws.p("cx2.log"));
    REQUIRE(cx2.find("9.23581M") != std::string::npos);
}
