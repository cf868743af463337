#include "test_util.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <sstream>
#include <vector>

#include "refsr/datagen.hpp"
#include "refsr/flow.hpp"
#include "refsr/metrics.hpp"

using namespace refsr;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string err;
};

// Runs the CLI with stderr captured to a file next to `log`.
Run cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string("\"") + REFSR_CLI_PATH + "\" " + args + " >/dev/null 2>\"" + log.string() + "\"";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = testutil::read_file(log);
    return r;
}

std::string strip_comments(const std::string& csv) {
    std::istringstream in(csv);
    std::string out;
    for (std::string line; std::getline(in, line);)
        if (line.rfind("#", 0) != 0) out += line + "\n";
    return out;
}

int count_rows(const std::string& csv) {
    int n = 0;
    std::istringstream in(strip_comments(csv));
    for (std::string line; std::getline(in, line);) n += !line.empty();
    return n - 1;  // header
}

// Tiny model shared by the inference tests.
const char* kTiny = "--image-size 16 --patch 4 --dim 16 --heads 2 --layers 2 --ref-layers 2 --sample-steps 3 "
                    "--batch 2 --steps 4";

struct Fixture {
    testutil::TempDir dir{"cli"};
    fs::path data, ckpt, log;

    Fixture() {
        data = dir / "data";
        ckpt = dir / "ckpt";
        log = dir / "log.txt";
        REQUIRE(cli("datagen --n 6 --seed 4 --canvas 64 --out \"" + data.string() + "\"", log).code == 0);
        for (int s = 0; s < 3; ++s) {
            const Run r = cli("train --stage " + std::to_string(s) + " --data \"" + data.string() + "\" --split all --ckpt \"" +
                                  ckpt.string() + "\" " + kTiny,
                              log);
            REQUIRE_MESSAGE(r.code == 0, r.err);
        }
    }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

}  // namespace

TEST_CASE("argument errors exit with code 2") {
    testutil::TempDir dir("cli_args");
    CHECK(cli("datagen --n 2", dir / "log").code == 2);
    CHECK(cli("", dir / "log").code == 2);
    CHECK(cli("sr --tile-step", dir / "log").code == 2);
}

TEST_CASE("datagen reruns are byte-identical") {
    testutil::TempDir dir("cli_dg");
    for (const char* sub : {"a", "b"})
        REQUIRE(cli(std::string("datagen --n 3 --seed 9 --canvas 64 --out \"") + (dir / sub).string() + "\"", dir / "log")
                    .code == 0);
    for (const char* f : {"manifest.csv", "hr/000000.png", "ref/000001.png", "lr/000002.png", "run.cfg"})
        CHECK(testutil::read_file(dir / "a" / f) == testutil::read_file(dir / "b" / f));
}

TEST_CASE("train refuses to start without earlier stages") {
    testutil::TempDir dir("cli_tr");
    REQUIRE(cli("datagen --n 2 --canvas 64 --out \"" + (dir / "d").string() + "\"", dir / "log").code == 0);
    const Run r = cli("train --stage 2 --data \"" + (dir / "d").string() + "\" --ckpt \"" + (dir / "ck").string() + "\"",
                      dir / "log");
    CHECK(r.code == 1);
    CHECK(r.err.find("train --stage 0") != std::string::npos);
}

TEST_CASE("loss traces repeat across runs and thread counts") {
    Fixture& f = fixture();
    const std::string base = "train --stage 0 --data \"" + f.data.string() + "\" --split all --ckpt \"";
    REQUIRE(cli(base + (f.dir / "r1").string() + "\" " + kTiny, f.log).code == 0);
    REQUIRE(cli("--threads 2 " + base + (f.dir / "r2").string() + "\" " + kTiny, f.log).code == 0);
    const std::string a = strip_comments(testutil::read_file(f.dir / "r1" / "loss_stage0.csv"));
    const std::string b = strip_comments(testutil::read_file(f.dir / "r2" / "loss_stage0.csv"));
    CHECK(count_rows(a) == 4);
    CHECK(a == b);
    // The checkpoints embed the run config (which records the thread count),
    // so compare the weights themselves.
    auto w1 = flow::load_checkpoint(f.dir / "r1" / "sr.ckpt");
    auto w2 = flow::load_checkpoint(f.dir / "r2" / "sr.ckpt");
    std::vector<flow::Matrix<float>> t1, t2;
    w1.for_each([&](const std::string&, flow::Matrix<float>& m) { t1.push_back(m); });
    w2.for_each([&](const std::string&, flow::Matrix<float>& m) { t2.push_back(m); });
    CHECK(t1 == t2);
}

TEST_CASE("sr is deterministic and --no-ref equals zero reference layers") {
    Fixture& f = fixture();
    const Manifest m = Manifest::load(f.data / "manifest.csv");
    const std::string in = (f.data / m.rows[0].lr_path).string();
    const std::string ref = (f.data / m.rows[0].ref_path).string();
    const std::string common = "sr --ckpt \"" + f.ckpt.string() + "\" --input \"" + in + "\" --seed 3 ";

    REQUIRE(cli(common + "--ref \"" + ref + "\" --out \"" + (f.dir / "a.png").string() + "\"", f.log).code == 0);
    REQUIRE(cli("--threads 4 " + common + "--ref \"" + ref + "\" --out \"" + (f.dir / "b.png").string() + "\"", f.log)
                .code == 0);
    CHECK(testutil::read_file(f.dir / "a.png") == testutil::read_file(f.dir / "b.png"));
    const Image out = load_image(f.dir / "a.png");
    CHECK(out.width == 64);
    CHECK(out.height == 64);

    REQUIRE(cli(common + "--no-ref --out \"" + (f.dir / "n.png").string() + "\"", f.log).code == 0);
    REQUIRE(cli(common + "--ref \"" + ref + "\" --ref-layers 0 --out \"" + (f.dir / "z.png").string() + "\"", f.log)
                .code == 0);
    CHECK(testutil::read_file(f.dir / "n.png") == testutil::read_file(f.dir / "z.png"));

    CHECK(cli(common + "--out \"" + (f.dir / "x.png").string() + "\"", f.log).code == 1);
}

TEST_CASE("sr tiles a 512x384 input into 15 windows at tile 1024 / step 256") {
    Fixture& f = fixture();
    const Image lr = testutil::texture(512, 384, 5);
    save_image(lr, f.dir / "big.png");
    save_image(testutil::texture(512, 384, 6), f.dir / "bigref.png");
    const Run r = cli("sr --ckpt \"" + f.ckpt.string() + "\" --input \"" + (f.dir / "big.png").string() + "\" --ref \"" +
                          (f.dir / "bigref.png").string() + "\" --scale 4 --tile 1024 --tile-step 256 --mask white --out \"" +
                          (f.dir / "big_sr.png").string() + "\"",
                      f.log);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(r.err.find("processed 15 tiles (2048x1536, tile 1024, step 256)") != std::string::npos);
    const Image out = load_image(f.dir / "big_sr.png");
    CHECK(out.width == 2048);
    CHECK(out.height == 1536);
}

TEST_CASE("eval scores a directory of outputs") {
    Fixture& f = fixture();
    const Run r = cli("sr --ckpt \"" + f.ckpt.string() + "\" --manifest \"" + f.data.string() +
                          "\" --split all --no-ref --out-dir \"" + (f.dir / "sisr").string() + "\"",
                      f.log);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    REQUIRE(cli("eval --manifest \"" + f.data.string() + "\" --outputs \"" + (f.dir / "sisr").string() +
                    "\" --method sisr --split all --out \"" + (f.dir / "eval.csv").string() + "\"",
                f.log)
                .code == 0);
    const Manifest m = Manifest::load(f.data / "manifest.csv");
    const EvalReport direct = eval_run(m, f.dir / "sisr", "sisr", "all");
    const std::string csv = testutil::read_file(f.dir / "eval.csv");
    CHECK(count_rows(csv) == int(m.rows.size()) + 1);
    char mean[64];
    std::snprintf(mean, sizeof(mean), "MEAN,sisr,%.6f", direct.mean_psnr);
    CHECK(csv.find(mean) != std::string::npos);

    CHECK(cli("eval --manifest \"" + f.data.string() + "\" --outputs \"" + (f.dir / "nothing").string() +
                  "\" --split all --out \"" + (f.dir / "e2.csv").string() + "\"",
              f.log)
              .code == 1);
}

TEST_CASE("ablate emits one row per configuration and kscale") {
    Fixture& f = fixture();
    const fs::path out = f.dir / "ablate";
    const Run r = cli("ablate --ckpt \"" + f.ckpt.string() + "\" --manifest \"" + f.data.string() +
                          "\" --split all --configs sisr,rb,rb_m_w --kscales 0,0.5,1 --out-dir \"" + out.string() + "\"",
                      f.log);
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const std::string csv = strip_comments(testutil::read_file(out / "ablation.csv"));
    CHECK(csv.rfind("config,rb,m,w,kscale,n,psnr,ssim\n", 0) == 0);
    CHECK(count_rows(csv) == 1 + 3 + 3);
    CHECK(csv.find("\nrb_m_w,1,1,1,0.5,6,") != std::string::npos);
    CHECK(csv.find("\nrb,1,0,0,0,6,") != std::string::npos);

    // The RB-off row is the plain SISR run.
    REQUIRE(cli("sr --ckpt \"" + f.ckpt.string() + "\" --manifest \"" + f.data.string() +
                    "\" --split all --no-ref --out-dir \"" + (f.dir / "sisr_ab").string() + "\"",
                f.log)
                .code == 0);
    const Manifest m = Manifest::load(f.data / "manifest.csv");
    for (const ManifestRow& row : m.rows)
        CHECK(testutil::read_file(out / "sisr" / output_name(row.id)) ==
              testutil::read_file(f.dir / "sisr_ab" / output_name(row.id)));
}

TEST_CASE("flags override the config file and --set overrides both") {
    testutil::TempDir dir("cli_cfg");
    testutil::write_file(dir / "c.cfg", "data.n=3\ndata.canvas=64\ndata.seed=1\n");
    REQUIRE(cli("--config \"" + (dir / "c.cfg").string() + "\" datagen --n 2 --out \"" + (dir / "a").string() + "\"",
                dir / "log")
                .code == 0);
    CHECK(Manifest::load(dir / "a" / "manifest.csv").rows.size() == 2);
    REQUIRE(cli("--config \"" + (dir / "c.cfg").string() + "\" --set data.n=4 datagen --n 2 --out \"" +
                    (dir / "b").string() + "\"",
                dir / "log")
                .code == 0);
    CHECK(Manifest::load(dir / "b" / "manifest.csv").rows.size() == 4);
    const std::string echo = testutil::read_file(dir / "a" / "run.cfg");
    CHECK(echo.find("data.canvas=64") != std::string::npos);
}
