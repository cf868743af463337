// refsr: dataset generation, staged training, tiled SISR/RefSR inference,
// matching debug output, evaluation and ablation sweeps.
//
// Configuration precedence: command-line flags > --config file > defaults.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>

#include <chrono>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "refsr/datagen.hpp"
#include "refsr/error.hpp"
#include "refsr/field.hpp"
#include "refsr/kvconfig.hpp"
#include "refsr/matching.hpp"
#include "refsr/metrics.hpp"
#include "refsr/pipeline.hpp"
#include "refsr/train.hpp"

namespace fs = std::filesystem;
using namespace refsr;

namespace {

KeyValueConfig default_run_config() {
    KeyValueConfig kv;
    kv.merge(flow::ModelConfig{}.to_kv(), "model");
    kv.merge(train::TrainConfig{}.to_kv(), "train");
    kv.merge(DegradationConfig{}.to_kv(), "degrade");
    kv.merge(MatchConfig{}.to_kv(), "match");
    const DatasetOptions data;
    kv.set("data.n", 64);
    kv.set("data.seed", 0);
    kv.set("data.canvas", data.canvas);
    kv.set("data.corner_perturbation", data.corner_perturbation);
    kv.set("data.photometric", data.photometric);
    kv.set("sr.mode", std::string("aligned"));
    kv.set("sr.mask", std::string("auto"));
    kv.set("sr.scale", 4);
    kv.set("sr.tile", 0);
    kv.set("sr.step", 0);
    kv.set("sr.seed", 0);
    kv.set("threads", 1);
    return kv;
}

// Command-line options that override one RunConfig key each.
class KvBinder {
public:
    CLI::Option* option(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
        Slot& s = slots_.emplace_back();
        s.key = key;
        s.opt = app->add_option(flag, s.value, help);
        return s.opt;
    }
    // Flag that stores a fixed value when present.
    CLI::Option* flag(CLI::App* app, const std::string& flag, const std::string& key, const std::string& value,
                      const std::string& help) {
        Slot& s = slots_.emplace_back();
        s.key = key;
        s.value = value;
        s.opt = app->add_flag(flag, help);
        return s.opt;
    }
    void apply(KeyValueConfig& kv) const {
        for (const Slot& s : slots_)
            if (s.opt->count() > 0) kv.set(s.key, s.value);
    }

private:
    struct Slot {
        std::string key;
        std::string value;
        CLI::Option* opt = nullptr;
    };
    std::deque<Slot> slots_;
};

struct Globals {
    std::string config_file;
    std::vector<std::string> sets;
};

KeyValueConfig resolve(const Globals& g, const KvBinder& binder) {
    KeyValueConfig kv = default_run_config();
    if (!g.config_file.empty()) kv.merge(KeyValueConfig::load(g.config_file));
    binder.apply(kv);
    for (const std::string& s : g.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) fail(ErrorCode::InvalidArgument, "--set expects key=value: " + s);
        kv.set(s.substr(0, eq), s.substr(eq + 1));
    }
    return kv;
}

fs::path manifest_path(const fs::path& p) { return fs::is_directory(p) ? p / "manifest.csv" : p; }

DatasetOptions dataset_options(const KeyValueConfig& kv) {
    DatasetOptions o;
    o.canvas = int(kv.get_int("data.canvas", o.canvas));
    o.corner_perturbation = kv.get_double("data.corner_perturbation", o.corner_perturbation);
    o.photometric = kv.get_double("data.photometric", o.photometric);
    o.degradation = DegradationConfig::from_kv(kv.section("degrade"));
    return o;
}

RefMode parse_mode(const std::string& s) {
    if (s == "none") return RefMode::none;
    if (s == "relative") return RefMode::relative;
    if (s == "region_resize") return RefMode::region_resize;
    if (s == "aligned") return RefMode::aligned;
    fail(ErrorCode::InvalidArgument, "unknown sr.mode " + s);
}

SrOptions sr_options(const KeyValueConfig& kv, const fs::path& ckpt_dir) {
    SrOptions o;
    o.mode = parse_mode(kv.get_string("sr.mode", "aligned"));
    if (kv.has("sr.kscale")) o.kscale = kv.get_double("sr.kscale", 1.0);
    if (kv.has("sr.ref_layers")) o.ref_layers = int(kv.get_int("sr.ref_layers", 0));
    o.scale = int(kv.get_int("sr.scale", o.scale));
    o.tile = int(kv.get_int("sr.tile", 0));
    o.step = int(kv.get_int("sr.step", 0));
    o.seed = static_cast<std::uint64_t>(kv.get_int("sr.seed", 0));
    o.threads = int(kv.get_int("threads", 1));
    const std::string mask = kv.get_string("sr.mask", "auto");
    if (mask == "white")
        o.mask = MaskMode::white;
    else if (mask == "sisr")
        o.mask = MaskMode::sisr;
    else if (mask == "auto")
        o.mask = fs::exists(train::checkpoint_path(ckpt_dir, flow::BranchKind::lr)) ? MaskMode::sisr : MaskMode::white;
    else
        fail(ErrorCode::InvalidArgument, "unknown sr.mask " + mask);
    o.match = MatchConfig::from_kv(kv.section("match"));
    return o;
}

void write_echo(const KeyValueConfig& kv, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    kv.save(path);
}

void log(const std::string& cmd, const std::string& msg) { std::cerr << "[" << cmd << "] " << msg << '\n'; }

// ---------------------------------------------------------------------------

int cmd_datagen(const KeyValueConfig& kv, const fs::path& out) {
    const int n = int(kv.get_int("data.n", 64));
    const auto seed = static_cast<std::uint64_t>(kv.get_int("data.seed", 0));
    const Manifest m = build_dataset(n, seed, out, dataset_options(kv));
    write_echo(kv, out / "run.cfg");
    log("datagen", "wrote " + std::to_string(m.rows.size()) + " triplets to " + out.string());
    return 0;
}

int cmd_train(const KeyValueConfig& kv, const fs::path& data, const fs::path& ckpt, const std::string& split,
              std::string loss_csv) {
    const train::TrainConfig tc = [&] {
        train::TrainConfig c = train::TrainConfig::from_kv(kv.section("train"));
        c.threads = int(kv.get_int("threads", 1));
        c.validate();
        return c;
    }();
    const flow::ModelConfig mc = flow::ModelConfig::from_kv(kv.section("model"));
    // Fail on missing prerequisites before spending time on data.
    if (tc.stage >= 1 && !fs::exists(train::checkpoint_path(ckpt, flow::BranchKind::sr)))
        fail(ErrorCode::MissingCheckpoint, "missing " + train::checkpoint_path(ckpt, flow::BranchKind::sr).string() +
                                               "; run `train --stage 0` first");
    if (tc.stage == 2 && !fs::exists(train::checkpoint_path(ckpt, flow::BranchKind::lr)))
        fail(ErrorCode::MissingCheckpoint, "missing " + train::checkpoint_path(ckpt, flow::BranchKind::lr).string() +
                                               "; run `train --stage 1` first");
    const Manifest manifest = Manifest::load(manifest_path(data));
    const auto t0 = std::chrono::steady_clock::now();
    const auto triplets =
        train::prepare_triplets(manifest, split, MatchConfig::from_kv(kv.section("match")), tc.stage == 2);
    if (loss_csv.empty()) loss_csv = (ckpt / ("loss_stage" + std::to_string(tc.stage) + ".csv")).string();
    const auto res = train::run_stage(triplets, tc, mc, ckpt, loss_csv, kv.to_string());
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream msg;
    msg << "stage " << tc.stage << ": " << res.trace.size() << " steps on " << triplets.size() << " samples, final loss "
        << res.trace.back().loss << ", " << secs << " s";
    log("train", msg.str());
    return 0;
}

void save_sr_output(const SrResult& r, const KeyValueConfig& kv, const fs::path& out) {
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_image(r.image, out);
    write_echo(kv, fs::path(out.string() + ".cfg"));
}

int cmd_sr(const KeyValueConfig& kv, const fs::path& ckpt, const std::string& input, const std::string& ref_path,
           const std::string& out, const std::string& manifest, const std::string& split, const std::string& out_dir) {
    const flow::ModelWeights model = train::load_model(ckpt);
    const SrOptions opts = sr_options(kv, ckpt);
    const bool need_ref = opts.mode != RefMode::none;
    if (!manifest.empty()) {
        if (out_dir.empty()) fail(ErrorCode::InvalidArgument, "--out-dir is required with --manifest");
        const Manifest m = Manifest::load(manifest_path(manifest));
        const auto rows = m.split(split);
        if (rows.empty()) fail(ErrorCode::EmptySplit, "split '" + split + "' has no rows");
        std::size_t tiles = 0;
        for (const ManifestRow& row : rows) {
            const Image lr = load_image(m.root / row.lr_path);
            Image ref;
            if (need_ref) ref = load_image(m.root / row.ref_path);
            const SrResult r = super_resolve_image(lr, need_ref ? &ref : nullptr, model, opts);
            tiles += r.plan.rects.size();
            fs::create_directories(out_dir);
            save_image(r.image, fs::path(out_dir) / output_name(row.id));
        }
        write_echo(kv, fs::path(out_dir) / "run.cfg");
        log("sr", "processed " + std::to_string(rows.size()) + " images, " + std::to_string(tiles) + " tiles");
        return 0;
    }
    if (input.empty() || out.empty()) fail(ErrorCode::InvalidArgument, "--input and --out are required");
    if (need_ref && ref_path.empty()) fail(ErrorCode::InvalidArgument, "--ref is required unless --no-ref is given");
    const Image lr = load_image(input);
    Image ref;
    if (need_ref) ref = load_image(ref_path);
    const SrResult r = super_resolve_image(lr, need_ref ? &ref : nullptr, model, opts);
    log("sr", "processed " + std::to_string(r.plan.rects.size()) + " tiles (" + std::to_string(r.plan.image_w) + "x" +
                  std::to_string(r.plan.image_h) + ", tile " + std::to_string(r.plan.tile) + ", step " +
                  std::to_string(r.plan.step) + ")");
    if (r.fallback_tiles > 0) log("sr", std::to_string(r.fallback_tiles) + " tiles fell back to relative mode");
    save_sr_output(r, kv, out);
    return 0;
}

int cmd_match(const KeyValueConfig& kv, const std::string& input, const std::string& ref_path, const fs::path& out_dir) {
    const Image lr = load_image(input);
    const Image ref = load_image(ref_path);
    const int scale = int(kv.get_int("sr.scale", 4));
    const Image lr_up = resize_bicubic(lr, lr.width * scale, lr.height * scale);
    const MatchConfig mc = fit_to_image(MatchConfig::from_kv(kv.section("match")), lr_up.width, lr_up.height);
    const CorrespondenceField field =
        upscale_field(coarse_match(lr_up, ref, mc), lr_up.width, lr_up.height);
    fs::create_directories(out_dir);
    save_image(certainty_image(field), out_dir / "certainty.png");
    save_image(warp_bilinear(ref, field), out_dir / "warped.png");
    save_field(field, out_dir / "field.bin");
    write_echo(kv, out_dir / "run.cfg");
    std::ostringstream msg;
    msg << "mean certainty " << field.mean_certainty();
    log("match", msg.str());
    return 0;
}

int cmd_eval(const KeyValueConfig& kv, const fs::path& manifest, const fs::path& outputs, const std::string& method,
             const std::string& split, const fs::path& out) {
    const Manifest m = Manifest::load(manifest_path(manifest));
    EvalReport report = eval_run(m, outputs, method, split);
    KeyValueConfig echo = KeyValueConfig::parse(report.config_echo);
    echo.merge(kv, "run");
    report.config_echo = echo.to_string();
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    report.save(out);
    std::ostringstream msg;
    msg << method << ": " << report.rows.size() << " images, PSNR " << report.mean_psnr << " dB, SSIM "
        << report.mean_ssim;
    log("eval", msg.str());
    return 0;
}

struct AblationRow {
    std::string name;
    RefMode mode;
    double kscale;
    EvalReport report;
};

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

int cmd_ablate(const KeyValueConfig& kv, const fs::path& ckpt, const fs::path& manifest, const std::string& split,
               const fs::path& out_dir, const std::string& configs, const std::string& kscales) {
    const flow::ModelWeights model = train::load_model(ckpt);
    const Manifest m = Manifest::load(manifest_path(manifest));
    const auto rows = m.split(split);
    if (rows.empty()) fail(ErrorCode::EmptySplit, "split '" + split + "' has no rows");
    const SrOptions base = sr_options(kv, ckpt);

    std::vector<double> ks;
    for (const std::string& k : split_list(kscales)) ks.push_back(std::stod(k));
    if (ks.empty()) fail(ErrorCode::InvalidArgument, "empty kscale grid");

    std::vector<AblationRow> table;
    for (const std::string& c : split_list(configs)) {
        RefMode mode;
        if (c == "sisr")
            mode = RefMode::none;
        else if (c == "rb")
            mode = RefMode::relative;
        else if (c == "rb_m")
            mode = RefMode::region_resize;
        else if (c == "rb_m_w")
            mode = RefMode::aligned;
        else
            fail(ErrorCode::InvalidArgument, "unknown ablation config " + c + " (sisr, rb, rb_m, rb_m_w)");
        // The SISR row does not depend on kscale.
        const std::vector<double> grid = mode == RefMode::none ? std::vector<double>{ks.front()} : ks;
        for (double k : grid) {
            SrOptions o = base;
            o.mode = mode;
            o.kscale = k;
            std::ostringstream name;
            name << c;
            if (mode != RefMode::none) name << "_k" << format_double(k);
            const fs::path dir = out_dir / name.str();
            fs::create_directories(dir);
            for (const ManifestRow& row : rows) {
                const Image lr = load_image(m.root / row.lr_path);
                Image ref;
                if (mode != RefMode::none) ref = load_image(m.root / row.ref_path);
                const SrResult r = super_resolve_image(lr, mode != RefMode::none ? &ref : nullptr, model, o);
                save_image(r.image, dir / output_name(row.id));
            }
            EvalReport rep = eval_run(m, dir, name.str(), split);
            rep.save(dir / "eval.csv");
            std::ostringstream msg;
            msg << name.str() << ": PSNR " << rep.mean_psnr << " dB, SSIM " << rep.mean_ssim;
            log("ablate", msg.str());
            table.push_back({c, mode, mode == RefMode::none ? 0.0 : k, std::move(rep)});
        }
    }
    fs::create_directories(out_dir);
    std::ofstream csv(out_dir / "ablation.csv");
    if (!csv) fail(ErrorCode::Unwritable, (out_dir / "ablation.csv").string());
    std::istringstream echo(kv.to_string());
    for (std::string line; std::getline(echo, line);)
        if (!line.empty()) csv << "# " << line << '\n';
    csv << "config,rb,m,w,kscale,n,psnr,ssim\n";
    char buf[256];
    for (const AblationRow& r : table) {
        const bool rb = r.mode != RefMode::none;
        const bool mt = r.mode == RefMode::region_resize || r.mode == RefMode::aligned;
        const bool w = r.mode == RefMode::aligned;
        std::snprintf(buf, sizeof(buf), "%s,%d,%d,%d,%s,%zu,%.6f,%.6f\n", r.name.c_str(), rb, mt, w,
                      rb ? format_double(r.kscale).c_str() : "", r.report.rows.size(), r.report.mean_psnr,
                      r.report.mean_ssim);
        csv << buf;
    }
    if (!csv) fail(ErrorCode::Unwritable, (out_dir / "ablation.csv").string());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Reference-based super-resolution toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config_file, "key=value config file (overridden by flags)")->check(CLI::ExistingFile);
    app.add_option("--set", g.sets, "extra key=value override, repeatable");
    KvBinder kvb;
    kvb.option(&app, "--threads", "threads", "worker threads");

    // datagen
    auto* datagen = app.add_subcommand("datagen", "generate a synthetic HR/ref/LR dataset");
    std::string dg_out;
    datagen->add_option("--out", dg_out, "output directory")->required();
    kvb.option(datagen, "--n", "data.n", "number of triplets");
    kvb.option(datagen, "--seed", "data.seed", "base seed");
    kvb.option(datagen, "--canvas", "data.canvas", "HR size in pixels");

    // train
    auto* trn = app.add_subcommand("train", "run one training stage");
    std::string tr_data, tr_ckpt = "ckpt", tr_split = "train", tr_loss;
    kvb.option(trn, "--stage", "train.stage", "0 (SR), 1 (LR) or 2 (reference)")->required();
    trn->add_option("--data", tr_data, "dataset directory or manifest.csv")->required();
    trn->add_option("--ckpt", tr_ckpt, "checkpoint directory");
    trn->add_option("--split", tr_split, "manifest split to train on");
    trn->add_option("--loss-csv", tr_loss, "loss trace path (default <ckpt>/loss_stage<N>.csv)");
    kvb.option(trn, "--steps", "train.steps", "optimizer steps");
    kvb.option(trn, "--batch", "train.batch", "batch size");
    kvb.option(trn, "--lr", "train.learning_rate", "peak learning rate");
    kvb.option(trn, "--warmup", "train.warmup_steps", "linear warmup steps");
    kvb.option(trn, "--grad-clip", "train.grad_clip", "gradient-norm clip");
    kvb.option(trn, "--seed", "train.seed", "training seed");
    kvb.option(trn, "--image-size", "model.image_size", "training window");
    kvb.option(trn, "--patch", "model.patch", "patch size");
    kvb.option(trn, "--dim", "model.dim", "token width");
    kvb.option(trn, "--heads", "model.heads", "attention heads");
    kvb.option(trn, "--layers", "model.layers", "transformer depth");
    kvb.option(trn, "--ref-layers", "model.ref_layers", "reference injection depth");
    kvb.option(trn, "--sample-steps", "model.sample_steps", "Euler steps used at inference");
    bool no_augment = false;
    trn->add_flag("--no-augment", no_augment, "disable every augmentation");

    // sr
    auto* sr = app.add_subcommand("sr", "super-resolve one image or a manifest split");
    std::string sr_ckpt = "ckpt", sr_in, sr_ref, sr_out, sr_manifest, sr_split = "test", sr_outdir;
    sr->add_option("--ckpt", sr_ckpt, "checkpoint directory");
    sr->add_option("--input", sr_in, "LR input image");
    sr->add_option("--ref", sr_ref, "reference image");
    sr->add_option("--out", sr_out, "output image");
    sr->add_option("--manifest", sr_manifest, "dataset directory or manifest.csv (batch mode)");
    sr->add_option("--split", sr_split, "split for batch mode");
    sr->add_option("--out-dir", sr_outdir, "output directory for batch mode");
    kvb.flag(sr, "--no-ref", "sr.mode", "none", "SISR path, reference ignored");
    kvb.flag(sr, "--no-match", "sr.mode", "relative", "skip matching; relative reference crops");
    kvb.flag(sr, "--no-warp", "sr.mode", "region_resize", "match but do not warp; resized bounding regions");
    kvb.option(sr, "--kscale", "sr.kscale", "reference key scale in [0,1]");
    kvb.option(sr, "--ref-layers", "sr.ref_layers", "reference injection depth");
    kvb.option(sr, "--tile", "sr.tile", "tile size (default: model window)");
    kvb.option(sr, "--tile-step", "sr.step", "tile stride (default: 3/4 tile)");
    kvb.option(sr, "--seed", "sr.seed", "sampling seed");
    kvb.option(sr, "--mask", "sr.mask", "low-certainty fill: white or sisr")->check(CLI::IsMember({"white", "sisr"}));
    kvb.option(sr, "--scale", "sr.scale", "magnification");

    // match
    auto* mt = app.add_subcommand("match", "debug: certainty heat map and warped reference");
    std::string mt_in, mt_ref, mt_out;
    mt->add_option("--input", mt_in, "LR image")->required();
    mt->add_option("--ref", mt_ref, "reference image")->required();
    mt->add_option("--out-dir", mt_out, "output directory")->required();
    kvb.option(mt, "--scale", "sr.scale", "magnification");

    // eval
    auto* ev = app.add_subcommand("eval", "score a method's outputs against HR");
    std::string ev_manifest, ev_outputs, ev_method = "method", ev_split = "test", ev_out;
    ev->add_option("--manifest", ev_manifest, "dataset directory or manifest.csv")->required();
    ev->add_option("--outputs", ev_outputs, "directory of <id>.png outputs")->required();
    ev->add_option("--method", ev_method, "method label");
    ev->add_option("--split", ev_split, "split to evaluate ('all' for every row)");
    ev->add_option("--out", ev_out, "report CSV")->required();

    // ablate
    auto* ab = app.add_subcommand("ablate", "RB / M / W x kscale sweep over a split");
    std::string ab_ckpt = "ckpt", ab_manifest, ab_split = "test", ab_out, ab_configs = "sisr,rb,rb_m,rb_m_w",
                ab_kscales = "1";
    ab->add_option("--ckpt", ab_ckpt, "checkpoint directory");
    ab->add_option("--manifest", ab_manifest, "dataset directory or manifest.csv")->required();
    ab->add_option("--split", ab_split, "split to run");
    ab->add_option("--out-dir", ab_out, "output directory")->required();
    ab->add_option("--configs", ab_configs, "comma list of sisr, rb, rb_m, rb_m_w");
    ab->add_option("--kscales", ab_kscales, "comma list of kscale values");
    kvb.option(ab, "--tile", "sr.tile", "tile size");
    kvb.option(ab, "--tile-step", "sr.step", "tile stride");
    kvb.option(ab, "--seed", "sr.seed", "sampling seed");
    kvb.option(ab, "--mask", "sr.mask", "white or sisr")->check(CLI::IsMember({"white", "sisr"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        KeyValueConfig kv = resolve(g, kvb);
        if (no_augment)
            for (const char* k : {"augment.flip", "augment.crop", "augment.color_jitter", "augment.homography"})
                kv.set(std::string("train.") + k, false);
        if (*datagen) return cmd_datagen(kv, dg_out);
        if (*trn) return cmd_train(kv, tr_data, tr_ckpt, tr_split, tr_loss);
        if (*sr) return cmd_sr(kv, sr_ckpt, sr_in, sr_ref, sr_out, sr_manifest, sr_split, sr_outdir);
        if (*mt) return cmd_match(kv, mt_in, mt_ref, mt_out);
        if (*ev) return cmd_eval(kv, ev_manifest, ev_outputs, ev_method, ev_split, ev_out);
        if (*ab) return cmd_ablate(kv, ab_ckpt, ab_manifest, ab_split, ab_out, ab_configs, ab_kscales);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
