// Command-line front end for the prune-and-refine pipeline:
//   synth | prune | render | eval | stats | train | refine | report
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "pointsplat/camera.hpp"
#include "pointsplat/checkpoint.hpp"
#include "pointsplat/config.hpp"
#include "pointsplat/encoder.hpp"
#include "pointsplat/image.hpp"
#include "pointsplat/metrics.hpp"
#include "pointsplat/ply.hpp"
#include "pointsplat/pruner.hpp"
#include "pointsplat/rasterizer.hpp"
#include "pointsplat/refiner.hpp"
#include "pointsplat/synthscene.hpp"

namespace fs = std::filesystem;
using namespace pointsplat;

namespace {

// Exit codes: 0 ok, 1 internal, 2 usage/bad argument, 3 missing file or I/O,
// 4 config parse, 5 data format, 6 runtime (e.g. training divergence).
enum ExitCode { kOk = 0, kInternal = 1, kUsage = 2, kIo = 3, kConfig = 4, kData = 5, kRuntime = 6 };

std::string view_name(int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "view_%03d", i);
    return buf;
}

void write_view(const Image& img, const fs::path& dir, int index, bool float_dump) {
    write_png(img, (dir / (view_name(index) + ".png")).string());
    if (float_dump) write_f32(img, (dir / (view_name(index) + ".f32")).string());
}

Image load_view(const fs::path& stem_path) {
    fs::path f32 = stem_path;
    f32 += ".f32";
    if (fs::exists(f32)) return read_f32(f32.string());
    fs::path png = stem_path;
    png += ".png";
    if (fs::exists(png)) return read_png(png.string());
    throw std::runtime_error("cannot open '" + stem_path.string() + "' (.f32 or .png)");
}

PruneConfig prune_config_from_kv(const KeyValues& kv) {
    PruneConfig pc;
    pc.lambda_alpha = kv.get_double("lambda_alpha", 0.3);
    if (kv.has("keep_count"))
        pc.keep_count = static_cast<size_t>(kv.get_int("keep_count", 1));
    else
        pc.keep_fraction = kv.get_double("keep_fraction", 0.5);
    pc.volume_space = kv.get_string("volume_space", "raw") == "log" ? VolumeSpace::log
                                                                    : VolumeSpace::raw;
    return pc;
}

TrainConfig train_config_from_kv(const KeyValues& kv) {
    TrainConfig tc;
    tc.iterations = static_cast<int>(kv.get_int("iterations", tc.iterations));
    tc.lr = kv.get_double("lr", tc.lr);
    tc.lr_drop_iter = static_cast<int>(kv.get_int("lr_drop_iter", tc.lr_drop_iter));
    tc.lr_drop_factor = kv.get_double("lr_drop_factor", tc.lr_drop_factor);
    tc.perceptual_weight = kv.get_double("perceptual_weight", tc.perceptual_weight);
    tc.views_per_step = static_cast<int>(kv.get_int("views_per_step", tc.views_per_step));
    tc.seed = static_cast<uint64_t>(kv.get_int("seed", 0));
    return tc;
}

SceneData load_scene_dir(const fs::path& dir) {
    SceneData sd;
    sd.dense = read_ply((dir / "scene.ply").string());
    sd.cameras = load_cameras((dir / "cameras.txt").string());
    for (size_t v = 0; v < sd.cameras.size(); ++v)
        sd.targets.push_back(load_view(dir / "gt" / view_name(static_cast<int>(v))));
    return sd;
}

int cmd_synth(const std::string& spec_path, const std::string& out_dir, long long seed_override) {
    KeyValues kv = KeyValues::parse_file(spec_path);
    SceneSpec spec = SceneSpec::from_kv(kv);
    if (seed_override >= 0) spec.seed = static_cast<uint64_t>(seed_override);
    Scene scene = generate(spec);

    fs::create_directories(fs::path(out_dir) / "gt");
    write_ply(scene.cloud, (fs::path(out_dir) / "scene.ply").string());
    save_cameras(scene.cameras, (fs::path(out_dir) / "cameras.txt").string());
    for (size_t v = 0; v < scene.cameras.size(); ++v) {
        RenderOutput out = rasterize(scene.cloud, scene.cameras[v].camera);
        write_view(out.rgb, fs::path(out_dir) / "gt", static_cast<int>(v), true);
    }
    std::ofstream spec_copy(fs::path(out_dir) / "spec.txt");
    spec_copy << kv.serialize();
    std::cout << "scene: " << scene.cloud.size() << " gaussians, " << scene.cameras.size()
              << " cameras -> " << out_dir << "\n";
    return kOk;
}

int cmd_prune(const std::string& in, const std::string& out, double lambda_alpha,
              double keep_fraction, long long keep_count, const std::string& volume_space,
              const std::string& report_csv) {
    GaussianCloud cloud = read_ply(in);
    PruneConfig pc;
    pc.lambda_alpha = lambda_alpha;
    if (keep_count > 0)
        pc.keep_count = static_cast<size_t>(keep_count);
    else
        pc.keep_fraction = keep_fraction;
    if (volume_space == "log")
        pc.volume_space = VolumeSpace::log;
    else if (volume_space != "raw")
        throw std::invalid_argument("--volume-space must be raw or log");
    auto [pruned, rep] = prune(cloud, pc);
    write_ply(pruned, out);
    if (!report_csv.empty()) write_score_csv(cloud, rep, report_csv);
    std::cout << report_summary(rep);
    return kOk;
}

int cmd_render(const std::string& in, const std::string& cameras_path, const std::string& out_dir,
               bool float_dump, double near, double far) {
    GaussianCloud cloud = read_ply(in);
    auto cams = load_cameras(cameras_path);
    fs::create_directories(out_dir);
    for (size_t v = 0; v < cams.size(); ++v) {
        Camera cam = cams[v].camera;
        cam.near = near;
        cam.far = far;
        RenderOutput out = rasterize(cloud, cam);
        write_view(out.rgb, out_dir, static_cast<int>(v), float_dump);
    }
    std::cout << "rendered " << cams.size() << " views -> " << out_dir << "\n";
    return kOk;
}

int cmd_eval(const std::string& renders_dir, const std::string& targets_dir,
             const std::string& report_path) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(renders_dir)) {
        if (!e.is_regular_file()) continue;
        fs::path p = e.path();
        if (p.extension() == ".f32" || p.extension() == ".png") {
            std::string stem = p.stem().string();
            if (std::find(names.begin(), names.end(), stem) == names.end()) names.push_back(stem);
        }
    }
    std::sort(names.begin(), names.end());
    if (names.empty()) throw std::runtime_error("no renders found in '" + renders_dir + "'");
    std::vector<Image> renders, targets;
    for (const auto& n : names) {
        renders.push_back(load_view(fs::path(renders_dir) / n));
        targets.push_back(load_view(fs::path(targets_dir) / n));
    }
    MetricReport rep = evaluate_views(names, renders, targets);
    std::ofstream out(report_path);
    if (!out) throw std::runtime_error("cannot open '" + report_path + "' for writing");
    out << rep.to_text();
    std::cout << rep.to_text();
    return kOk;
}

std::vector<size_t> selected_from_csv(const std::string& csv_path) {
    std::ifstream in(csv_path);
    if (!in) throw std::runtime_error("cannot open '" + csv_path + "'");
    std::vector<size_t> selected;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::istringstream ls(line);
        std::string c;
        while (std::getline(ls, c, ',')) cols.push_back(c);
        if (cols.size() < 5) throw std::runtime_error("bad score CSV line: " + line);
        if (cols[4] == "1") selected.push_back(static_cast<size_t>(std::stoull(cols[0])));
    }
    return selected;
}

int cmd_stats(const std::string& in, const std::string& selected_csv, const std::string& out_csv) {
    GaussianCloud cloud = read_ply(in);
    std::vector<size_t> selected;
    if (!selected_csv.empty()) {
        selected = selected_from_csv(selected_csv);
    } else {
        selected.resize(cloud.size());
        for (size_t i = 0; i < selected.size(); ++i) selected[i] = i;
    }
    DistributionStats st = distribution_stats(cloud, selected);
    if (!out_csv.empty()) write_distribution_csv(st, out_csv);
    std::cout.precision(10);
    std::cout << "selected_count=" << st.selected_count << "\n"
              << "rejected_count=" << st.rejected_count << "\n"
              << "selected_median_opacity=" << st.selected_median_opacity << "\n"
              << "rejected_median_opacity=" << st.rejected_median_opacity << "\n"
              << "selected_median_log10_volume=" << st.selected_median_log_volume << "\n"
              << "rejected_median_log10_volume=" << st.rejected_median_log_volume << "\n";
    return kOk;
}

int cmd_train(const std::vector<std::string>& scene_dirs, const std::string& config_path,
              const std::string& checkpoint_path, long long seed_override) {
    KeyValues kv = KeyValues::parse_file(config_path);
    EncoderConfig enc;
    RefinerConfig ref;
    model_config_from_kv(kv, enc, ref);
    PruneConfig pc = prune_config_from_kv(kv);
    TrainConfig tc = train_config_from_kv(kv);
    if (seed_override >= 0) tc.seed = static_cast<uint64_t>(seed_override);

    std::vector<SceneData> scenes;
    for (const auto& dir : scene_dirs) scenes.push_back(load_scene_dir(dir));
    TrainResult result = train(scenes, pc, enc, ref, tc, &std::cout);
    save_checkpoint(result.params, model_config_to_kv(enc, ref), checkpoint_path);
    std::cout << "checkpoint -> " << checkpoint_path << "\n";
    return kOk;
}

int cmd_refine(const std::string& in, const std::string& checkpoint_path, const std::string& out) {
    GaussianCloud pruned = read_ply(in);
    auto [params, kv] = load_checkpoint(checkpoint_path);
    EncoderConfig enc;
    RefinerConfig ref;
    model_config_from_kv(kv, enc, ref);
    GaussianCloud refined = refine_cloud(pruned, enc, ref, params);
    write_ply(refined, out);
    std::cout << "refined " << refined.size() << " gaussians -> " << out << "\n";
    return kOk;
}

std::map<std::string, double> parse_eval_means(const fs::path& report) {
    std::ifstream in(report);
    if (!in) throw std::runtime_error("cannot open '" + report.string() + "'");
    std::string line, last;
    while (std::getline(in, line))
        if (line.rfind("mean ", 0) == 0) last = line;
    if (last.empty()) throw std::runtime_error("no mean line in '" + report.string() + "'");
    std::map<std::string, double> vals;
    std::istringstream ls(last.substr(5));
    std::string tok;
    while (ls >> tok) {
        size_t eq = tok.find('=');
        if (eq != std::string::npos) vals[tok.substr(0, eq)] = std::stod(tok.substr(eq + 1));
    }
    return vals;
}

int cmd_report(const std::string& runs_dir, const std::string& out_path) {
    std::vector<fs::path> runs;
    for (const auto& e : fs::directory_iterator(runs_dir))
        if (e.is_directory()) runs.push_back(e.path());
    std::sort(runs.begin(), runs.end());
    if (runs.empty()) throw std::runtime_error("no run directories in '" + runs_dir + "'");
    std::ostringstream md;
    md << "| Run | Method | PSNR | SSIM |\n|---|---|---|---|\n";
    md.precision(4);
    md << std::fixed;
    for (const auto& run : runs) {
        auto star = parse_eval_means(run / "eval_pruned.txt");
        auto full = parse_eval_means(run / "eval_refined.txt");
        md << "| " << run.filename().string() << " | PointSplat* | " << star["psnr"] << " | "
           << star["ssim"] << " |\n";
        md << "| " << run.filename().string() << " | PointSplat | " << full["psnr"] << " | "
           << full["ssim"] << " |\n";
    }
    if (out_path.empty() || out_path == "-") {
        std::cout << md.str();
    } else {
        std::ofstream out(out_path);
        if (!out) throw std::runtime_error("cannot open '" + out_path + "' for writing");
        out << md.str();
        std::cout << "report -> " << out_path << "\n";
    }
    return kOk;
}

int classify_and_report(const std::exception& e) {
    std::string what = e.what();
    std::string category = "internal";
    int code = kInternal;
    if (dynamic_cast<const ConfigError*>(&e)) {
        category = "config";
        code = kConfig;
    } else if (what.rfind("cannot open", 0) == 0) {
        category = "io";
        code = kIo;
    } else if (dynamic_cast<const PlyError*>(&e)) {
        category = "data";
        code = kData;
    } else if (dynamic_cast<const TrainingDiverged*>(&e)) {
        category = "runtime";
        code = kRuntime;
    } else if (dynamic_cast<const std::invalid_argument*>(&e)) {
        category = "usage";
        code = kUsage;
    } else if (dynamic_cast<const std::runtime_error*>(&e)) {
        category = "data";
        code = kData;
    }
    std::cerr << "error: category=" << category << " message=\"" << what << "\"\n";
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"3D Gaussian cloud prune-and-refine toolkit"};
    app.require_subcommand(1);

    long long seed = -1;
    app.add_option("--seed", seed, "Override the seed of any random stage");

    auto* synth = app.add_subcommand("synth", "Generate a synthetic scene with GT renders");
    std::string synth_spec, synth_out;
    synth->add_option("--spec", synth_spec, "Scene spec (key=value)")->required();
    synth->add_option("--out", synth_out, "Output directory")->required();

    auto* prune_cmd = app.add_subcommand("prune", "Score and prune a Gaussian cloud");
    std::string pr_in, pr_out, pr_space = "raw", pr_report;
    double pr_lambda = 0.3, pr_fraction = 0.5;
    long long pr_count = 0;
    prune_cmd->add_option("--in", pr_in)->required();
    prune_cmd->add_option("--out", pr_out)->required();
    prune_cmd->add_option("--lambda-alpha", pr_lambda, "Opacity/volume trade-off in [0,1]");
    prune_cmd->add_option("--keep-fraction", pr_fraction, "Fraction of Gaussians to keep");
    prune_cmd->add_option("--keep-count", pr_count, "Absolute number to keep (overrides fraction)");
    prune_cmd->add_option("--volume-space", pr_space, "raw or log");
    prune_cmd->add_option("--report", pr_report, "Per-Gaussian score CSV");

    auto* render = app.add_subcommand("render", "Render a cloud for a camera rig");
    std::string rd_in, rd_cams, rd_out;
    bool rd_dump = false;
    double rd_near = 0.05, rd_far = 100.0;
    render->add_option("--in", rd_in)->required();
    render->add_option("--cameras", rd_cams)->required();
    render->add_option("--out", rd_out)->required();
    render->add_flag("--float-dump", rd_dump, "Also write lossless float32 dumps");
    render->add_option("--near", rd_near);
    render->add_option("--far", rd_far);

    auto* eval = app.add_subcommand("eval", "PSNR/SSIM of renders against targets");
    std::string ev_renders, ev_targets, ev_report;
    eval->add_option("--renders", ev_renders)->required();
    eval->add_option("--targets", ev_targets)->required();
    eval->add_option("--report", ev_report)->required();

    auto* stats = app.add_subcommand("stats", "Opacity / log-volume distributions");
    std::string st_in, st_sel, st_out;
    stats->add_option("--in", st_in)->required();
    stats->add_option("--selected", st_sel, "Score CSV from prune --report");
    stats->add_option("--out", st_out, "Histogram CSV output");

    auto* train_cmd = app.add_subcommand("train", "Train the refinement network");
    std::vector<std::string> tr_scenes;
    std::string tr_config, tr_ckpt;
    train_cmd->add_option("--scenes", tr_scenes, "Scene directories (from synth)")->required();
    train_cmd->add_option("--config", tr_config)->required();
    train_cmd->add_option("--checkpoint", tr_ckpt, "Checkpoint output path")->required();

    auto* refine = app.add_subcommand("refine", "Apply a trained checkpoint to a pruned cloud");
    std::string rf_in, rf_ckpt, rf_out;
    refine->add_option("--in", rf_in)->required();
    refine->add_option("--checkpoint", rf_ckpt)->required();
    refine->add_option("--out", rf_out)->required();

    auto* report = app.add_subcommand("report", "Markdown summary over run directories");
    std::string rp_runs, rp_out;
    report->add_option("--runs", rp_runs)->required();
    report->add_option("--out", rp_out, "Output file ('-' for stdout)");

    try {
        app.parse(argc, argv);
        if (*synth) return cmd_synth(synth_spec, synth_out, seed);
        if (*prune_cmd)
            return cmd_prune(pr_in, pr_out, pr_lambda, pr_fraction, pr_count, pr_space, pr_report);
        if (*render) return cmd_render(rd_in, rd_cams, rd_out, rd_dump, rd_near, rd_far);
        if (*eval) return cmd_eval(ev_renders, ev_targets, ev_report);
        if (*stats) return cmd_stats(st_in, st_sel, st_out);
        if (*train_cmd) return cmd_train(tr_scenes, tr_config, tr_ckpt, seed);
        if (*refine) return cmd_refine(rf_in, rf_ckpt, rf_out);
        if (*report) return cmd_report(rp_runs, rp_out);
        return kUsage;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: category=usage message=\"" << e.what() << "\"\n";
        return kUsage;
    } catch (const std::exception& e) {
        return classify_and_report(e);
    }
}
