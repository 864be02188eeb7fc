#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fusionkit/align.hpp"
#include "fusionkit/fusion.hpp"
#include "fusionkit/harness.hpp"
#include "fusionkit/log.hpp"

namespace {

namespace fs = std::filesystem;
using namespace fusionkit;

struct SeedOption {
    uint64_t value = 0;
    CLI::Option* option = nullptr;

    void attach(CLI::App* cmd) { option = cmd->add_option("--seed", value, "Random seed"); }
    bool given() const { return option != nullptr && option->count() > 0; }
};

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Lidar-camera fusion toolkit: invertible augmentation, pillar voxelization, "
                 "cross-attention alignment and fusion-strategy pipelines on synthetic scenes"};
    app.require_subcommand(1);

    // gen-scene ---------------------------------------------------------------
    auto* gen = app.add_subcommand("gen-scene", "Generate a synthetic scene bundle");
    std::string gen_spec_path, gen_out;
    SeedOption gen_seed;
    gen->add_option("--spec", gen_spec_path, "Scene spec JSON")->required();
    gen->add_option("--out", gen_out, "Output scene directory")->required();
    gen_seed.attach(gen);
    gen->callback([&] {
        auto spec = harness::load_scene_spec(gen_spec_path);
        if (gen_seed.given()) spec.seed = gen_seed.value;
        const auto scene = harness::generate_scene(spec);
        fusion::save_scene(scene, gen_out);
        std::printf("scene: %zu points, %zu visible -> %s\n", scene.cloud.size(),
                    scene.correspondences ? scene.correspondences->size() : 0, gen_out.c_str());
    });

    // run ---------------------------------------------------------------------
    auto* run = app.add_subcommand("run", "Run a fusion strategy pipeline on a scene");
    std::string run_strategy, run_scene, run_config, run_out;
    SeedOption run_seed;
    run->add_option("--strategy", run_strategy, "single|input|late|deep")->required();
    run->add_option("--scene", run_scene, "Scene directory")->required();
    run->add_option("--config", run_config, "Fusion config JSON")->required();
    run->add_option("--out", run_out, "Output directory")->required();
    run_seed.attach(run);
    run->callback([&] {
        const auto scene = fusion::load_scene(run_scene);
        auto cfg = fusion::load_config_json(run_config);
        cfg.strategy = fusion::strategy_from_name(run_strategy);
        if (run_seed.given()) cfg.seed = run_seed.value;
        const auto out = fusion::run_strategy(scene, cfg);
        fusion::save_pipeline_output(out, cfg, run_out);
        std::printf("%s: %zu -> %zu points, %zu nonempty pillars, %dx%dx%d pseudo image -> %s\n",
                    fusion::strategy_name(cfg.strategy), out.points_in, out.points_after_aug,
                    out.nonempty_pillars, out.image.nx, out.image.ny, out.image.channels,
                    run_out.c_str());
    });

    // align-study ---------------------------------------------------------------
    auto* study = app.add_subcommand("align-study", "Reprojection-error vs augmentation study");
    std::string study_scene, study_out;
    std::vector<double> rotations{0.0, 15.0, 30.0, 45.0};
    std::vector<double> flips{0.0, 0.5, 1.0};
    int study_trials = 100;
    bool no_inverse_aug = false;
    SeedOption study_seed;
    study->add_option("--scene", study_scene, "Scene directory")->required();
    study->add_option("--rotations", rotations, "Max rotations in degrees")->delimiter(',');
    study->add_option("--flips", flips, "Flip probabilities")->delimiter(',');
    study->add_option("--trials", study_trials, "Trials per setting");
    study->add_flag("--no-inverse-aug", no_inverse_aug, "Locate pixels without inverting the record");
    study->add_option("--out", study_out, "Report CSV path")->required();
    study_seed.attach(study);
    study->callback([&] {
        const auto scene = fusion::load_scene(study_scene);
        const bool use_ia = !no_inverse_aug;
        harness::AlignmentReport report =
            harness::rotation_experiment(scene, rotations, use_ia, study_trials, study_seed.value);
        const auto flip_rows =
            harness::flip_experiment(scene, flips, use_ia, study_trials, study_seed.value);
        report.rows.insert(report.rows.end(), flip_rows.rows.begin(), flip_rows.rows.end());
        harness::save_report_csv(report, study_out);
        std::printf("align-study: %zu rows (inverse aug %s) -> %s\n", report.rows.size(),
                    use_ia ? "on" : "off", study_out.c_str());
    });

    // attn-dump -----------------------------------------------------------------
    auto* attn = app.add_subcommand("attn-dump", "Dump attention weights of a deep-fusion run");
    std::string attn_scene, attn_config, attn_out;
    SeedOption attn_seed;
    attn->add_option("--scene", attn_scene, "Scene directory")->required();
    attn->add_option("--config", attn_config, "Fusion config JSON")->required();
    attn->add_option("--out", attn_out, "Attention CSV path")->required();
    attn_seed.attach(attn);
    attn->callback([&] {
        const auto scene = fusion::load_scene(attn_scene);
        auto cfg = fusion::load_config_json(attn_config);
        cfg.strategy = fusion::Strategy::deep_fusion;
        if (attn_seed.given()) cfg.seed = attn_seed.value;
        std::vector<fusion::AttentionRow> rows;
        fusion::deep_fusion(scene, cfg, &rows);
        fusion::write_attention_csv(rows, attn_out);
        std::printf("attn-dump: %zu weights -> %s\n", rows.size(), attn_out.c_str());
    });

    // grad-check ------------------------------------------------------------------
    auto* grad = app.add_subcommand("grad-check", "Backward pass vs central finite differences");
    std::vector<int> grad_dims{4, 3, 8};
    std::vector<int> grad_hidden{6, 5};
    int grad_seeds = 100;
    double grad_eps = 1e-5;
    std::string grad_out;
    SeedOption grad_seed;
    grad->add_option("--dims", grad_dims, "d_lidar,d_camera,n_features")->delimiter(',');
    grad->add_option("--hidden", grad_hidden, "d_attn,d_mlp")->delimiter(',');
    grad->add_option("--seeds", grad_seeds, "Number of random instances");
    grad->add_option("--eps", grad_eps, "Finite-difference step");
    grad->add_option("--out", grad_out, "Per-seed CSV path")->required();
    grad_seed.attach(grad);
    grad->callback([&] {
        if (grad_dims.size() != 3) throw std::invalid_argument("--dims needs d_lidar,d_camera,n");
        if (grad_hidden.size() != 2) throw std::invalid_argument("--hidden needs d_attn,d_mlp");
        const auto errors = harness::grad_check_experiment(grad_dims[0], grad_dims[1], grad_dims[2],
                                                           grad_hidden[0], grad_hidden[1],
                                                           grad_seeds, grad_seed.value, grad_eps);
        std::string csv = "seed,max_rel_error\n";
        char line[96];
        double worst = 0.0;
        for (size_t i = 0; i < errors.size(); ++i) {
            std::snprintf(line, sizeof(line), "%zu,%.17g\n", i + grad_seed.value, errors[i]);
            csv += line;
            worst = std::max(worst, errors[i]);
        }
        write_text(grad_out, csv);
        std::printf("grad-check: %zu instances, max relative error %.3e -> %s\n", errors.size(),
                    worst, grad_out.c_str());
    });

    // corrupt ------------------------------------------------------------------
    auto* corrupt = app.add_subcommand("corrupt", "Perturb lidar intensities and camera features");
    std::string corrupt_scene, corrupt_out;
    double laser_mag = 0.0, pixel_mag = 0.0;
    bool additive = false;
    SeedOption corrupt_seed;
    corrupt->add_option("--scene", corrupt_scene, "Scene directory")->required();
    corrupt->add_option("--laser", laser_mag, "Laser noise magnitude (e.g. 0.025)");
    corrupt->add_option("--pixel", pixel_mag, "Pixel noise magnitude (e.g. 0.025)");
    corrupt->add_flag("--additive", additive, "Additive instead of multiplicative noise");
    corrupt->add_option("--out", corrupt_out, "Corrupted scene directory")->required();
    corrupt_seed.attach(corrupt);
    corrupt->callback([&] {
        auto scene = fusion::load_scene(corrupt_scene);
        const auto kind =
            additive ? fusion::NoiseKind::additive : fusion::NoiseKind::multiplicative;
        Rng laser_rng(Rng::derive(corrupt_seed.value, 0));
        Rng pixel_rng(Rng::derive(corrupt_seed.value, 1));
        scene.cloud = fusion::laser_noise(scene.cloud, laser_mag, laser_rng, kind);
        scene.features = fusion::pixel_noise(scene.features, pixel_mag, pixel_rng, kind);
        fusion::save_scene(scene, corrupt_out);
        std::printf("corrupt: laser %.4g, pixel %.4g (%s) -> %s\n", laser_mag, pixel_mag,
                    additive ? "additive" : "multiplicative", corrupt_out.c_str());
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
