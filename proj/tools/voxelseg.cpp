// voxelseg: phantom-scale breast-MRI lesion segmentation pipeline.
// Subcommands: phantom-gen, harmonize, train, predict, evaluate,
// tune-threshold, grad-check. Every run writes its resolved configuration
// next to its outputs; VOXELSEG_SEED overrides configured seeds.

#include <cstdlib>
#include <fstream>
#include <iostream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "json.hpp"
#include "voxelseg/evalstats.hpp"
#include "voxelseg/gradcheck.hpp"
#include "voxelseg/harmonize.hpp"
#include "voxelseg/inference.hpp"
#include "voxelseg/init.hpp"
#include "voxelseg/kernels.hpp"
#include "voxelseg/models.hpp"
#include "voxelseg/ops.hpp"
#include "voxelseg/phantom.hpp"
#include "voxelseg/svg.hpp"
#include "voxelseg/trainer.hpp"

using namespace voxelseg;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::optional<std::uint64_t> env_seed() {
    if (const char* s = std::getenv("VOXELSEG_SEED"))
        return std::strtoull(s, nullptr, 10);
    return std::nullopt;
}

void write_resolved_config(CLI::App& app, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    std::ofstream out(dir / "resolved_config.ini", std::ios::trunc);
    out << app.config_to_str(true, true);
}

/// on/off (also 1/0, true/false) option bound to a bool.
void add_switch(CLI::App* cmd, const std::string& name, bool& value, const std::string& desc) {
    auto* opt = cmd->add_option_function<std::string>(
        name,
        [&value, name](const std::string& s) {
            if (s == "on" || s == "1" || s == "true")
                value = true;
            else if (s == "off" || s == "0" || s == "false")
                value = false;
            else
                throw CLI::ValidationError(name + " expects on|off");
        },
        desc + " (on|off)");
    opt->expected(1);
}

struct PredictArtifacts {
    fs::path map_stem;
    fs::path mask_stem;
};

PredictArtifacts predict_stems(const fs::path& out_dir, const std::string& exam_id) {
    return {out_dir / (exam_id + "_map"), out_dir / (exam_id + "_mask")};
}

json run_options_json(const trainer::RunOptions& opt, std::int64_t params) {
    json j;
    j["arch"] = opt.arch;
    j["base_channels"] = opt.base_channels;
    j["prior_mask"] = opt.prior_mask;
    j["use_t2"] = opt.use_t2;
    j["use_dce"] = opt.use_dce;
    j["harmonize"] = opt.harmonize_mode;
    j["crf"] = opt.crf;
    j["trainable_parameters"] = params;
    return j;
}

trainer::RunOptions run_options_from_json(const fs::path& file) {
    std::ifstream in(file);
    if (!in)
        throw DataError("missing model description: " + file.string());
    json j;
    in >> j;
    trainer::RunOptions opt;
    opt.arch = j.at("arch").get<std::string>();
    opt.base_channels = j.at("base_channels").get<int>();
    opt.prior_mask = j.at("prior_mask").get<bool>();
    opt.use_t2 = j.at("use_t2").get<bool>();
    opt.use_dce = j.at("use_dce").get<bool>();
    opt.harmonize_mode = j.at("harmonize").get<std::string>();
    opt.crf = j.at("crf").get<bool>();
    return opt;
}

// ---------------------------------------------------------------------------
// Shared prediction helper (used by predict and evaluate)
// ---------------------------------------------------------------------------

struct PredictSetup {
    trainer::RunOptions opt;
    models::BuiltModel model;
    trainer::HarmonizeOptions hopt;
    harmonize::IntensityMap scanner_map;
    models::TissueProbabilityMap tpm;
    bool has_tpm = false;
};

PredictSetup load_run(const fs::path& run_dir, const phantom::Manifest& manifest) {
    PredictSetup setup;
    setup.opt = run_options_from_json(run_dir / "model.json");
    setup.model = trainer::build_for_options(setup.opt, 1);
    setup.model.graph.load_checkpoint(run_dir / "best.ckpt");
    setup.hopt.mode = setup.opt.harmonize_mode;
    setup.hopt.use_dce = setup.opt.use_dce;
    setup.hopt.use_t2 = setup.opt.use_t2;
    if (setup.opt.harmonize_mode == "scanner") {
        setup.scanner_map = harmonize::IntensityMap::load_csv(run_dir / "scanner_map.csv");
        setup.hopt.scanner_map = &setup.scanner_map;
    }
    if (setup.opt.prior_mask && setup.opt.arch == "deepmedic") {
        // Rebuild the tumor-prior map exactly as training did.
        trainer::HarmonizeOptions plain = setup.hopt;
        auto train = trainer::load_partition(manifest, "train", plain);
        std::vector<SegmentationMask> aligned;
        for (const auto& e : train)
            if (e.malignant && e.gt_slice.dims().count() > 0)
                aligned.push_back(
                    models::shift_mask(e.gt_slice, trainer::tpm_offset_for_exam(e)));
        setup.tpm = models::build_tpm(aligned);
        setup.has_tpm = true;
    }
    return setup;
}

Volume predict_map_for(PredictSetup& setup, const trainer::LoadedExam& exam) {
    Volume map = trainer::predict_full(setup.model, exam,
                                       setup.has_tpm ? &setup.tpm : nullptr);
    if (setup.opt.crf) {
        models::CrfParams params; // paper values: widths 1, weights 1
        map = models::apply_crf(map, exam.input.channels.front(), params);
    }
    return map;
}

// ---------------------------------------------------------------------------
// Subcommand implementations
// ---------------------------------------------------------------------------

int cmd_phantom_gen(const fs::path& out, int malignant, int benign, int test,
                    std::uint64_t seed, int raters, CLI::App& app) {
    phantom::DatasetSpec spec;
    spec.n_malignant = malignant;
    spec.n_benign = benign;
    spec.n_test_malignant = test;
    spec.raters = raters;
    spec.seed = env_seed().value_or(seed);
    phantom::Manifest manifest = phantom::generate_dataset(spec, out);
    write_resolved_config(app, out);
    std::cout << "wrote " << manifest.exams.size() << " exams under " << out.string() << "\n";
    return exit_ok;
}

int cmd_harmonize(const fs::path& data, const std::string& mode, const fs::path& out,
                  bool apply, CLI::App& app) {
    const phantom::Manifest manifest = phantom::Manifest::load(data);
    fs::create_directories(out);
    if (mode == "scanner") {
        std::vector<ExamBundle> bundles;
        std::vector<SegmentationMask> masks;
        for (const auto* e : manifest.partition("train")) {
            bundles.push_back(read_exam(manifest.root / e->path));
            masks.push_back(read_mask(manifest.root / e->breast_stem));
        }
        if (bundles.empty())
            throw DataError("no training exams to fit a scanner map on");
        std::vector<std::pair<const Volume*, const SegmentationMask*>> pairs;
        for (std::size_t i = 0; i < bundles.size(); ++i)
            pairs.emplace_back(&bundles[i].t1, &masks[i]);
        const auto map = harmonize::fit_scanner_map(pairs, bundles.front().scanner_id);
        map.save_csv(out / ("map_" + map.scanner_id + ".csv"));
        std::cout << "fitted scanner map with " << map.source.size() << " knots for "
                  << map.scanner_id << "\n";
    } else if (mode == "exam") {
        for (const auto& e : manifest.exams) {
            ExamBundle bundle = read_exam(manifest.root / e.path);
            const double s = harmonize::t1_p95_scale(bundle);
            std::cout << e.id << " scale=" << s << "\n";
            if (apply)
                write_exam(harmonize::scale_by_t1_p95(bundle), out / "exams" / e.id);
        }
    } else {
        throw UsageError("harmonize mode must be exam or scanner");
    }
    write_resolved_config(app, out);
    return exit_ok;
}

int cmd_train(const fs::path& data, trainer::TrainConfig cfg, trainer::RunOptions opt,
              CLI::App& app) {
    if (const auto seed = env_seed()) {
        cfg.init_seed = *seed;
        cfg.sample_seed = *seed + 1;
    }
    const phantom::Manifest manifest = phantom::Manifest::load(data);
    const trainer::RunResult result = trainer::train_run(manifest, cfg, opt);
    {
        std::ofstream mj(opt.out_dir / "model.json", std::ios::trunc);
        mj << run_options_json(opt, result.trainable_parameters).dump(2) << "\n";
    }
    write_resolved_config(app, opt.out_dir);
    std::cout << "trainable_parameters=" << result.trainable_parameters << "\n";
    std::cout << "epochs=" << result.epochs_run << " best_val_dice=" << result.best_val_dice
              << "\n";
    std::cout << "checkpoint=" << result.checkpoint.string() << "\n";
    return exit_ok;
}

int cmd_predict(const fs::path& data, const fs::path& run_dir, const fs::path& out,
                const std::string& exam_id, int slice, double rel_threshold,
                bool keep_all_components, CLI::App& app) {
    const phantom::Manifest manifest = phantom::Manifest::load(data);
    PredictSetup setup = load_run(run_dir, manifest);
    fs::create_directories(out);

    std::vector<const phantom::ManifestEntry*> targets;
    for (const auto& e : manifest.exams)
        if (exam_id == "all-test" ? e.partition == "test" : e.id == exam_id)
            targets.push_back(&e);
    if (targets.empty())
        throw DataError("exam not found in manifest: " + exam_id);

    for (const auto* entry : targets) {
        // Load just this exam through the training-time harmonization.
        phantom::Manifest single = manifest;
        single.exams = {*entry};
        auto exams = trainer::load_partition(single, entry->partition, setup.hopt);
        const trainer::LoadedExam& exam = exams.front();

        const Volume map = predict_map_for(setup, exam);
        const int eval_slice = slice >= 0 ? slice : entry->reference_slice;
        if (eval_slice < 0)
            throw DataError("exam has no reference slice; pass --slice");
        const SegmentationMask mask =
            inference::threshold_slice(map, eval_slice, rel_threshold, keep_all_components);

        const auto stems = predict_stems(out, entry->id);
        write_volume_with_meta(map, stems.map_stem);
        write_mask(mask, stems.mask_stem);
        std::cout << entry->id << " slice=" << eval_slice << " positives="
                  << mask.positive_count() << "\n";
    }
    write_resolved_config(app, out);
    return exit_ok;
}

struct EvalInputs {
    std::vector<evalstats::ExamEval> exams;
    std::vector<Volume> maps;
    std::vector<int> slices;
    std::vector<std::string> ids;
};

EvalInputs gather_eval_inputs(const phantom::Manifest& manifest, const fs::path& pred_dir,
                              double rel_threshold, bool keep_all) {
    EvalInputs in;
    for (const auto* entry : manifest.partition("test")) {
        if (entry->rater_stems.empty())
            continue;
        const auto stems = predict_stems(pred_dir, entry->id);
        Volume map = read_volume_with_meta(stems.map_stem);
        const int slice = entry->reference_slice;

        evalstats::ExamEval exam;
        exam.exam_id = entry->id;
        exam.bpe_level = entry->bpe_level;
        exam.model_mask = inference::threshold_slice(map, slice, rel_threshold, keep_all);
        for (const auto& rs : entry->rater_stems)
            exam.rater_masks.push_back(read_mask(manifest.root / rs));
        exam.prob_slice.reserve(std::size_t(map.dims().rows) * map.dims().cols);
        for (int r = 0; r < map.dims().rows; ++r)
            for (int c = 0; c < map.dims().cols; ++c)
                exam.prob_slice.push_back(map.at(slice, r, c));
        in.exams.push_back(std::move(exam));
        in.maps.push_back(std::move(map));
        in.slices.push_back(slice);
        in.ids.push_back(entry->id);
    }
    if (in.exams.empty())
        throw DataError("no test exams with rater masks found");
    return in;
}

void write_report_csv(const evalstats::EvalReport& report, const fs::path& file) {
    std::ofstream out(file, std::ios::trunc);
    out << "exam_id,reference_id,dice_model,dice_rater,delta_dice,threshold\n";
    for (const auto& row : report.rows)
        out << row.exam_id << "," << row.reference_id << "," << row.dice_model << ","
            << row.dice_rater << "," << row.delta_dice << "," << report.threshold_used << "\n";
}

json summary_json(const evalstats::EvalReport& report, int tuning_size) {
    json j;
    j["median_model_dice"] = report.median_model_dice;
    j["median_rater_dice"] = report.median_rater_dice;
    j["model_dice_p5"] = report.model_dice_p5_p95.first;
    j["model_dice_p95"] = report.model_dice_p5_p95.second;
    j["rater_dice_p5"] = report.rater_dice_p5_p95.first;
    j["rater_dice_p95"] = report.rater_dice_p5_p95.second;
    j["wilcoxon_W"] = report.wilcoxon_model_vs_rater.statistic;
    j["wilcoxon_p"] = report.wilcoxon_model_vs_rater.p_value;
    j["wilcoxon_n"] = report.wilcoxon_model_vs_rater.n_effective;
    j["wilcoxon_method"] = report.wilcoxon_model_vs_rater.method;
    j["tost_p_lower"] = report.tost.p_lower;
    j["tost_p_upper"] = report.tost.p_upper;
    j["tost_equivalent"] = report.tost.equivalent;
    j["tost_lower_rater"] = report.tost_lower_rater;
    j["tost_upper_rater"] = report.tost_upper_rater;
    j["threshold"] = report.threshold_used;
    j["tuning_size"] = tuning_size;
    if (report.mean_auc)
        j["mean_auc"] = *report.mean_auc;
    if (report.bpe_mannwhitney) {
        j["bpe_U"] = report.bpe_mannwhitney->statistic;
        j["bpe_p"] = report.bpe_mannwhitney->p_value;
    }
    return j;
}

int cmd_evaluate(const fs::path& data, const fs::path& pred_dir, const fs::path& out,
                 int tune_count, double rel_threshold, double alpha, bool keep_all,
                 bool want_svg, std::uint64_t seed, CLI::App& app) {
    const phantom::Manifest manifest = phantom::Manifest::load(data);
    fs::create_directories(out);

    double threshold = rel_threshold;
    int tuning_size = 0;
    EvalInputs all = gather_eval_inputs(manifest, pred_dir, threshold, keep_all);

    std::vector<std::size_t> order(all.exams.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;
    if (tune_count > 0) {
        if (std::size_t(tune_count) >= all.exams.size())
            throw DataError("tuning subset must leave at least one evaluation exam");
        Rng rng(env_seed().value_or(seed));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_index(i)]);
        std::vector<const Volume*> maps;
        std::vector<std::vector<const SegmentationMask*>> refs;
        std::vector<int> slices;
        std::vector<std::vector<SegmentationMask>> ref_storage;
        for (int k = 0; k < tune_count; ++k) {
            const auto& exam = all.exams[order[std::size_t(k)]];
            maps.push_back(&all.maps[order[std::size_t(k)]]);
            slices.push_back(all.slices[order[std::size_t(k)]]);
            std::vector<SegmentationMask> refs_k;
            for (const auto& rm : exam.rater_masks)
                refs_k.push_back(
                    evalstats::consensus_reference(exam.rater_masks, rm.rater_id()));
            ref_storage.push_back(std::move(refs_k));
        }
        for (auto& rs : ref_storage) {
            std::vector<const SegmentationMask*> ptrs;
            for (const auto& r : rs)
                ptrs.push_back(&r);
            refs.push_back(std::move(ptrs));
        }
        threshold = inference::select_threshold(maps, refs, slices,
                                                inference::default_threshold_grid());
        tuning_size = tune_count;
        std::cout << "tuned threshold=" << threshold << " on " << tuning_size << " exams\n";

        if (want_svg) {
            svg::Series sweep;
            sweep.label = "mean dice";
            for (double tau : inference::default_threshold_grid()) {
                double sum = 0.0;
                std::int64_t cnt = 0;
                for (std::size_t k = 0; k < maps.size(); ++k) {
                    const auto mask = inference::threshold_slice(*maps[k], slices[k], tau);
                    for (const auto* ref : refs[k]) {
                        sum += evalstats::dice(mask, *ref);
                        ++cnt;
                    }
                }
                sweep.points.emplace_back(tau, sum / double(cnt));
            }
            svg::write_plot(out / "threshold_sweep.svg", "Threshold sweep", "relative threshold",
                            "mean Dice", {sweep});
        }
    }

    // Re-threshold the evaluation exams at the final threshold.
    std::vector<evalstats::ExamEval> eval_exams;
    for (std::size_t k = std::size_t(tuning_size); k < order.size(); ++k) {
        const std::size_t i = order[k];
        evalstats::ExamEval exam = all.exams[i];
        exam.model_mask =
            inference::threshold_slice(all.maps[i], all.slices[i], threshold, keep_all);
        eval_exams.push_back(std::move(exam));
    }

    const evalstats::EvalReport report =
        evalstats::evaluate_test_set(eval_exams, alpha, threshold);
    write_report_csv(report, out / "report.csv");
    {
        std::ofstream sj(out / "summary.json", std::ios::trunc);
        sj << summary_json(report, tuning_size).dump(2) << "\n";
    }
    if (want_svg) {
        svg::Series model_pts, rater_pts;
        model_pts.label = "model";
        model_pts.scatter = true;
        rater_pts.label = "raters";
        rater_pts.color = "#d62728";
        rater_pts.scatter = true;
        for (std::size_t i = 0; i < report.per_exam_model_dice.size(); ++i) {
            model_pts.points.emplace_back(double(i), report.per_exam_model_dice[i]);
            rater_pts.points.emplace_back(double(i), report.per_exam_rater_dice[i]);
        }
        svg::write_plot(out / "dice_scatter.svg", "Per-exam Dice", "exam", "Dice",
                        {model_pts, rater_pts});
    }
    write_resolved_config(app, out);
    std::cout << "median_model_dice=" << report.median_model_dice
              << " wilcoxon_p=" << report.wilcoxon_model_vs_rater.p_value
              << " tost_equivalent=" << (report.tost.equivalent ? "yes" : "no") << "\n";
    return exit_ok;
}

int cmd_tune_threshold(const fs::path& data, const fs::path& pred_dir, const fs::path& out,
                       CLI::App& app) {
    const phantom::Manifest manifest = phantom::Manifest::load(data);
    EvalInputs all = gather_eval_inputs(manifest, pred_dir, 0.6, false);
    std::vector<const Volume*> maps;
    std::vector<std::vector<const SegmentationMask*>> refs;
    std::vector<std::vector<SegmentationMask>> storage;
    for (std::size_t i = 0; i < all.exams.size(); ++i) {
        maps.push_back(&all.maps[i]);
        std::vector<SegmentationMask> refs_i;
        for (const auto& rm : all.exams[i].rater_masks)
            refs_i.push_back(
                evalstats::consensus_reference(all.exams[i].rater_masks, rm.rater_id()));
        storage.push_back(std::move(refs_i));
    }
    for (auto& rs : storage) {
        std::vector<const SegmentationMask*> ptrs;
        for (const auto& r : rs)
            ptrs.push_back(&r);
        refs.push_back(std::move(ptrs));
    }
    const double best = inference::select_threshold(maps, refs, all.slices,
                                                    inference::default_threshold_grid());
    fs::create_directories(out);
    std::ofstream csv(out / "threshold_sweep.csv", std::ios::trunc);
    csv << "threshold,mean_dice\n";
    for (double tau : inference::default_threshold_grid()) {
        double sum = 0.0;
        std::int64_t cnt = 0;
        for (std::size_t k = 0; k < maps.size(); ++k) {
            const auto mask = inference::threshold_slice(*maps[k], all.slices[k], tau);
            for (const auto* ref : refs[k]) {
                sum += evalstats::dice(mask, *ref);
                ++cnt;
            }
        }
        csv << tau << "," << sum / double(cnt) << "\n";
    }
    write_resolved_config(app, out);
    std::cout << "best_threshold=" << best << "\n";
    return exit_ok;
}

int cmd_grad_check(std::uint64_t seed) {
    const std::uint64_t base = env_seed().value_or(seed);
    int failures = 0;
    const auto report_line = [&](const std::string& name, double err, double bound,
                                 int probes) {
        const bool ok = err < bound && probes > 0;
        std::cout << (ok ? "PASS " : "FAIL ") << name << " max_rel_error=" << err
                  << " bound=" << bound << " probes=" << probes << "\n";
        if (!ok)
            ++failures;
    };

    {
        NetworkGraph g;
        Rng rng(derive_seed(base, 1));
        const int in = g.add_input(2);
        const int w = g.add_parameter("w", init_glorot_uniform(Shape{3, 2, 3, 3, 3}, rng), true);
        const int b = g.add_parameter("b", Tensor(Shape{3, 1, 1, 1, 1}), true);
        g.set_output(g.add_conv(in, w, b, "conv"));
        Tensor x(Shape{1, 2, 5, 5, 5});
        for (std::int64_t i = 0; i < x.size(); ++i)
            x.data()[i] = float(rng.uniform(-1.0, 1.0));
        const auto rep = grad_check(g, std::span(&x, 1));
        report_line("conv3d_valid", rep.max_rel_error, 1e-4, rep.probes_used);
    }
    {
        NetworkGraph g;
        Rng rng(derive_seed(base, 2));
        const int in = g.add_input(2);
        g.set_output(g.add_softmax(in));
        Tensor x(Shape{1, 2, 1, 5, 5});
        Tensor target(Shape{1, 2, 1, 5, 5});
        for (int h = 0; h < 5; ++h)
            for (int w = 0; w < 5; ++w) {
                x.at(0, 0, 0, h, w) = float(rng.uniform(-1.0, 1.0));
                x.at(0, 1, 0, h, w) = float(rng.uniform(-1.0, 1.0));
                target.at(0, rng.uniform() < 0.4 ? 1 : 0, 0, h, w) = 1.0f;
            }
        GradCheckOptions opt;
        opt.dice_target = &target;
        const auto rep = grad_check(g, std::span(&x, 1), opt);
        report_line("generalized_dice_loss", rep.max_rel_error, 1e-4, rep.probes_used);
    }
    {
        models::UNet3DConfig cfg;
        cfg.base_channels = 2;
        cfg.init_seed = derive_seed(base, 3);
        models::BuiltModel m = models::build_unet3d(cfg);
        Rng rng(derive_seed(base, 4));
        Tensor x(Shape{1, 3, 19, 75, 75});
        for (std::int64_t i = 0; i < x.size(); ++i)
            x.data()[i] = float(rng.uniform(0.0, 1.0));
        Tensor target(Shape{1, 2, 1, 37, 37});
        for (int h = 0; h < 37; ++h)
            for (int w = 0; w < 37; ++w)
                target.at(0, (h - 18) * (h - 18) + (w - 18) * (w - 18) < 50 ? 1 : 0, 0, h, w) =
                    1.0f;
        GradCheckOptions opt;
        opt.dice_target = &target;
        opt.step = 1e-4;
        opt.max_coords_per_tensor = 6;
        opt.max_param_tensors = 4;
        const auto rep = grad_check(m.graph, std::span(&x, 1), opt);
        report_line("unet3d_end_to_end", rep.max_rel_error, 1e-3, rep.probes_used);
    }
    std::cout << (failures == 0 ? "ALL CHECKS PASSED" : "CHECKS FAILED") << "\n";
    return failures == 0 ? exit_ok : exit_numeric;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"voxelseg: volumetric breast-MRI lesion segmentation pipeline"};
    app.require_subcommand(1);
    app.set_config("--config", "", "flat key-value config file with per-subcommand sections");
    app.allow_config_extras(false);

    // phantom-gen ------------------------------------------------------------
    auto* gen = app.add_subcommand("phantom-gen", "generate a synthetic exam dataset");
    fs::path gen_out;
    int gen_mal = 0, gen_ben = 0, gen_test = 0, gen_raters = 4;
    std::uint64_t gen_seed = 1;
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--malignant", gen_mal, "number of malignant exams");
    gen->add_option("--benign", gen_ben, "number of benign exams");
    gen->add_option("--test", gen_test, "held-out malignant test exams with virtual raters");
    gen->add_option("--raters", gen_raters, "virtual raters per test exam");
    gen->add_option("--seed", gen_seed, "dataset seed");

    // harmonize ---------------------------------------------------------------
    auto* harm = app.add_subcommand("harmonize", "fit scanner maps / apply exam scaling");
    fs::path harm_data, harm_out;
    std::string harm_mode = "exam";
    bool harm_apply = false;
    harm->add_option("--data", harm_data, "dataset directory (with manifest.json)")->required();
    harm->add_option("--out", harm_out, "output directory")->required();
    harm->add_option("--mode", harm_mode, "exam | scanner");
    harm->add_flag("--apply", harm_apply, "write harmonized exam copies (exam mode)");

    // train -------------------------------------------------------------------
    auto* train = app.add_subcommand("train", "train a segmentation network");
    fs::path train_data;
    trainer::TrainConfig tcfg;
    trainer::RunOptions topt;
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--out", topt.out_dir, "run output directory")->required();
    train->add_option("--arch", topt.arch, "unet3d | deepmedic");
    train->add_option("--base-channels", topt.base_channels, "U-Net width ladder base");
    train->add_option("--batch", tcfg.batch_size, "batch size");
    train->add_option("--lr", tcfg.lr, "learning rate");
    train->add_option("--iters", tcfg.iterations_per_epoch, "weight updates per epoch");
    train->add_option("--patches", tcfg.patches_per_epoch, "patches per epoch");
    train->add_option("--epochs", tcfg.max_epochs, "maximum epochs");
    train->add_option("--patience", tcfg.patience, "early-stopping patience");
    train->add_option("--init-seed", tcfg.init_seed, "initializer seed");
    train->add_option("--sample-seed", tcfg.sample_seed, "sampler seed");
    train->add_option("--rel-threshold", tcfg.rel_threshold, "validation threshold");
    train->add_option("--limit-malignant", topt.train_malignant_limit,
                      "cap on malignant training exams (-1 = all)");
    std::string t_harm = "exam";
    train->add_option("--harmonize", t_harm, "exam | scanner");
    bool t_prior = false, t_t2 = false, t_dce = true, t_crf = false, t_augment = true;
    add_switch(train, "--prior-mask", t_prior, "spatial prior input");
    add_switch(train, "--use-t2", t_t2, "append the T2 channel");
    add_switch(train, "--dce", t_dce, "use DCE-in/DCE-out channels");
    add_switch(train, "--crf", t_crf, "CRF post-processing at prediction");
    add_switch(train, "--augment", t_augment, "rotation augmentation");
    int jobs = 0;
    train->add_option("--jobs", jobs, "worker thread cap (0 = hardware)");

    // predict -----------------------------------------------------------------
    auto* predict = app.add_subcommand("predict", "tile a trained network over exams");
    fs::path p_data, p_run, p_out;
    std::string p_exam;
    int p_slice = -1;
    double p_thresh = 0.6;
    bool p_keep_all = false;
    predict->add_option("--data", p_data, "dataset directory")->required();
    predict->add_option("--run", p_run, "training run directory (best.ckpt, model.json)")
        ->required();
    predict->add_option("--out", p_out, "prediction output directory")->required();
    predict->add_option("--exam", p_exam, "exam id, or all-test")->required();
    predict->add_option("--slice", p_slice, "evaluation slice (default: reference slice)");
    predict->add_option("--rel-threshold", p_thresh, "relative-max threshold");
    predict->add_flag("--keep-all-components", p_keep_all,
                      "keep all connected components (multifocal variant)");

    // evaluate ------------------------------------------------------------
    auto* eval = app.add_subcommand("evaluate", "consensus-reference evaluation");
    fs::path e_data, e_pred, e_out;
    int e_tune = 0;
    double e_thresh = 0.6, e_alpha = 0.05;
    bool e_keep_all = false, e_svg = false;
    std::uint64_t e_seed = 1;
    eval->add_option("--data", e_data, "dataset directory")->required();
    eval->add_option("--pred", e_pred, "prediction directory (from predict)")->required();
    eval->add_option("--out", e_out, "report output directory")->required();
    eval->add_option("--tune-threshold", e_tune,
                     "tune on this many randomly held-out exams first");
    eval->add_option("--rel-threshold", e_thresh, "relative-max threshold");
    eval->add_option("--alpha", e_alpha, "significance level");
    eval->add_option("--seed", e_seed, "tuning-subset seed");
    eval->add_flag("--keep-all-components", e_keep_all, "multifocal thresholding variant");
    eval->add_flag("--svg", e_svg, "write SVG plots");

    // tune-threshold -----------------------------------------------------
    auto* tune = app.add_subcommand("tune-threshold", "grid-search the relative threshold");
    fs::path tu_data, tu_pred, tu_out;
    tune->add_option("--data", tu_data, "dataset directory")->required();
    tune->add_option("--pred", tu_pred, "prediction directory")->required();
    tune->add_option("--out", tu_out, "output directory")->required();

    // grad-check ------------------------------------------------------------
    auto* gc = app.add_subcommand("grad-check", "finite-difference verification suite");
    std::uint64_t gc_seed = 17;
    gc->add_option("--seed", gc_seed, "probe seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_usage;
    }

    try {
#ifdef _OPENMP
        if (jobs > 0)
            omp_set_num_threads(jobs);
#endif
        if (gen->parsed())
            return cmd_phantom_gen(gen_out, gen_mal, gen_ben, gen_test, gen_seed, gen_raters,
                                   app);
        if (harm->parsed())
            return cmd_harmonize(harm_data, harm_mode, harm_out, harm_apply, app);
        if (train->parsed()) {
            topt.harmonize_mode = t_harm;
            topt.prior_mask = t_prior;
            topt.use_t2 = t_t2;
            topt.use_dce = t_dce;
            topt.crf = t_crf;
            tcfg.augment = t_augment;
            return cmd_train(train_data, tcfg, topt, app);
        }
        if (predict->parsed())
            return cmd_predict(p_data, p_run, p_out, p_exam, p_slice, p_thresh, p_keep_all,
                               app);
        if (eval->parsed())
            return cmd_evaluate(e_data, e_pred, e_out, e_tune, e_thresh, e_alpha, e_keep_all,
                                e_svg, e_seed, app);
        if (tune->parsed())
            return cmd_tune_threshold(tu_data, tu_pred, tu_out, app);
        if (gc->parsed())
            return cmd_grad_check(gc_seed);
        std::cerr << "no subcommand given\n";
        return exit_usage;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return exit_usage;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return exit_data;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return exit_numeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_data;
    }
}
