#include "voxelseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "voxelseg/evalstats.hpp"
#include "voxelseg/inference.hpp"
#include "voxelseg/ops.hpp"

namespace voxelseg::trainer {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    if (batch_size < 1 || iterations_per_epoch < 1 || max_epochs < 1)
        throw DataError("train config needs positive batch/iterations/epochs");
    const double actual = double(batch_size) * iterations_per_epoch;
    if (std::abs(actual - patches_per_epoch) > 0.02 * patches_per_epoch)
        throw DataError("batch_size * iterations_per_epoch = " +
                        std::to_string(std::int64_t(actual)) +
                        " deviates more than 2% from patches_per_epoch = " +
                        std::to_string(patches_per_epoch));
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

namespace {

ExamBundle harmonize_bundle(ExamBundle bundle, const HarmonizeOptions& opt) {
    if (opt.mode == "scanner") {
        if (!opt.scanner_map)
            throw DataError("scanner harmonization requested without a fitted map");
        return harmonize::apply_intensity_map_exam(bundle, *opt.scanner_map);
    }
    if (opt.mode == "exam")
        return harmonize::scale_by_t1_p95(bundle);
    if (opt.mode != "none")
        throw DataError("unknown harmonization mode: " + opt.mode);
    return bundle;
}

/// Builds the sampling pools once channels, masks and labels are in place.
void finalize_exam(LoadedExam& exam, const HarmonizeOptions& opt) {
    const Dims d = exam.breast.dims();
    exam.breast_com = models::mask_center_of_mass(exam.breast);
    if (exam.malignant && exam.gt_slice.dims().count() > 0) {
        for (std::int64_t i = 0; i < d.count(); ++i)
            if (exam.gt_slice.values()[std::size_t(i)])
                exam.tumor_voxels.push_back(i);
    }
    if (!exam.malignant) {
        const Volume& t1c = exam.input.channels.front();
        std::vector<double> breast_t1c;
        for (std::int64_t i = 0; i < d.count(); ++i)
            if (exam.breast.values()[std::size_t(i)]) {
                exam.breast_voxels.push_back(i);
                breast_t1c.push_back(double(t1c.data()[std::size_t(i)]));
            }
        if (!exam.breast_voxels.empty()) {
            const double cut = harmonize::percentile(breast_t1c, opt.enrichment_quantile);
            for (std::int64_t i : exam.breast_voxels)
                if (double(t1c.data()[std::size_t(i)]) > cut)
                    exam.bright_voxels.push_back(i);
        }
    }
}

} // namespace

std::vector<LoadedExam> load_partition(const phantom::Manifest& manifest,
                                       const std::string& partition,
                                       const HarmonizeOptions& opt) {
    std::vector<LoadedExam> out;
    for (const auto* entry : manifest.partition(partition)) {
        ExamBundle bundle =
            harmonize_bundle(read_exam(manifest.root / entry->path), opt);

        LoadedExam exam;
        exam.id = entry->id;
        exam.malignant = entry->label == "malignant";
        exam.bpe_level = entry->bpe_level;
        exam.reference_slice = entry->reference_slice;
        harmonize::ModelInputOptions mio;
        mio.use_dce = opt.use_dce;
        mio.use_t2 = opt.use_t2;
        exam.input = harmonize::make_model_input(bundle, mio);
        exam.breast = read_mask(manifest.root / entry->breast_stem);
        if (exam.malignant && !entry->gt_slice_stem.empty())
            exam.gt_slice = read_mask(manifest.root / entry->gt_slice_stem);
        finalize_exam(exam, opt);
        out.push_back(std::move(exam));
    }
    return out;
}

LoadedExam load_exam_from_generated(const phantom::GeneratedExam& gen, const std::string& id,
                                    const HarmonizeOptions& opt) {
    LoadedExam exam;
    exam.id = id;
    exam.malignant = gen.ground_truth.positive_count() > 0;
    exam.bpe_level = gen.bpe_level;
    harmonize::ModelInputOptions mio;
    mio.use_dce = opt.use_dce;
    mio.use_t2 = opt.use_t2;
    exam.input = harmonize::make_model_input(harmonize_bundle(gen.exam, opt), mio);
    exam.breast = gen.breast_mask;
    if (exam.malignant) {
        exam.reference_slice = phantom::largest_area_slice(gen.ground_truth);
        exam.gt_slice = phantom::slice_mask(gen.ground_truth, exam.reference_slice,
                                            MaskSource::ground_truth);
    }
    finalize_exam(exam, opt);
    return exam;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

namespace {

std::array<int, 3> unravel(std::int64_t idx, Dims d) {
    const int c = int(idx % d.cols);
    const int r = int((idx / d.cols) % d.rows);
    const int s = int(idx / (std::int64_t(d.cols) * d.rows));
    return {s, r, c};
}

} // namespace

SampleLoc sample_location(const std::vector<const LoadedExam*>& malignant,
                          const std::vector<const LoadedExam*>& benign,
                          const SamplerConfig& cfg, Rng& rng) {
    if (malignant.empty() || benign.empty())
        throw DataError("sampler needs at least one malignant and one benign exam");
    SampleLoc loc;
    loc.is_tumor = rng.uniform() < 1.0 / double(1 + cfg.non_tumor_parts);
    if (loc.is_tumor) {
        // Uniform over tumor voxels pooled across malignant exams: pick the
        // exam in proportion to its tumor voxel count.
        std::int64_t total = 0;
        for (const auto* e : malignant)
            total += std::int64_t(e->tumor_voxels.size());
        if (total == 0)
            throw DataError("sampler: malignant exams carry no tumor voxels");
        std::int64_t pick = std::int64_t(rng.uniform_index(std::uint64_t(total)));
        for (const auto* e : malignant) {
            if (pick < std::int64_t(e->tumor_voxels.size())) {
                loc.exam = e;
                loc.center = unravel(e->tumor_voxels[std::size_t(pick)], e->breast.dims());
                return loc;
            }
            pick -= std::int64_t(e->tumor_voxels.size());
        }
        throw NumericalError("sampler: tumor pick out of range");
    }
    const LoadedExam* e = benign[rng.uniform_index(benign.size())];
    loc.exam = e;
    const auto& pool = (rng.uniform() < 0.5 || e->bright_voxels.empty())
                           ? e->breast_voxels
                           : e->bright_voxels;
    if (pool.empty())
        throw DataError("sampler: benign exam has an empty breast pool");
    loc.center = unravel(pool[rng.uniform_index(pool.size())], e->breast.dims());
    return loc;
}

// ---------------------------------------------------------------------------
// Patch extraction
// ---------------------------------------------------------------------------

namespace {

Tensor gather_channels(const std::vector<Volume>& channels, std::array<int, 3> origin,
                       std::array<int, 3> size) {
    const int C = int(channels.size());
    Tensor t(Shape{1, C, size[0], size[1], size[2]});
    for (int c = 0; c < C; ++c) {
        Volume v = crop_reflect(channels[std::size_t(c)], origin,
                                Dims{size[0], size[1], size[2]});
        std::copy(v.data().begin(), v.data().end(),
                  t.data() + std::int64_t(c) * t.shape().voxels());
    }
    return t;
}

} // namespace

std::array<int, 3> tpm_offset_for_exam(const LoadedExam& exam) {
    const Dims d = exam.breast.dims();
    return {int(std::lround(d.slices / 2.0 - exam.breast_com[0])),
            int(std::lround(d.rows / 2.0 - exam.breast_com[1])),
            int(std::lround(d.cols / 2.0 - exam.breast_com[2]))};
}

Patch extract_patch(const LoadedExam& exam, std::array<int, 3> center,
                    const models::ArchGeometry& geom, const models::TissueProbabilityMap* tpm,
                    std::array<int, 3> tpm_offset) {
    const std::array<int, 3>& tile = geom.output_tile;
    const std::array<int, 3> margin = geom.margin();
    const std::array<int, 3> tile_origin{center[0] - tile[0] / 2, center[1] - tile[1] / 2,
                                         center[2] - tile[2] / 2};
    const std::array<int, 3> in_origin{tile_origin[0] - margin[0], tile_origin[1] - margin[1],
                                       tile_origin[2] - margin[2]};

    Patch patch;
    patch.inputs.push_back(gather_channels(exam.input.channels, in_origin, geom.input_patch));
    if (geom.has_context) {
        const std::array<int, 3> ctx_origin{
            center[0] - geom.context_field[0] / 2, center[1] - geom.context_field[1] / 2,
            center[2] - geom.context_field[2] / 2};
        Tensor field = gather_channels(exam.input.channels, ctx_origin, geom.context_field);
        patch.inputs.push_back(ops::avg_pool(field, {1, 3, 3}, {1, 2, 2}));
    }
    if (geom.has_prior) {
        if (tpm) {
            const std::array<int, 3> o{tile_origin[0] + tpm_offset[0],
                                       tile_origin[1] + tpm_offset[1],
                                       tile_origin[2] + tpm_offset[2]};
            patch.inputs.push_back(gather_channels({tpm->probs}, o, tile));
        } else {
            Volume prior(exam.breast.dims(), Spacing{1, 1, 1});
            // Cheap view: only the tile region is read below.
            for (std::size_t i = 0; i < prior.data().size(); ++i)
                prior.data()[i] = float(exam.breast.values()[i]);
            patch.inputs.push_back(gather_channels({prior}, tile_origin, tile));
        }
    }

    // One-hot tile target; benign exams contribute pure background, malignant
    // targets read the 2D mask through reflected indices.
    Tensor target(Shape{1, geom.classes, tile[0], tile[1], tile[2]});
    const Dims d = exam.breast.dims();
    for (int s = 0; s < tile[0]; ++s)
        for (int r = 0; r < tile[1]; ++r)
            for (int c = 0; c < tile[2]; ++c) {
                bool fg = false;
                if (exam.malignant && exam.gt_slice.dims().count() > 0) {
                    const int ss = reflect_index(tile_origin[0] + s, d.slices);
                    const int rr = reflect_index(tile_origin[1] + r, d.rows);
                    const int cc = reflect_index(tile_origin[2] + c, d.cols);
                    fg = exam.gt_slice.at(ss, rr, cc) != 0;
                }
                target.at(0, fg ? 1 : 0, s, r, c) = 1.0f;
            }
    patch.target = std::move(target);
    return patch;
}

// ---------------------------------------------------------------------------
// Rotation augmentation
// ---------------------------------------------------------------------------

Tensor rotate_tensor(const Tensor& t, int axis, double degrees, bool nearest) {
    const Shape s = t.shape();
    const double rad = degrees * 3.14159265358979323846 / 180.0;
    const double ca = std::cos(rad), sa = std::sin(rad);
    Tensor out(s);

    // Rotation acts in the plane perpendicular to `axis`; the axis itself is
    // carried through unchanged.
    const double cd = (s.d - 1) / 2.0,ch = (s.h - 1) / 2.0, cw = (s.w - 1) / 2.0;
    for (int b = 0; b < s.b; ++b)
        for (int c = 0; c < s.c; ++c)
            for (int d = 0; d < s.d; ++d)
                for (int h = 0; h < s.h; ++h)
                    for (int w = 0; w < s.w; ++w) {
                        double sd = d, sh = h, sw = w;
                        if (axis == 0) {
                            const double y = h - ch, x = w - cw;
                            sh = ch + ca * y - sa * x;
                            sw = cw + sa * y + ca * x;
                        } else if (axis == 1) {
                            const double z = d - cd, x = w - cw;
                            sd = cd + ca * z - sa * x;
                            sw = cw + sa * z + ca * x;
                        } else {
                            const double z = d - cd, y = h - ch;
                            sd = cd + ca * z - sa * y;
                            sh = ch + sa * z + ca * y;
                        }
                        double value = 0.0;
                        if (nearest) {
                            const int nd = reflect_index(int(std::lround(sd)), s.d);
                            const int nh = reflect_index(int(std::lround(sh)), s.h);
                            const int nw = reflect_index(int(std::lround(sw)), s.w);
                            value = double(t.at(b, c, nd, nh, nw));
                        } else {
                            const int d0 = int(std::floor(sd)), h0 = int(std::floor(sh)),
                                      w0 = int(std::floor(sw));
                            const double td = sd - d0, th = sh - h0, tw = sw - w0;
                            for (int dz = 0; dz < 2; ++dz)
                                for (int dy = 0; dy < 2; ++dy)
                                    for (int dx = 0; dx < 2; ++dx) {
                                        const double wgt = (dz ? td : 1 - td) *
                                                           (dy ? th : 1 - th) *
                                                           (dx ? tw : 1 - tw);
                                        if (wgt == 0.0)
                                            continue;
                                        value += wgt *
                                                 double(t.at(b, c,
                                                             reflect_index(d0 + dz, s.d),
                                                             reflect_index(h0 + dy, s.h),
                                                             reflect_index(w0 + dx, s.w)));
                                    }
                        }
                        out.at(b, c, d, h, w) = float(value);
                    }
    return out;
}

void augment_rotate(Patch& patch, double max_degrees, Rng& rng) {
    const int axis = int(rng.uniform_index(3));
    const double angle = rng.uniform(-max_degrees, max_degrees);
    if (angle == 0.0)
        return;
    for (auto& input : patch.inputs)
        input = rotate_tensor(input, axis, angle, false);
    // Nearest-neighbor keeps the one-hot target binary.
    patch.target = rotate_tensor(patch.target, axis, angle, true);
}

// ---------------------------------------------------------------------------
// Validation, early stopping
// ---------------------------------------------------------------------------

double validate_median_dice(const std::vector<const LoadedExam*>& val_exams,
                            double rel_threshold, const PredictSliceFn& predict_slice) {
    std::vector<double> dices;
    for (const auto* exam : val_exams) {
        if (!exam->malignant || exam->gt_slice.dims().count() == 0)
            continue;
        const int slice = exam->reference_slice;
        const Volume map = predict_slice(*exam, slice);
        const SegmentationMask mask = inference::threshold_slice(map, slice, rel_threshold);
        dices.push_back(evalstats::dice(mask, exam->gt_slice));
    }
    if (dices.empty())
        throw DataError("validation set holds no malignant exams with 2D masks");
    return evalstats::median(std::move(dices));
}

bool early_stop(const TrainState& state, int patience) {
    if (state.history.empty())
        return false;
    return state.epoch - state.best_epoch >= patience;
}

// ---------------------------------------------------------------------------
// Epoch loop
// ---------------------------------------------------------------------------

namespace {

struct Batch {
    std::vector<Tensor> inputs; // batched
    Tensor target;
};

Batch assemble_batch(const EpochContext& ctx, const models::ArchGeometry& geom,
                     const TrainConfig& cfg, Rng& rng) {
    std::vector<Patch> patches;
    patches.reserve(std::size_t(cfg.batch_size));
    SamplerConfig sampler = ctx.sampler;
    for (int b = 0; b < cfg.batch_size; ++b) {
        const SampleLoc loc =
            sample_location(ctx.train_malignant, ctx.train_benign, sampler, rng);
        Patch p = extract_patch(*loc.exam, loc.center, geom, ctx.tpm,
                                ctx.tpm ? tpm_offset_for_exam(*loc.exam)
                                        : std::array<int, 3>{0, 0, 0});
        p.is_tumor = loc.is_tumor;
        if (cfg.augment)
            augment_rotate(p, cfg.rotate_max_degrees, rng);
        patches.push_back(std::move(p));
    }
    Batch batch;
    const std::size_t n_inputs = patches.front().inputs.size();
    for (std::size_t k = 0; k < n_inputs; ++k) {
        const Shape s0 = patches.front().inputs[k].shape();
        Tensor stacked(Shape{cfg.batch_size, s0.c, s0.d, s0.h, s0.w});
        const std::int64_t per = s0.count();
        for (int b = 0; b < cfg.batch_size; ++b)
            std::copy(patches[std::size_t(b)].inputs[k].data(),
                      patches[std::size_t(b)].inputs[k].data() + per,
                      stacked.data() + std::int64_t(b) * per);
        batch.inputs.push_back(std::move(stacked));
    }
    const Shape ts = patches.front().target.shape();
    batch.target = Tensor(Shape{cfg.batch_size, ts.c, ts.d, ts.h, ts.w});
    const std::int64_t tper = ts.count();
    for (int b = 0; b < cfg.batch_size; ++b)
        std::copy(patches[std::size_t(b)].target.data(),
                  patches[std::size_t(b)].target.data() + tper,
                  batch.target.data() + std::int64_t(b) * tper);
    return batch;
}

} // namespace

void train_epoch(TrainState& state, const EpochContext& ctx, const TrainConfig& cfg) {
    cfg.validate();
    const models::ArchGeometry& geom = state.model.geom;
    Rng rng(derive_seed(cfg.sample_seed, std::uint64_t(state.epoch) + 1));

    double loss_sum = 0.0;
    for (int it = 0; it < cfg.iterations_per_epoch; ++it) {
        Batch batch = assemble_batch(ctx, geom, cfg, rng);
        const Tensor& probs =
            state.model.graph.forward(std::span(batch.inputs.data(), batch.inputs.size()));
        auto loss = ops::generalized_dice_loss(probs, batch.target);
        if (!std::isfinite(loss.loss))
            throw NumericalError("non-finite training loss at epoch " +
                                 std::to_string(state.epoch) + ", iteration " +
                                 std::to_string(it));
        loss_sum += loss.loss;
        state.model.graph.zero_parameter_gradients();
        state.model.graph.backward(loss.grad);
        adam_step(state.model.graph, state.adam, cfg.lr);
    }

    EpochStats stats;
    stats.train_loss = loss_sum / double(cfg.iterations_per_epoch);

    // Validation loss over a deterministic patch set drawn fresh per epoch.
    {
        Rng vrng(derive_seed(cfg.sample_seed, 900000 + std::uint64_t(state.epoch)));
        std::vector<const LoadedExam*> vmal, vben;
        for (const auto* e : ctx.val)
            (e->malignant ? vmal : vben).push_back(e);
        if (vmal.empty())
            vmal = ctx.train_malignant; // degenerate split; keep the loss defined
        if (vben.empty())
            vben = ctx.train_benign;
        double vloss = 0.0;
        const int val_batches = 2;
        for (int vb = 0; vb < val_batches; ++vb) {
            Batch batch;
            {
                EpochContext vctx = ctx;
                vctx.train_malignant = vmal;
                vctx.train_benign = vben;
                TrainConfig vcfg = cfg;
                vcfg.augment = false;
                batch = assemble_batch(vctx, geom, vcfg, vrng);
            }
            const Tensor& probs = state.model.graph.forward(
                std::span(batch.inputs.data(), batch.inputs.size()));
            vloss += ops::generalized_dice_loss(probs, batch.target).loss;
        }
        stats.val_loss = vloss / double(val_batches);
    }

    stats.val_dice = validate_median_dice(
        ctx.val, cfg.rel_threshold, [&](const LoadedExam& exam, int slice) {
            return predict_one_slice(state.model, exam, slice, ctx.tpm);
        });

    if (stats.val_loss < state.best_val_loss) {
        state.best_val_loss = stats.val_loss;
        state.best_epoch = state.epoch;
    }
    state.history.push_back(stats);
    ++state.epoch;
}

// ---------------------------------------------------------------------------
// Prediction drivers
// ---------------------------------------------------------------------------

namespace {

inference::AuxInputs aux_for(const models::BuiltModel& model, const LoadedExam& exam,
                             const models::TissueProbabilityMap* tpm, Volume& prior_storage) {
    inference::AuxInputs aux;
    if (!model.geom.has_prior)
        return aux;
    if (tpm) {
        aux.tpm = &tpm->probs;
        aux.tpm_offset = tpm_offset_for_exam(exam);
    } else {
        prior_storage = Volume(exam.breast.dims(), Spacing{1, 1, 1});
        for (std::size_t i = 0; i < prior_storage.data().size(); ++i)
            prior_storage.data()[i] = float(exam.breast.values()[i]);
        aux.prior_mask = &prior_storage;
    }
    return aux;
}

} // namespace

Volume predict_full(models::BuiltModel& model, const LoadedExam& exam,
                    const models::TissueProbabilityMap* tpm) {
    const auto plan = inference::plan_tiling(exam.input.dims(), model.geom.input_patch,
                                             model.geom.output_tile);
    Volume prior_storage;
    const auto aux = aux_for(model, exam, tpm, prior_storage);
    return inference::predict_volume(model, exam.input, plan, aux);
}

Volume predict_one_slice(models::BuiltModel& model, const LoadedExam& exam, int slice,
                         const models::TissueProbabilityMap* tpm) {
    auto plan = inference::plan_tiling(exam.input.dims(), model.geom.input_patch,
                                       model.geom.output_tile);
    if (model.geom.output_tile[0] == 1)
        plan = inference::plan_for_slice(plan, slice);
    Volume prior_storage;
    const auto aux = aux_for(model, exam, tpm, prior_storage);
    return inference::predict_volume(model, exam.input, plan, aux);
}

// ---------------------------------------------------------------------------
// Full training runs
// ---------------------------------------------------------------------------

models::BuiltModel build_for_options(const RunOptions& opt, std::uint64_t init_seed) {
    int channels = opt.use_dce ? 3 : 1;
    if (opt.use_t2)
        channels += 1;
    if (opt.arch == "unet3d") {
        models::UNet3DConfig cfg;
        cfg.in_channels = channels;
        cfg.base_channels = opt.base_channels;
        cfg.prior_mask = opt.prior_mask;
        cfg.init_seed = init_seed;
        return models::build_unet3d(cfg);
    }
    if (opt.arch == "deepmedic") {
        models::DeepMedicConfig cfg;
        cfg.in_channels = channels;
        cfg.tpm_enabled = opt.prior_mask;
        cfg.init_seed = init_seed;
        return models::build_deepmedic(cfg);
    }
    throw UsageError("unknown architecture: " + opt.arch);
}

RunResult train_run(const phantom::Manifest& manifest, const TrainConfig& cfg,
                    const RunOptions& opt) {
    cfg.validate();
    fs::create_directories(opt.out_dir);

    HarmonizeOptions hopt;
    hopt.mode = opt.harmonize_mode;
    hopt.use_dce = opt.use_dce;
    hopt.use_t2 = opt.use_t2;
    harmonize::IntensityMap scanner_map;
    if (opt.harmonize_mode == "scanner") {
        // Fit over the training exams' pre-contrast T1 breast voxels.
        std::vector<ExamBundle> bundles;
        std::vector<SegmentationMask> masks;
        for (const auto* e : manifest.partition("train")) {
            bundles.push_back(read_exam(manifest.root / e->path));
            masks.push_back(read_mask(manifest.root / e->breast_stem));
        }
        if (bundles.empty())
            throw DataError("scanner harmonization needs training exams");
        std::vector<std::pair<const Volume*, const SegmentationMask*>> pairs;
        for (std::size_t i = 0; i < bundles.size(); ++i)
            pairs.emplace_back(&bundles[i].t1, &masks[i]);
        scanner_map = harmonize::fit_scanner_map(pairs, bundles.front().scanner_id);
        hopt.scanner_map = &scanner_map;
        scanner_map.save_csv(opt.out_dir / "scanner_map.csv");
    }

    std::vector<LoadedExam> train = load_partition(manifest, "train", hopt);
    std::vector<LoadedExam> val = load_partition(manifest, "val", hopt);

    TrainState state;
    state.model = build_for_options(opt, cfg.init_seed);
    state.adam = AdamState::init_for(state.model.graph);
    state.adam.beta1 = 0.9;
    state.adam.beta2 = 0.999;
    state.adam.eps = 1e-8;

    EpochContext ctx;
    int mal_kept = 0;
    for (const auto& e : train) {
        if (e.malignant) {
            if (opt.train_malignant_limit >= 0 && mal_kept >= opt.train_malignant_limit)
                continue;
            ++mal_kept;
            ctx.train_malignant.push_back(&e);
        } else {
            ctx.train_benign.push_back(&e);
        }
    }
    for (const auto& e : val)
        ctx.val.push_back(&e);
    ctx.sampler.rng_seed = cfg.sample_seed;

    models::TissueProbabilityMap tpm;
    if (opt.prior_mask && opt.arch == "deepmedic") {
        std::vector<SegmentationMask> aligned;
        for (const auto* e : ctx.train_malignant) {
            const auto off = tpm_offset_for_exam(*e);
            aligned.push_back(models::shift_mask(e->gt_slice, off));
        }
        if (aligned.empty())
            throw DataError("TPM requested without malignant training masks");
        tpm = models::build_tpm(aligned);
        ctx.tpm = &tpm;
        ctx.tpm_offset_for = [](const LoadedExam& e) { return tpm_offset_for_exam(e); };
    }

    RunResult result;
    result.trainable_parameters = state.model.graph.trainable_parameter_count();
    result.checkpoint = opt.out_dir / "best.ckpt";
    result.log_csv = opt.out_dir / "train_log.csv";

    std::ofstream log(result.log_csv, std::ios::trunc);
    log << "epoch,train_loss,val_loss,val_dice\n";

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        train_epoch(state, ctx, cfg);
        const EpochStats& s = state.history.back();
        log << epoch << "," << s.train_loss << "," << s.val_loss << "," << s.val_dice << "\n";
        log.flush();
        if (state.best_epoch == epoch)
            state.model.graph.save_checkpoint(result.checkpoint);
        if (early_stop(state, cfg.patience))
            break;
    }
    result.history = state.history;
    result.epochs_run = state.epoch;
    result.best_val_dice = state.history[std::size_t(state.best_epoch)].val_dice;
    return result;
}

} // namespace voxelseg::trainer
