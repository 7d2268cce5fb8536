#include "voxelseg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "voxelseg/evalstats.hpp"
#include "voxelseg/ops.hpp"

namespace voxelseg::inference {

TilingPlan plan_tiling(Dims volume_dims, std::array<int, 3> input_patch,
                       std::array<int, 3> output_tile) {
    if (volume_dims.slices <= 0 || volume_dims.rows <= 0 || volume_dims.cols <= 0)
        throw DataError("plan_tiling: zero-sized volume");
    for (int a = 0; a < 3; ++a)
        if (output_tile[std::size_t(a)] > input_patch[std::size_t(a)])
            throw DataError("plan_tiling: output tile exceeds input patch");

    const auto axis_origins = [](int length, int tile) {
        std::vector<int> origins;
        for (int o = 0; o + tile <= length; o += tile)
            origins.push_back(o);
        if (origins.empty())
            origins.push_back(std::max(0, length - tile)); // tile larger than volume
        else if (origins.back() + tile < length)
            origins.push_back(length - tile); // shifted remainder tile, written last
        return origins;
    };

    TilingPlan plan;
    plan.input_patch = input_patch;
    plan.output_tile = output_tile;
    plan.volume_dims = volume_dims;
    const auto so = axis_origins(volume_dims.slices, output_tile[0]);
    const auto ro = axis_origins(volume_dims.rows, output_tile[1]);
    const auto co = axis_origins(volume_dims.cols, output_tile[2]);
    for (int s : so)
        for (int r : ro)
            for (int c : co)
                plan.tiles.push_back(Tile{{s, r, c}});
    return plan;
}

TilingPlan plan_for_slice(const TilingPlan& plan, int slice) {
    if (plan.output_tile[0] != 1)
        throw DataError("plan_for_slice requires through-plane tile extent 1");
    TilingPlan out = plan;
    out.tiles.clear();
    for (const auto& t : plan.tiles)
        if (t.output_origin[0] == slice)
            out.tiles.push_back(t);
    if (out.tiles.empty())
        throw DataError("plan_for_slice: slice outside the plan");
    return out;
}

namespace {

Tensor gather_patch(const std::vector<Volume>& channels, std::array<int, 3> origin,
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

Tensor stack_batch(const std::vector<Tensor>& items) {
    const Shape s0 = items.front().shape();
    Tensor out(Shape{int(items.size()), s0.c, s0.d, s0.h, s0.w});
    const std::int64_t per = s0.count();
    for (std::size_t i = 0; i < items.size(); ++i)
        std::copy(items[i].data(), items[i].data() + per,
                  out.data() + std::int64_t(i) * per);
    return out;
}

} // namespace

Volume predict_volume(models::BuiltModel& model, const harmonize::ModelInput& input,
                      const TilingPlan& plan, const AuxInputs& aux, int batch_tiles) {
    const auto& geom = model.geom;
    if (plan.input_patch != geom.input_patch || plan.output_tile != geom.output_tile)
        throw DataError("tiling plan does not match the model geometry");
    if (int(input.channels.size()) != geom.in_channels)
        throw DataError("model expects " + std::to_string(geom.in_channels) +
                        " input channels, got " + std::to_string(input.channels.size()));
    if (geom.has_prior && !aux.prior_mask && !aux.tpm)
        throw DataError("model wants a prior input but none was provided");
    if (input.dims() != plan.volume_dims)
        throw DataError("plan volume dims do not match the input");

    const std::array<int, 3> margin = geom.margin();
    Volume out(plan.volume_dims, input.channels.front().spacing());

    const std::array<int, 3>& tile = plan.output_tile;
    for (std::size_t start = 0; start < plan.tiles.size();
         start += std::size_t(batch_tiles)) {
        const std::size_t stop =
            std::min(plan.tiles.size(), start + std::size_t(batch_tiles));
        std::vector<Tensor> patches, contexts, priors;
        for (std::size_t ti = start; ti < stop; ++ti) {
            const auto& t = plan.tiles[ti];
            const std::array<int, 3> in_origin{t.output_origin[0] - margin[0],
                                               t.output_origin[1] - margin[1],
                                               t.output_origin[2] - margin[2]};
            patches.push_back(gather_patch(input.channels, in_origin, geom.input_patch));
            if (geom.has_context) {
                const std::array<int, 3> ctx_origin{
                    t.output_origin[0] + tile[0] / 2 - geom.context_field[0] / 2,
                    t.output_origin[1] + tile[1] / 2 - geom.context_field[1] / 2,
                    t.output_origin[2] + tile[2] / 2 - geom.context_field[2] / 2};
                Tensor field = gather_patch(input.channels, ctx_origin, geom.context_field);
                contexts.push_back(ops::avg_pool(field, {1, 3, 3}, {1, 2, 2}));
            }
            if (geom.has_prior) {
                const Volume* src = aux.prior_mask ? aux.prior_mask : aux.tpm;
                std::array<int, 3> origin = t.output_origin;
                if (!aux.prior_mask) {
                    origin[0] += aux.tpm_offset[0];
                    origin[1] += aux.tpm_offset[1];
                    origin[2] += aux.tpm_offset[2];
                }
                priors.push_back(gather_patch({*src}, origin, tile));
            }
        }
        std::vector<Tensor> inputs;
        inputs.push_back(stack_batch(patches));
        if (geom.has_context)
            inputs.push_back(stack_batch(contexts));
        if (geom.has_prior)
            inputs.push_back(stack_batch(priors));
        const Tensor& probs = model.graph.forward(std::span(inputs.data(), inputs.size()));

        for (std::size_t ti = start; ti < stop; ++ti) {
            const auto& t = plan.tiles[ti];
            const int b = int(ti - start);
            for (int s = 0; s < tile[0]; ++s)
                for (int r = 0; r < tile[1]; ++r)
                    for (int c = 0; c < tile[2]; ++c)
                        out.at(t.output_origin[0] + s, t.output_origin[1] + r,
                               t.output_origin[2] + c) = probs.at(b, 1, s, r, c);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Thresholding
// ---------------------------------------------------------------------------

std::vector<int> label_components_2d(const SegmentationMask& mask, int slice) {
    const Dims d = mask.dims();
    std::vector<int> labels(std::size_t(d.rows) * d.cols, 0);
    int next = 0;
    for (int r = 0; r < d.rows; ++r)
        for (int c = 0; c < d.cols; ++c) {
            if (!mask.at(slice, r, c) || labels[std::size_t(r) * d.cols + c])
                continue;
            ++next;
            std::deque<std::pair<int, int>> queue{{r, c}};
            labels[std::size_t(r) * d.cols + c] = next;
            while (!queue.empty()) {
                const auto [cr, cc] = queue.front();
                queue.pop_front();
                for (int dr = -1; dr <= 1; ++dr)
                    for (int dc = -1; dc <= 1; ++dc) {
                        const int nr = cr + dr, nc = cc + dc;
                        if (nr < 0 || nr >= d.rows || nc < 0 || nc >= d.cols)
                            continue;
                        auto& l = labels[std::size_t(nr) * d.cols + nc];
                        if (mask.at(slice, nr, nc) && !l) {
                            l = next;
                            queue.emplace_back(nr, nc);
                        }
                    }
            }
        }
    return labels;
}

SegmentationMask threshold_slice(const Volume& prob_map, int slice_idx, double rel_threshold,
                                 bool keep_all_components) {
    const Dims d = prob_map.dims();
    if (slice_idx < 0 || slice_idx >= d.slices)
        throw DataError("threshold_slice: slice index out of range");
    SegmentationMask mask(d, MaskSource::model, slice_idx);

    double mx = 0.0;
    for (int r = 0; r < d.rows; ++r)
        for (int c = 0; c < d.cols; ++c)
            mx = std::max(mx, double(prob_map.at(slice_idx, r, c)));
    if (mx <= 0.0)
        return mask; // empty slice stays empty

    const double cut = rel_threshold * mx;
    for (int r = 0; r < d.rows; ++r)
        for (int c = 0; c < d.cols; ++c)
            mask.at(slice_idx, r, c) = double(prob_map.at(slice_idx, r, c)) >= cut ? 1 : 0;

    if (keep_all_components)
        return mask;

    // Dismiss components that do not reach the slice maximum.
    const std::vector<int> labels = label_components_2d(mask, slice_idx);
    std::vector<char> keeps(1, 0);
    int max_label = 0;
    for (int l : labels)
        max_label = std::max(max_label, l);
    keeps.assign(std::size_t(max_label) + 1, 0);
    const double near_max = (1.0 - 1e-6) * mx;
    for (int r = 0; r < d.rows; ++r)
        for (int c = 0; c < d.cols; ++c) {
            const int l = labels[std::size_t(r) * d.cols + c];
            if (l && double(prob_map.at(slice_idx, r, c)) >= near_max)
                keeps[std::size_t(l)] = 1;
        }
    for (int r = 0; r < d.rows; ++r)
        for (int c = 0; c < d.cols; ++c) {
            const int l = labels[std::size_t(r) * d.cols + c];
            if (l && !keeps[std::size_t(l)])
                mask.at(slice_idx, r, c) = 0;
        }
    return mask;
}

std::vector<double> default_threshold_grid() {
    std::vector<double> grid;
    for (int i = 1; i <= 19; ++i)
        grid.push_back(double(i) * 0.05);
    return grid;
}

double select_threshold(const std::vector<const Volume*>& maps,
                        const std::vector<std::vector<const SegmentationMask*>>& references,
                        const std::vector<int>& slices, const std::vector<double>& grid) {
    if (grid.empty())
        throw DataError("select_threshold: empty grid");
    if (maps.size() != references.size() || maps.size() != slices.size())
        throw DataError("select_threshold: maps/references/slices size mismatch");
    double best_tau = grid.front();
    double best_score = -1.0;
    for (double tau : grid) {
        double sum = 0.0;
        std::int64_t count = 0;
        for (std::size_t i = 0; i < maps.size(); ++i) {
            const SegmentationMask mask = threshold_slice(*maps[i], slices[i], tau);
            for (const auto* ref : references[i]) {
                sum += evalstats::dice(mask, *ref);
                ++count;
            }
        }
        if (count == 0)
            throw DataError("select_threshold: no references");
        const double score = sum / double(count);
        if (score > best_score + 1e-12) { // ties break toward the lower threshold
            best_score = score;
            best_tau = tau;
        }
    }
    return best_tau;
}

} // namespace voxelseg::inference
