#pragma once

// Per-set detection loss on the tape, plus aggregation across supervised
// sets. Matched queries pay cross-entropy on their ground-truth label, L1 on
// the box four-vector, and 1 - giou; unmatched queries pay background
// cross-entropy scaled by the background coefficient. Components are
// normalized by the ground-truth count of the image (floored at 1).
//
// The intersection / union / hull arithmetic here runs on tape tensors; the
// scalar formulas in geometry.hpp serve as an independent cross-check.

#include <string>
#include <vector>

#include "qrlab/decoder.hpp"
#include "qrlab/matching.hpp"
#include "qrlab/recollection.hpp"
#include "qrlab/tensor.hpp"

namespace qrlab {

/// Loss components of one supervised set. Component tensors are unweighted;
/// total = w.cls * cls + w.l1 * l1 + w.giou * giou.
struct SetLossTerms {
    Tensor cls, l1, giou, total;
    Pathway lineage;
};

namespace detail {

struct CornerSlices {
    Tensor x0, y0, x1, y1, area;
};

inline CornerSlices corner_slices(Tensor boxes) {
    Tensor cx = cols(boxes, 0, 1), cy = cols(boxes, 1, 2);
    Tensor w = cols(boxes, 2, 3), h = cols(boxes, 3, 4);
    CornerSlices c;
    c.x0 = sub(cx, scale(w, 0.5));
    c.x1 = add(cx, scale(w, 0.5));
    c.y0 = sub(cy, scale(h, 0.5));
    c.y1 = add(cy, scale(h, 0.5));
    c.area = mul(w, h);
    return c;
}

/// Column vector of giou(pred_j, gt_j) for aligned box rows.
inline Tensor giou_pairs(Tensor pred_boxes, Tensor gt_boxes) {
    const CornerSlices p = corner_slices(pred_boxes);
    const CornerSlices g = corner_slices(gt_boxes);
    Tensor iw = clamp_min(sub(vmin(p.x1, g.x1), vmax(p.x0, g.x0)), 0.0);
    Tensor ih = clamp_min(sub(vmin(p.y1, g.y1), vmax(p.y0, g.y0)), 0.0);
    Tensor inter = mul(iw, ih);
    Tensor uni = sub(add(p.area, g.area), inter);
    Tensor hull = mul(sub(vmax(p.x1, g.x1), vmin(p.x0, g.x0)),
                      sub(vmax(p.y1, g.y1), vmin(p.y0, g.y0)));
    Tensor iou_t = div(inter, clamp_min(uni, kGeomEps));
    return sub(iou_t, div(sub(hull, uni), clamp_min(hull, kGeomEps)));
}

} // namespace detail

/// Materializes head outputs into plain predictions (for cost building and
/// evaluation) without re-running the heads.
inline std::vector<Prediction> materialize_predictions(const HeadOutputs& ho) {
    const int n = ho.class_logits.rows();
    const int kw = ho.class_logits.cols();
    std::vector<Prediction> preds(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        auto& p = preds[static_cast<std::size_t>(i)];
        p.class_logits.assign(ho.class_logits.values().begin() + static_cast<std::ptrdiff_t>(i) * kw,
                              ho.class_logits.values().begin() + static_cast<std::ptrdiff_t>(i + 1) * kw);
        p.box = BBox{ho.boxes.at(i, 0), ho.boxes.at(i, 1), ho.boxes.at(i, 2), ho.boxes.at(i, 3)};
    }
    return preds;
}

/// Loss of one supervised set under a fixed assignment.
inline SetLossTerms set_loss(const HeadOutputs& ho, const GroundTruth& gt, const Assignment& a,
                             const LossWeights& w) {
    Graph* g = ho.class_logits.graph();
    const int n = ho.class_logits.rows();
    const int background = ho.class_logits.cols() - 1;
    const int m = gt.count();
    const double norm = 1.0 / std::max(m, 1);

    std::vector<int> labels(static_cast<std::size_t>(n), background);
    std::vector<double> weights(static_cast<std::size_t>(n), w.background * norm);
    for (int j = 0; j < m; ++j) {
        const int q = a.query_of_gt[static_cast<std::size_t>(j)];
        labels[static_cast<std::size_t>(q)] = gt.labels[static_cast<std::size_t>(j)];
        weights[static_cast<std::size_t>(q)] = norm;
    }

    SetLossTerms out;
    out.cls = cross_entropy_rows(ho.class_logits, std::move(labels), std::move(weights));
    if (m > 0) {
        std::vector<int> matched_rows(static_cast<std::size_t>(m));
        std::vector<double> gt_rows(static_cast<std::size_t>(m) * 4);
        for (int j = 0; j < m; ++j) {
            matched_rows[static_cast<std::size_t>(j)] = a.query_of_gt[static_cast<std::size_t>(j)];
            const BBox& b = gt.boxes[static_cast<std::size_t>(j)];
            gt_rows[static_cast<std::size_t>(j) * 4 + 0] = b.cx;
            gt_rows[static_cast<std::size_t>(j) * 4 + 1] = b.cy;
            gt_rows[static_cast<std::size_t>(j) * 4 + 2] = b.w;
            gt_rows[static_cast<std::size_t>(j) * 4 + 3] = b.h;
        }
        Tensor pred_boxes = rows(ho.boxes, matched_rows);
        Tensor gt_boxes = g->input({m, 4}, std::move(gt_rows));
        out.l1 = scale(sum(vabs(sub(pred_boxes, gt_boxes))), norm);
        out.giou = scale(sum(affine(detail::giou_pairs(pred_boxes, gt_boxes), -1.0, 1.0)), norm);
    } else {
        out.l1 = g->constant(0.0);
        out.giou = g->constant(0.0);
    }
    out.total = add(add(scale(out.cls, w.cls), scale(out.l1, w.l1)), scale(out.giou, w.giou));
    return out;
}

/// All loss numbers of one training sample: per-set terms grouped by stage,
/// per-stage totals, and the tape scalar that gets differentiated.
struct LossBreakdown {
    std::vector<std::vector<SetLossTerms>> per_stage;
    std::vector<double> stage_total; // value of the (possibly reweighted) per-stage sum
    double grand_total = 0.0;
    Tensor tape_total;
};

/// Sums supervised-set losses in deterministic stage-ascending, lineage-sorted
/// order. Reweighting multiplies each stage's (single) set by its configured
/// weight; a weight of exactly 1 adds the term unchanged, so all-ones
/// reweighting is bit-identical to the plain sum.
inline LossBreakdown aggregate_losses(Graph& g, std::vector<std::vector<SetLossTerms>> per_stage,
                                      const StrategyConfig& st) {
    const int stages = static_cast<int>(per_stage.size());
    std::vector<double> stage_weights(static_cast<std::size_t>(stages), 1.0);
    if (st.kind == StrategyKind::Reweight) {
        stage_weights = st.stage_weights.empty() ? fibonacci_weights(stages) : st.stage_weights;
        if (static_cast<int>(stage_weights.size()) != stages)
            throw ConfigError("stage_weights length must equal the stage count");
    }

    LossBreakdown out;
    out.per_stage = std::move(per_stage);
    out.stage_total.assign(static_cast<std::size_t>(stages), 0.0);
    Tensor acc;
    for (int s = 0; s < stages; ++s) {
        const double sw = stage_weights[static_cast<std::size_t>(s)];
        for (const auto& terms : out.per_stage[static_cast<std::size_t>(s)]) {
            Tensor t = sw == 1.0 ? terms.total : scale(terms.total, sw);
            out.stage_total[static_cast<std::size_t>(s)] += t.item();
            acc = acc.defined() ? add(acc, t) : t;
        }
    }
    if (!acc.defined()) acc = g.constant(0.0);
    out.tape_total = acc;
    out.grand_total = acc.item();
    return out;
}

/// Matching + loss for every supervised set of one sample, aggregated per the
/// strategy. Each set gets its own independent assignment.
inline LossBreakdown compute_losses(DecodePass& pass, const SupervisedBatch& batch,
                                    const GroundTruth& gt, const LossWeights& w,
                                    const StrategyConfig& st) {
    std::vector<std::vector<SetLossTerms>> per_stage(batch.per_stage.size());
    for (std::size_t s = 0; s < batch.per_stage.size(); ++s) {
        for (const auto& set : batch.per_stage[s]) {
            HeadOutputs ho = pass.predict_heads(set.queries);
            const Assignment a = hungarian(build_cost_matrix(materialize_predictions(ho), gt, w));
            SetLossTerms terms = set_loss(ho, gt, a, w);
            terms.lineage = set.lineage;
            per_stage[s].push_back(std::move(terms));
        }
    }
    return aggregate_losses(pass.graph(), std::move(per_stage), st);
}

} // namespace qrlab
