#pragma once

// Stage-wise evaluation of prediction chains. Consumes materialized
// predictions only (no tape), so it works identically on freshly decoded
// outputs and on reloaded dump files.
//
// Conventions, fixed here and relied on by the fixtures:
//  - The score of a prediction is its maximum non-background softmax
//    probability; its class is that argmax (ties -> lower class id).
//  - A final-stage prediction becomes a TP by greedy claiming: predictions
//    in score order (ties -> lower query id) claim the unclaimed ground
//    truth of matching class with IoU strictly above the threshold,
//    preferring higher IoU (ties -> lower ground-truth index). Non-claiming
//    predictions with score >= the floor are FPs; below the floor they are
//    ignored.
//  - A chain member "qualifies" toward a ground truth when its class matches
//    and its IoU exceeds the threshold; no ranking is applied at earlier
//    stages.
//  - A chain member is "FP-like" when its score >= the floor and it
//    qualifies toward no ground truth.

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "qrlab/errors.hpp"
#include "qrlab/geometry.hpp"
#include "qrlab/matching.hpp"

namespace qrlab {

inline constexpr double kScoreFloor = 0.05;

/// Per-image chain of predictions: per_stage[s-1][i] is query i's prediction
/// at stage s. Query identity is the index i across stages.
struct StagePredictions {
    std::vector<std::vector<Prediction>> per_stage;

    int stages() const { return static_cast<int>(per_stage.size()); }
    int queries() const { return per_stage.empty() ? 0 : static_cast<int>(per_stage[0].size()); }
};

/// One evaluated image.
struct ImageEval {
    StagePredictions preds;
    GroundTruth gt;
};

/// Class-and-score view of a prediction.
struct Scored {
    int label = 0;
    double score = 0.0;
    BBox box;
};

inline Scored scored_of(const Prediction& p) {
    const auto probs = class_probs(p);
    Scored s;
    s.box = p.box;
    const int foreground = static_cast<int>(probs.size()) - 1;
    for (int c = 1; c < foreground; ++c)
        if (probs[static_cast<std::size_t>(c)] > probs[static_cast<std::size_t>(s.label)]) s.label = c;
    s.score = probs[static_cast<std::size_t>(s.label)];
    return s;
}

enum class VerdictStatus { TP, FP, Ignored };

/// Verdicts for the final stage of one image.
struct TPVerdict {
    std::vector<VerdictStatus> status; // per query
    std::vector<int> matched_gt;       // per query, -1 unless TP
    std::vector<double> matched_iou;   // per query, IoU with the matched ground truth
    std::vector<Scored> scored;        // per query, final-stage class/score/box

    int tp_count() const {
        int c = 0;
        for (auto s : status) c += s == VerdictStatus::TP;
        return c;
    }
    int fp_count() const {
        int c = 0;
        for (auto s : status) c += s == VerdictStatus::FP;
        return c;
    }
};

/// Greedy score-ranked claiming of ground truths by final-stage predictions.
inline TPVerdict classify_final(const StagePredictions& preds, const GroundTruth& gt,
                                double iou_thresh, double score_floor = kScoreFloor) {
    if (preds.stages() < 1) throw ContractError("prediction chain has no stages");
    const auto& finals = preds.per_stage.back();
    const int n = static_cast<int>(finals.size());
    TPVerdict v;
    v.status.assign(static_cast<std::size_t>(n), VerdictStatus::Ignored);
    v.matched_gt.assign(static_cast<std::size_t>(n), -1);
    v.matched_iou.assign(static_cast<std::size_t>(n), 0.0);
    v.scored.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) v.scored[static_cast<std::size_t>(i)] = scored_of(finals[static_cast<std::size_t>(i)]);

    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return v.scored[static_cast<std::size_t>(a)].score > v.scored[static_cast<std::size_t>(b)].score;
    });

    std::vector<char> claimed(gt.boxes.size(), 0);
    for (int i : order) {
        const Scored& s = v.scored[static_cast<std::size_t>(i)];
        int best = -1;
        double best_iou = iou_thresh;
        for (int j = 0; j < gt.count(); ++j) {
            if (claimed[static_cast<std::size_t>(j)] || gt.labels[static_cast<std::size_t>(j)] != s.label) continue;
            const double ov = iou(s.box, gt.boxes[static_cast<std::size_t>(j)]);
            if (ov > best_iou) {
                best_iou = ov;
                best = j;
            }
        }
        if (best >= 0) {
            claimed[static_cast<std::size_t>(best)] = 1;
            v.status[static_cast<std::size_t>(i)] = VerdictStatus::TP;
            v.matched_gt[static_cast<std::size_t>(i)] = best;
            v.matched_iou[static_cast<std::size_t>(i)] = best_iou;
        } else if (s.score >= score_floor) {
            v.status[static_cast<std::size_t>(i)] = VerdictStatus::FP;
        }
    }
    return v;
}

/// A triggered/total pair; the rate is absent when the denominator is zero.
struct RateResult {
    int triggered = 0;
    int total = 0;

    std::optional<double> rate() const {
        if (total == 0) return std::nullopt;
        return static_cast<double>(triggered) / total;
    }
};

namespace detail {

inline bool qualifies(const Scored& s, const BBox& gt_box, int gt_label, double thresh) {
    return s.label == gt_label && iou(s.box, gt_box) > thresh;
}

inline bool fp_like(const Scored& s, const GroundTruth& gt, double thresh, double floor) {
    if (s.score < floor) return false;
    for (int j = 0; j < gt.count(); ++j)
        if (qualifies(s, gt.boxes[static_cast<std::size_t>(j)], gt.labels[static_cast<std::size_t>(j)], thresh))
            return false;
    return true;
}

} // namespace detail

/// Fading / exacerbation counts with the chain search restricted to the given
/// earlier stages. Pooled over all images.
inline std::pair<RateResult, RateResult> stage_attribution(const std::vector<ImageEval>& images,
                                                           double iou_thresh,
                                                           const std::vector<int>& stages,
                                                           double score_floor = kScoreFloor) {
    RateResult fading, exacerbation;
    for (const auto& img : images) {
        const int S = img.preds.stages();
        for (int s : stages)
            if (s < 1 || s >= S) throw ContractError("attribution stages must lie in [1, S-1]");
        const TPVerdict v = classify_final(img.preds, img.gt, iou_thresh, score_floor);
        const int n = img.preds.queries();
        for (int i = 0; i < n; ++i) {
            const Scored& fin = v.scored[static_cast<std::size_t>(i)];
            if (v.status[static_cast<std::size_t>(i)] == VerdictStatus::TP) {
                fading.total += 1;
                const int j = v.matched_gt[static_cast<std::size_t>(i)];
                const double final_iou = v.matched_iou[static_cast<std::size_t>(i)];
                bool hit = false;
                for (int s : stages) {
                    const Scored cand = scored_of(img.preds.per_stage[static_cast<std::size_t>(s - 1)][static_cast<std::size_t>(i)]);
                    if (!detail::qualifies(cand, img.gt.boxes[static_cast<std::size_t>(j)],
                                           img.gt.labels[static_cast<std::size_t>(j)], iou_thresh))
                        continue;
                    const double cand_iou = iou(cand.box, img.gt.boxes[static_cast<std::size_t>(j)]);
                    if (cand_iou > final_iou && cand.score > fin.score) {
                        hit = true;
                        break;
                    }
                }
                fading.triggered += hit;
            } else if (v.status[static_cast<std::size_t>(i)] == VerdictStatus::FP) {
                exacerbation.total += 1;
                bool hit = false;
                for (int s : stages) {
                    const Scored cand = scored_of(img.preds.per_stage[static_cast<std::size_t>(s - 1)][static_cast<std::size_t>(i)]);
                    if (detail::fp_like(cand, img.gt, iou_thresh, score_floor) && cand.score < fin.score) {
                        hit = true;
                        break;
                    }
                }
                exacerbation.triggered += hit;
            }
        }
    }
    return {fading, exacerbation};
}

inline std::vector<int> all_earlier_stages(const std::vector<ImageEval>& images) {
    int S = 0;
    for (const auto& img : images) S = std::max(S, img.preds.stages());
    std::vector<int> stages;
    for (int s = 1; s < S; ++s) stages.push_back(s);
    return stages;
}

/// Fraction of final-stage TPs beaten by an earlier chain member with
/// strictly higher IoU and strictly higher score toward the same ground
/// truth. Absent when there are no final TPs.
inline std::optional<double> tp_fading_rate(const std::vector<ImageEval>& images, double iou_thresh,
                                            double score_floor = kScoreFloor) {
    return stage_attribution(images, iou_thresh, all_earlier_stages(images), score_floor).first.rate();
}

/// Fraction of final-stage FPs whose chain contained an FP with strictly
/// lower score. Absent when there are no final FPs.
inline std::optional<double> fp_exacerbation_rate(const std::vector<ImageEval>& images,
                                                  double iou_thresh,
                                                  double score_floor = kScoreFloor) {
    return stage_attribution(images, iou_thresh, all_earlier_stages(images), score_floor).second.rate();
}

/// One image's scored predictions for ranking-based evaluation.
struct ScoredImage {
    std::vector<Scored> preds;
    GroundTruth gt;
};

/// Class-averaged AP with 101-point interpolation. Per class, predictions of
/// that class are ranked by score (ties -> lower image then query index) and
/// greedily matched to unclaimed same-class ground truths with IoU strictly
/// above the threshold, preferring higher IoU. Classes without ground truths
/// are skipped; no ground truths at all gives 0.
inline double average_precision(const std::vector<ScoredImage>& images, double iou_thresh) {
    int classes = 0;
    for (const auto& img : images)
        for (int l : img.gt.labels) classes = std::max(classes, l + 1);
    if (classes == 0) return 0.0;

    double ap_sum = 0.0;
    int counted = 0;
    for (int c = 0; c < classes; ++c) {
        int gt_total = 0;
        for (const auto& img : images)
            for (int l : img.gt.labels) gt_total += l == c;
        if (gt_total == 0) continue;

        struct Det {
            double score;
            int image, index;
        };
        std::vector<Det> dets;
        for (int ii = 0; ii < static_cast<int>(images.size()); ++ii)
            for (int pi = 0; pi < static_cast<int>(images[static_cast<std::size_t>(ii)].preds.size()); ++pi)
                if (images[static_cast<std::size_t>(ii)].preds[static_cast<std::size_t>(pi)].label == c)
                    dets.push_back({images[static_cast<std::size_t>(ii)].preds[static_cast<std::size_t>(pi)].score, ii, pi});
        std::sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.image != b.image) return a.image < b.image;
            return a.index < b.index;
        });

        std::vector<std::vector<char>> claimed;
        claimed.reserve(images.size());
        for (const auto& img : images) claimed.emplace_back(img.gt.boxes.size(), 0);

        std::vector<char> is_tp(dets.size(), 0);
        for (std::size_t di = 0; di < dets.size(); ++di) {
            const auto& det = dets[di];
            const auto& img = images[static_cast<std::size_t>(det.image)];
            const Scored& p = img.preds[static_cast<std::size_t>(det.index)];
            int best = -1;
            double best_iou = iou_thresh;
            for (int j = 0; j < img.gt.count(); ++j) {
                if (claimed[static_cast<std::size_t>(det.image)][static_cast<std::size_t>(j)] ||
                    img.gt.labels[static_cast<std::size_t>(j)] != c)
                    continue;
                const double ov = iou(p.box, img.gt.boxes[static_cast<std::size_t>(j)]);
                if (ov > best_iou) {
                    best_iou = ov;
                    best = j;
                }
            }
            if (best >= 0) {
                claimed[static_cast<std::size_t>(det.image)][static_cast<std::size_t>(best)] = 1;
                is_tp[di] = 1;
            }
        }

        // Precision as a function of recall, then the 101-point mean of the
        // running-maximum precision.
        std::vector<double> precision, recall;
        int tp = 0;
        for (std::size_t di = 0; di < dets.size(); ++di) {
            tp += is_tp[di];
            precision.push_back(static_cast<double>(tp) / static_cast<double>(di + 1));
            recall.push_back(static_cast<double>(tp) / gt_total);
        }
        double ap = 0.0;
        for (int r = 0; r <= 100; ++r) {
            const double target = r / 100.0;
            double best_p = 0.0;
            for (std::size_t k = 0; k < precision.size(); ++k)
                if (recall[k] >= target - 1e-12) best_p = std::max(best_p, precision[k]);
            ap += best_p;
        }
        ap_sum += ap / 101.0;
        counted += 1;
    }
    return counted == 0 ? 0.0 : ap_sum / counted;
}

inline std::vector<ScoredImage> scored_stage(const std::vector<ImageEval>& images, int stage) {
    std::vector<ScoredImage> out;
    out.reserve(images.size());
    for (const auto& img : images) {
        if (stage < 1 || stage > img.preds.stages()) throw ContractError("stage out of range");
        ScoredImage si;
        si.gt = img.gt;
        for (const auto& p : img.preds.per_stage[static_cast<std::size_t>(stage - 1)])
            si.preds.push_back(scored_of(p));
        out.push_back(std::move(si));
    }
    return out;
}

inline double stage_average_precision(const std::vector<ImageEval>& images, int stage,
                                      double iou_thresh) {
    return average_precision(scored_stage(images, stage), iou_thresh);
}

/// Replaces each triggered final prediction with its best chain member and
/// evaluates AP. For triggered TPs the best qualifier has the highest IoU
/// (ties -> higher score, then later stage); for triggered FPs it is the
/// triggering member with the lowest score (ties -> earlier stage).
inline double oracle_replacement_ap(const std::vector<ImageEval>& images, double iou_thresh,
                                    double score_floor = kScoreFloor) {
    std::vector<ScoredImage> replaced;
    replaced.reserve(images.size());
    for (const auto& img : images) {
        const TPVerdict v = classify_final(img.preds, img.gt, iou_thresh, score_floor);
        const int S = img.preds.stages();
        ScoredImage si;
        si.gt = img.gt;
        for (int i = 0; i < img.preds.queries(); ++i) {
            Scored chosen = v.scored[static_cast<std::size_t>(i)];
            if (v.status[static_cast<std::size_t>(i)] == VerdictStatus::TP) {
                const int j = v.matched_gt[static_cast<std::size_t>(i)];
                const double final_iou = v.matched_iou[static_cast<std::size_t>(i)];
                bool triggered = false;
                double best_iou = final_iou;
                double best_score = chosen.score;
                for (int s = 1; s < S; ++s) {
                    const Scored cand = scored_of(img.preds.per_stage[static_cast<std::size_t>(s - 1)][static_cast<std::size_t>(i)]);
                    if (!detail::qualifies(cand, img.gt.boxes[static_cast<std::size_t>(j)],
                                           img.gt.labels[static_cast<std::size_t>(j)], iou_thresh))
                        continue;
                    const double cand_iou = iou(cand.box, img.gt.boxes[static_cast<std::size_t>(j)]);
                    if (cand_iou > final_iou && cand.score > v.scored[static_cast<std::size_t>(i)].score)
                        triggered = true;
                    if (cand_iou > best_iou ||
                        (cand_iou == best_iou && cand.score >= best_score)) {
                        best_iou = cand_iou;
                        best_score = cand.score;
                        chosen = cand;
                    }
                }
                if (!triggered) chosen = v.scored[static_cast<std::size_t>(i)];
            } else if (v.status[static_cast<std::size_t>(i)] == VerdictStatus::FP) {
                Scored best = chosen;
                for (int s = 1; s < S; ++s) {
                    const Scored cand = scored_of(img.preds.per_stage[static_cast<std::size_t>(s - 1)][static_cast<std::size_t>(i)]);
                    if (detail::fp_like(cand, img.gt, iou_thresh, score_floor) && cand.score < best.score)
                        best = cand;
                }
                chosen = best;
            }
            si.preds.push_back(chosen);
        }
        replaced.push_back(std::move(si));
    }
    return average_precision(replaced, iou_thresh);
}

/// One attribution row: the searched stages and both rates.
struct AttributionRow {
    std::vector<int> stages;
    RateResult fading;
    RateResult exacerbation;
};

/// Report section for one IoU threshold.
struct DiagnosticsSection {
    double iou_thresh = 0.5;
    std::vector<double> per_stage_ap;
    RateResult fading;
    RateResult exacerbation;
    std::vector<AttributionRow> attribution; // singleton stages, then all
    double final_ap = 0.0;
    double oracle_ap = 0.0;
};

struct DiagnosticsReport {
    std::vector<DiagnosticsSection> sections;
};

inline DiagnosticsReport diagnose(const std::vector<ImageEval>& images,
                                  const std::vector<double>& thresholds = {0.5, 0.75},
                                  double score_floor = kScoreFloor) {
    DiagnosticsReport report;
    int S = 0;
    for (const auto& img : images) S = std::max(S, img.preds.stages());
    for (double t : thresholds) {
        DiagnosticsSection sec;
        sec.iou_thresh = t;
        for (int s = 1; s <= S; ++s) sec.per_stage_ap.push_back(stage_average_precision(images, s, t));
        const auto full = all_earlier_stages(images);
        auto [fade, exac] = stage_attribution(images, t, full, score_floor);
        sec.fading = fade;
        sec.exacerbation = exac;
        for (int s = 1; s < S; ++s) {
            auto [f1, e1] = stage_attribution(images, t, {s}, score_floor);
            sec.attribution.push_back(AttributionRow{{s}, f1, e1});
        }
        sec.attribution.push_back(AttributionRow{full, fade, exac});
        sec.final_ap = S > 0 ? sec.per_stage_ap.back() : 0.0;
        sec.oracle_ap = oracle_replacement_ap(images, t, score_floor);
        report.sections.push_back(std::move(sec));
    }
    return report;
}

} // namespace qrlab
