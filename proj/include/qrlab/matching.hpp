#pragma once

// One-to-one assignment between queries and ground truths. The cost matrix
// has one row per query (n) and one column per ground truth (m), n >= m;
// the solver returns the injective ground-truth -> query map of minimum
// total cost via shortest augmenting paths with potentials.

#include <cmath>
#include <limits>
#include <vector>

#include "qrlab/decoder.hpp"
#include "qrlab/errors.hpp"
#include "qrlab/geometry.hpp"

namespace qrlab {

struct GroundTruth {
    std::vector<BBox> boxes;
    std::vector<int> labels; // class ids in 0..K-1

    int count() const { return static_cast<int>(boxes.size()); }
};

inline void validate_ground_truth(const GroundTruth& gt, int classes) {
    if (gt.boxes.size() != gt.labels.size())
        throw ContractError("ground truth boxes and labels differ in length");
    for (int l : gt.labels)
        if (l < 0 || l >= classes) throw ContractError("ground-truth label out of range");
}

/// Rows are queries, columns are ground truths.
struct CostMatrix {
    int n = 0; // queries
    int m = 0; // ground truths
    std::vector<double> cost; // row-major [n, m]

    double at(int query, int gt) const { return cost[static_cast<std::size_t>(query) * m + gt]; }
    double& at(int query, int gt) { return cost[static_cast<std::size_t>(query) * m + gt]; }
};

/// Shared weight bundle for the matching cost and the set loss.
struct LossWeights {
    double cls = 2.0;
    double l1 = 5.0;
    double giou = 2.0;
    double background = 0.1; // down-weight on unmatched queries' class term
};

struct Assignment {
    std::vector<int> query_of_gt; // size m, injective into 0..n-1
    std::vector<int> gt_of_query; // size n, -1 where unmatched

    int matched_count() const { return static_cast<int>(query_of_gt.size()); }
};

inline std::vector<double> class_probs(const Prediction& p) {
    double mx = p.class_logits[0];
    for (double z : p.class_logits) mx = std::max(mx, z);
    std::vector<double> probs(p.class_logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        probs[i] = std::exp(p.class_logits[i] - mx);
        s += probs[i];
    }
    for (double& v : probs) v /= s;
    return probs;
}

/// cost(i,j) = -w_cls * prob_i(label_j) + w_l1 * box_l1 + w_giou * (1 - giou).
/// m == 0 yields an empty matrix (every query becomes background downstream).
inline CostMatrix build_cost_matrix(const std::vector<Prediction>& preds, const GroundTruth& gt,
                                    const LossWeights& w) {
    CostMatrix cm;
    cm.n = static_cast<int>(preds.size());
    cm.m = gt.count();
    if (cm.m == 0) return cm;
    if (cm.n < cm.m) throw ContractError("fewer queries than ground truths");
    cm.cost.resize(static_cast<std::size_t>(cm.n) * cm.m);
    for (int i = 0; i < cm.n; ++i) {
        const auto probs = class_probs(preds[static_cast<std::size_t>(i)]);
        for (int j = 0; j < cm.m; ++j) {
            const BBox& gb = gt.boxes[static_cast<std::size_t>(j)];
            cm.at(i, j) = -w.cls * probs[static_cast<std::size_t>(gt.labels[static_cast<std::size_t>(j)])] +
                          w.l1 * box_l1(preds[static_cast<std::size_t>(i)].box, gb) +
                          w.giou * (1.0 - giou(preds[static_cast<std::size_t>(i)].box, gb));
            if (!std::isfinite(cm.at(i, j)))
                throw DivergenceError("non-finite assignment cost; model outputs diverged");
        }
    }
    return cm;
}

/// Minimum-cost injective assignment of ground truths to queries.
/// Ties resolve by the deterministic low-index scan order of the
/// augmenting-path search, so identical inputs give identical assignments.
inline Assignment hungarian(const CostMatrix& cm) {
    Assignment a;
    if (cm.m == 0) {
        a.gt_of_query.assign(static_cast<std::size_t>(cm.n), -1);
        return a;
    }
    if (cm.n < cm.m) throw ContractError("cost matrix needs at least as many queries as ground truths");
    for (double c : cm.cost)
        if (!std::isfinite(c)) throw DivergenceError("non-finite cost matrix");
    const int m = cm.m, n = cm.n;
    const double inf = std::numeric_limits<double>::infinity();
    // 1-based arrays; rows of the search are ground truths, columns queries.
    std::vector<double> u(static_cast<std::size_t>(m) + 1, 0.0), v(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<int> match(static_cast<std::size_t>(n) + 1, 0), way(static_cast<std::size_t>(n) + 1, 0);
    for (int i = 1; i <= m; ++i) {
        match[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
        std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const int i0 = match[static_cast<std::size_t>(j0)];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = cm.at(j - 1, i0 - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (match[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    a.query_of_gt.assign(static_cast<std::size_t>(m), -1);
    a.gt_of_query.assign(static_cast<std::size_t>(n), -1);
    for (int j = 1; j <= n; ++j) {
        if (match[static_cast<std::size_t>(j)] != 0) {
            a.query_of_gt[static_cast<std::size_t>(match[static_cast<std::size_t>(j)] - 1)] = j - 1;
            a.gt_of_query[static_cast<std::size_t>(j - 1)] = match[static_cast<std::size_t>(j)] - 1;
        }
    }
    return a;
}

inline double assignment_cost(const CostMatrix& cm, const Assignment& a) {
    double total = 0.0;
    for (int j = 0; j < cm.m; ++j) total += cm.at(a.query_of_gt[static_cast<std::size_t>(j)], j);
    return total;
}

} // namespace qrlab
