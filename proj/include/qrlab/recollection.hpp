#pragma once

// Pathway algebra over the staged decoder: the basic forward pass, dense and
// selective recollection, grouped-pathway designs, stochastic stage skipping,
// and the self-recurrent variant. Each strategy produces a SupervisedBatch —
// the per-stage list of query sets that receive their own assignment + loss.
//
// Deployed inference is the basic pathway for every strategy except the
// recurrent one; the strategy flag changes training only.

#include <algorithm>
#include <string>
#include <vector>

#include "qrlab/decoder.hpp"
#include "qrlab/errors.hpp"
#include "qrlab/rng.hpp"

namespace qrlab {

/// Ordered stage indices a query set has traversed, e.g. {1,2,3}. Strictly
/// increasing except under recurrent inference, where the final index may
/// repeat.
using Pathway = std::vector<int>;

inline std::string pathway_str(const Pathway& p) {
    if (p.empty()) return "0";
    std::string s;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (i) s += '-';
        s += std::to_string(p[i]);
    }
    return s;
}

struct CollectionEntry {
    QuerySet queries;
    Pathway lineage;
    int born_at = 0; // stage that emitted this entry; 0 for the initial set

    bool operator<(const CollectionEntry& other) const { return lineage < other.lineage; }
};

/// The set of query sets alive after a stage.
struct Collection {
    std::vector<CollectionEntry> entries;

    std::size_t size() const { return entries.size(); }

    void sort_by_lineage() { std::sort(entries.begin(), entries.end()); }
};

/// Entries of `c` born exactly at stage `s - 1` — the two-nearest-stages
/// selection rule: when forming the collection after stage s, the survivors
/// are precisely the sets the previous stage emitted.
inline Collection select_recent(const Collection& c, int s) {
    Collection out;
    for (const auto& e : c.entries)
        if (e.born_at == s - 1) out.entries.push_back(e);
    return out;
}

enum class StrategyKind { Baseline, DQR, SQR, GroupDesign, Reweight, StochDepth, DQRR };

inline const char* strategy_name(StrategyKind k) {
    switch (k) {
    case StrategyKind::Baseline: return "baseline";
    case StrategyKind::DQR: return "dqr";
    case StrategyKind::SQR: return "sqr";
    case StrategyKind::GroupDesign: return "group_design";
    case StrategyKind::Reweight: return "reweight";
    case StrategyKind::StochDepth: return "stochdepth";
    case StrategyKind::DQRR: return "dqrr";
    }
    return "?";
}

struct StrategyConfig {
    StrategyKind kind = StrategyKind::Baseline;
    int sqr_start = 1;                 // SQR: first stage that recollects
    int design = 1;                    // GroupDesign: 1..6 for designs I..VI
    std::vector<double> stage_weights; // Reweight: per-stage loss multipliers
    std::vector<double> removal_probs; // StochDepth: per-stage skip probability
    int collection_cap = 128;          // guard on collection growth
};

/// First `s` terms of the loss-reweighting sequence 1, 2, 3, 5, 8, 13, ...
inline std::vector<double> fibonacci_weights(int s) {
    std::vector<double> w;
    double a = 1.0, b = 2.0;
    for (int i = 0; i < s; ++i) {
        w.push_back(a);
        const double next = a + b;
        a = b;
        b = next;
    }
    return w;
}

inline int group_count(int design) {
    switch (design) {
    case 1: return 3;
    case 2: return 4;
    case 3: return 4;
    case 4: return 1; // selective recollection starting at stage 2
    case 5: return 6;
    case 6: return 1; // selective recollection starting at stage 1
    default: throw ConfigError("unknown group design " + std::to_string(design));
    }
}

/// The grouped pathways of a design as (entry stage, exit stage) pairs.
/// Designs 4 and 6 are handled by sqr_forward instead.
inline std::vector<std::pair<int, int>> design_pathways(int design, int stages) {
    std::vector<std::pair<int, int>> p;
    switch (design) {
    case 1:
        for (int i = 0; i < 3; ++i) p.emplace_back(1, stages);
        break;
    case 2:
        if (stages < 4) throw ConfigError("design II needs at least 4 stages");
        for (int i = 0; i < 4; ++i) p.emplace_back(1, stages - i);
        break;
    case 3:
        if (stages < 4) throw ConfigError("design III needs at least 4 stages");
        for (int i = 0; i < 4; ++i) p.emplace_back(1 + i, stages);
        break;
    case 5:
        for (int i = 0; i < 6; ++i) p.emplace_back(1, stages);
        break;
    default:
        throw ConfigError("design " + std::to_string(design) + " has no grouped pathways");
    }
    return p;
}

inline void validate_strategy(const StrategyConfig& st, int stages) {
    switch (st.kind) {
    case StrategyKind::SQR:
        if (st.sqr_start < 1 || st.sqr_start > stages - 1)
            throw ConfigError("sqr_start must lie in [1, stages-1]");
        break;
    case StrategyKind::GroupDesign:
        if (st.design < 1 || st.design > 6)
            throw ConfigError("group design must lie in [1, 6]");
        if (st.design == 2 || st.design == 3)
            (void)design_pathways(st.design, stages); // stage-count check
        break;
    case StrategyKind::Reweight:
        if (!st.stage_weights.empty() && static_cast<int>(st.stage_weights.size()) != stages)
            throw ConfigError("stage_weights length must equal the stage count");
        break;
    case StrategyKind::StochDepth:
        if (static_cast<int>(st.removal_probs.size()) != stages)
            throw ConfigError("removal_probs length must equal the stage count");
        for (double p : st.removal_probs)
            if (p < 0.0 || p >= 1.0) throw ConfigError("removal probabilities must lie in [0, 1)");
        break;
    default:
        break;
    }
    if (st.collection_cap < 1) throw ConfigError("collection cap must be positive");
}

/// One query set requiring assignment + loss.
struct SupervisedSet {
    QuerySet queries;
    Pathway lineage;
    int group = 0; // grouped designs only
};

/// Per-stage supervised sets; index s-1 holds the sets emitted at stage s.
struct SupervisedBatch {
    std::vector<std::vector<SupervisedSet>> per_stage;

    explicit SupervisedBatch(int stages = 0) : per_stage(static_cast<std::size_t>(stages)) {}

    std::vector<int> counts() const {
        std::vector<int> c;
        c.reserve(per_stage.size());
        for (const auto& v : per_stage) c.push_back(static_cast<int>(v.size()));
        return c;
    }

    int total() const {
        int t = 0;
        for (const auto& v : per_stage) t += static_cast<int>(v.size());
        return t;
    }

    void sort_stages_by_lineage() {
        for (auto& v : per_stage)
            std::sort(v.begin(), v.end(), [](const SupervisedSet& a, const SupervisedSet& b) {
                if (a.group != b.group) return a.group < b.group;
                return a.lineage < b.lineage;
            });
    }
};

/// Exact per-stage supervised-set counts for any strategy.
inline std::vector<int> supervision_schedule(const StrategyConfig& st, int stages) {
    validate_strategy(st, stages);
    std::vector<int> counts(static_cast<std::size_t>(stages), 0);
    switch (st.kind) {
    case StrategyKind::Baseline:
    case StrategyKind::Reweight:
    case StrategyKind::StochDepth:
        std::fill(counts.begin(), counts.end(), 1);
        break;
    case StrategyKind::DQR:
        for (int s = 1; s <= stages; ++s) counts[static_cast<std::size_t>(s - 1)] = 1 << (s - 1);
        break;
    case StrategyKind::DQRR:
        for (int s = 1; s <= stages; ++s) counts[static_cast<std::size_t>(s - 1)] = 1 << (s - 1);
        counts.back() += 1; // the final stage's output re-decoded by itself
        break;
    case StrategyKind::SQR: {
        // Collection size evolves by alive' = new + select, where new = alive
        // and select = the previous stage's emission count.
        int alive = 1, prev_new = 1;
        for (int s = 1; s <= stages; ++s) {
            const int fresh = alive;
            counts[static_cast<std::size_t>(s - 1)] = fresh;
            if (s < st.sqr_start)
                alive = fresh; // plain chain: the new set replaces the old
            else
                alive = fresh + (s == st.sqr_start ? alive : prev_new);
            prev_new = fresh;
        }
        break;
    }
    case StrategyKind::GroupDesign: {
        if (st.design == 4 || st.design == 6) {
            StrategyConfig sqr;
            sqr.kind = StrategyKind::SQR;
            sqr.sqr_start = st.design == 4 ? 2 : 1;
            return supervision_schedule(sqr, stages);
        }
        for (const auto& [first, last] : design_pathways(st.design, stages))
            for (int s = first; s <= last; ++s) counts[static_cast<std::size_t>(s - 1)] += 1;
        break;
    }
    }
    return counts;
}

struct ForwardResult {
    SupervisedBatch batch;
    QuerySet final; // end of the basic pathway
};

/// The plain sequential pass: each stage refines the single chain and its
/// output is supervised once.
inline ForwardResult basic_forward(DecodePass& pass, const QuerySet& q0) {
    const int stages = pass.config().stages;
    ForwardResult r{SupervisedBatch(stages), q0};
    Pathway lineage;
    QuerySet q = q0;
    for (int s = 1; s <= stages; ++s) {
        q = pass.decode_stage(s, q);
        lineage.push_back(s);
        r.batch.per_stage[static_cast<std::size_t>(s - 1)].push_back(SupervisedSet{q, lineage});
    }
    r.final = q;
    return r;
}

/// Dense recollection: every stage decodes every alive set and keeps the old
/// ones too, so the collection doubles per stage and every newly emitted set
/// is supervised. `trace`, when given, receives the collection after each
/// stage (index 0 = the initial collection).
inline ForwardResult dqr_forward(DecodePass& pass, const QuerySet& q0, int collection_cap = 128,
                                 std::vector<Collection>* trace = nullptr) {
    const int stages = pass.config().stages;
    ForwardResult r{SupervisedBatch(stages), q0};
    Collection c;
    c.entries.push_back(CollectionEntry{q0, {}, 0});
    if (trace) trace->push_back(c);
    for (int s = 1; s <= stages; ++s) {
        if (2 * c.size() > static_cast<std::size_t>(collection_cap))
            throw ConfigError("collection would exceed its cap of " + std::to_string(collection_cap));
        std::vector<CollectionEntry> fresh;
        fresh.reserve(c.size());
        for (const auto& e : c.entries) {
            Pathway lineage = e.lineage;
            lineage.push_back(s);
            fresh.push_back(CollectionEntry{pass.decode_stage(s, e.queries), std::move(lineage), s});
        }
        for (const auto& e : fresh)
            r.batch.per_stage[static_cast<std::size_t>(s - 1)].push_back(
                SupervisedSet{e.queries, e.lineage});
        c.entries.insert(c.entries.end(), fresh.begin(), fresh.end());
        c.sort_by_lineage();
        if (trace) trace->push_back(c);
    }
    r.batch.sort_stages_by_lineage();
    for (const auto& e : c.entries)
        if (static_cast<int>(e.lineage.size()) == stages) r.final = e.queries;
    return r;
}

/// Selective recollection: below `start` the pass is the plain chain; from
/// `start` on, every alive set is decoded and only the previous stage's
/// emissions survive alongside, so supervision grows as a Fibonacci sequence.
inline ForwardResult sqr_forward(DecodePass& pass, const QuerySet& q0, int start,
                                 std::vector<Collection>* trace = nullptr) {
    const int stages = pass.config().stages;
    if (start < 1 || start > stages - 1) throw ConfigError("sqr start stage out of range");
    ForwardResult r{SupervisedBatch(stages), q0};
    Collection c;
    c.entries.push_back(CollectionEntry{q0, {}, 0});
    if (trace) trace->push_back(c);
    for (int s = 1; s <= stages; ++s) {
        std::vector<CollectionEntry> fresh;
        fresh.reserve(c.size());
        for (const auto& e : c.entries) {
            Pathway lineage = e.lineage;
            lineage.push_back(s);
            fresh.push_back(CollectionEntry{pass.decode_stage(s, e.queries), std::move(lineage), s});
        }
        for (const auto& e : fresh)
            r.batch.per_stage[static_cast<std::size_t>(s - 1)].push_back(
                SupervisedSet{e.queries, e.lineage});
        Collection next;
        if (s >= start) next = select_recent(c, s);
        next.entries.insert(next.entries.end(), fresh.begin(), fresh.end());
        next.sort_by_lineage();
        c = std::move(next);
        if (trace) trace->push_back(c);
    }
    r.batch.sort_stages_by_lineage();
    for (const auto& e : c.entries)
        if (static_cast<int>(e.lineage.size()) == stages) r.final = e.queries;
    return r;
}

/// Grouped pathways: each group is an independent query set traversing its
/// design-given stage interval, supervised at every traversed stage. Groups
/// with entry stage k > 1 feed their initial embedding straight into stage k.
inline SupervisedBatch group_design_forward(DecodePass& pass, int design,
                                            const std::vector<QuerySet>& q0s) {
    const int stages = pass.config().stages;
    if (design == 4 || design == 6) {
        if (q0s.size() != 1) throw ConfigError("selective-recollection designs take one group");
        return sqr_forward(pass, q0s[0], design == 4 ? 2 : 1).batch;
    }
    const auto pathways = design_pathways(design, stages);
    if (q0s.size() != pathways.size())
        throw ConfigError("design expects " + std::to_string(pathways.size()) + " groups, got " +
                          std::to_string(q0s.size()));
    SupervisedBatch batch(stages);
    for (std::size_t gidx = 0; gidx < pathways.size(); ++gidx) {
        const auto [first, last] = pathways[gidx];
        QuerySet q = q0s[gidx];
        Pathway lineage;
        for (int s = first; s <= last; ++s) {
            q = pass.decode_stage(s, q);
            lineage.push_back(s);
            batch.per_stage[static_cast<std::size_t>(s - 1)].push_back(
                SupervisedSet{q, lineage, static_cast<int>(gidx)});
        }
    }
    batch.sort_stages_by_lineage();
    return batch;
}

/// Draws the per-stage skip mask for one mini-batch.
inline std::vector<char> stochdepth_mask(const std::vector<double>& probs, Rng& rng) {
    std::vector<char> skip(probs.size(), 0);
    for (std::size_t i = 0; i < probs.size(); ++i) skip[i] = rng.bernoulli(probs[i]) ? 1 : 0;
    return skip;
}

/// Stage skipping under a pre-drawn mask: a skipped stage passes the queries
/// through unchanged (its slot is still supervised, with that stage's head,
/// so the network trains under varying effective depth).
inline ForwardResult stochdepth_forward(DecodePass& pass, const QuerySet& q0,
                                        const std::vector<char>& skip) {
    const int stages = pass.config().stages;
    if (static_cast<int>(skip.size()) != stages)
        throw ConfigError("skip mask length must equal the stage count");
    ForwardResult r{SupervisedBatch(stages), q0};
    QuerySet q = q0;
    Pathway lineage;
    for (int s = 1; s <= stages; ++s) {
        if (!skip[static_cast<std::size_t>(s - 1)]) {
            q = pass.decode_stage(s, q);
            lineage.push_back(s);
        } else {
            q.stage = s; // pass-through slot; predictions use this stage's head
        }
        r.batch.per_stage[static_cast<std::size_t>(s - 1)].push_back(SupervisedSet{q, lineage});
    }
    r.final = q;
    return r;
}

/// Convenience overload drawing the mask itself (one call = one mini-batch).
inline ForwardResult stochdepth_forward(DecodePass& pass, const QuerySet& q0,
                                        const std::vector<double>& probs, Rng& rng) {
    return stochdepth_forward(pass, q0, stochdepth_mask(probs, rng));
}

/// Calibrated inference: every stage runs, with its residual terms scaled by
/// one minus its training-time removal probability. The skip connection is
/// never scaled.
inline QuerySet stochdepth_infer(DecodePass& pass, const QuerySet& q0,
                                 const std::vector<double>& probs) {
    const int stages = pass.config().stages;
    if (static_cast<int>(probs.size()) != stages)
        throw ConfigError("removal_probs length must equal the stage count");
    QuerySet q = q0;
    for (int s = 1; s <= stages; ++s)
        q = pass.decode_stage(s, q, 1.0 - probs[static_cast<std::size_t>(s - 1)]);
    return q;
}

/// Dense recollection plus self-recurrence training: the basic chain's final
/// output is fed through the final stage once more and supervised, so that
/// stage learns to refine its own output. Deployment then reuses only that
/// stage (see dqrr_export / dqrr_infer).
inline SupervisedBatch dqrr_forward(DecodePass& pass, const QuerySet& q0, int collection_cap = 128) {
    const int stages = pass.config().stages;
    ForwardResult base = dqr_forward(pass, q0, collection_cap);
    QuerySet again = pass.decode_stage(stages, base.final);
    Pathway lineage;
    for (int s = 1; s <= stages; ++s) lineage.push_back(s);
    lineage.push_back(stages);
    base.batch.per_stage[static_cast<std::size_t>(stages - 1)].push_back(
        SupervisedSet{again, std::move(lineage)});
    base.batch.sort_stages_by_lineage();
    return base.batch;
}

/// Extracts the deployed recurrent model: the final stage's block and heads
/// (plus the initial queries) copied into a store whose single shared stage
/// serves every recurrence step. The result holds exactly one stage's
/// parameters.
inline ParamStore dqrr_export(const ParamStore& trained, const DecoderConfig& cfg) {
    ParamStore out;
    const StageParams src = stage_params(cfg, cfg.stages);
    DecoderConfig shared_cfg = cfg;
    shared_cfg.shared_stage = true;
    const StageParams dst = stage_params(shared_cfg, 1);
    for (const auto& [name, entry] : trained) {
        std::string target;
        if (name.rfind("queries/", 0) == 0) {
            target = name;
        } else if (name.rfind(src.prefix + "/", 0) == 0) {
            target = dst.prefix + name.substr(src.prefix.size());
        } else if (name.rfind(src.head_prefix + "/", 0) == 0) {
            target = dst.head_prefix + name.substr(src.head_prefix.size());
        } else {
            continue;
        }
        auto& e = out.create(target, entry.shape);
        e.value = entry.value;
    }
    return out;
}

/// Recurrent inference: apply one stage `depth` times from q0, returning the
/// set after each application for per-depth evaluation. `stage` picks which
/// stage's parameters recur (default: the final stage). The traversed pathway
/// repeats that single index.
inline std::vector<QuerySet> dqrr_infer(DecodePass& pass, const QuerySet& q0, int depth,
                                        int stage = -1) {
    if (depth < 1) throw ContractError("recurrence depth must be at least 1");
    if (stage < 0) stage = pass.config().stages;
    std::vector<QuerySet> out;
    out.reserve(static_cast<std::size_t>(depth));
    QuerySet q = q0;
    for (int i = 0; i < depth; ++i) {
        q = pass.decode_stage(stage, q);
        out.push_back(q);
    }
    return out;
}

/// Deployed inference entry point: the basic pathway for every strategy, with
/// stochastic-depth checkpoints getting their residual calibration. Recurrent
/// checkpoints go through dqrr_infer instead.
inline QuerySet infer_final(DecodePass& pass, const StrategyConfig& st, const QuerySet& q0) {
    if (st.kind == StrategyKind::DQRR)
        throw ContractError("recurrent checkpoints are evaluated per depth via dqrr_infer");
    if (st.kind == StrategyKind::StochDepth) return stochdepth_infer(pass, q0, st.removal_probs);
    QuerySet q = q0;
    for (int s = 1; s <= pass.config().stages; ++s) q = pass.decode_stage(s, q);
    return q;
}

/// Training-time dispatch. StochDepth draws its mask from `rng` here; batch
/// loops that share one mask across samples call stochdepth_forward directly.
inline SupervisedBatch run_strategy(DecodePass& pass, const StrategyConfig& st, Rng& rng) {
    validate_strategy(st, pass.config().stages);
    switch (st.kind) {
    case StrategyKind::Baseline:
    case StrategyKind::Reweight:
        return basic_forward(pass, pass.init_queries()).batch;
    case StrategyKind::DQR:
        return dqr_forward(pass, pass.init_queries(), st.collection_cap).batch;
    case StrategyKind::SQR:
        return sqr_forward(pass, pass.init_queries(), st.sqr_start).batch;
    case StrategyKind::StochDepth:
        return stochdepth_forward(pass, pass.init_queries(), st.removal_probs, rng).batch;
    case StrategyKind::DQRR:
        return dqrr_forward(pass, pass.init_queries(), st.collection_cap);
    case StrategyKind::GroupDesign: {
        std::vector<QuerySet> q0s;
        const int groups = group_count(st.design);
        for (int gi = 0; gi < groups; ++gi)
            q0s.push_back(pass.init_queries(gi == 0 ? "queries" : "group" + std::to_string(gi + 1) + "/queries"));
        return group_design_forward(pass, st.design, q0s);
    }
    }
    throw ConfigError("unknown strategy");
}

} // namespace qrlab
