#pragma once

// The staged decoder. A query is a content vector plus a reference box; a
// stage refines both through residual self-attention, cross-attention over a
// feature grid, and a feed-forward block (pre-norm form). Reference boxes are
// stored in the unbounded logit domain and pass through the logistic map
// whenever a concrete box is needed, which keeps every emitted box inside
// [0,1] without a hard clamp.

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "qrlab/errors.hpp"
#include "qrlab/geometry.hpp"
#include "qrlab/params.hpp"
#include "qrlab/rng.hpp"
#include "qrlab/tensor.hpp"

namespace qrlab {

struct DecoderConfig {
    int stages = 6;   // S
    int queries = 20; // n
    int dim = 64;     // d, content width
    int ffn_hidden = 128;
    int classes = 4; // K foreground classes; background is class index K
    int grid_h = 16;
    int grid_w = 16;
    bool shared_stage = false; // one parameter set reused by every stage

    int feat_channels() const { return classes + 4; }
    int logit_width() const { return classes + 1; }
};

/// Spatial feature grid, cells row-major [h*w, channels].
struct FeatureMap {
    int h = 0, w = 0, channels = 0;
    std::vector<double> cells;

    int cell_count() const { return h * w; }
};

/// One query materialized for inspection.
struct QueryUnit {
    std::vector<double> content;
    BBox reference;
};

/// A set of n queries on the tape. Row i is unit i; that identity is stable
/// across stages — row i of a decoded set descends from row i of its input.
/// `stage` records which stage emitted the set (0 for the initial queries)
/// and selects the prediction head.
struct QuerySet {
    Tensor contents;   // [n, d]
    Tensor ref_logits; // [n, 4], boxes are sigmoid of these rows
    int stage = 0;

    int n() const { return contents.rows(); }

    BBox reference(int i) const {
        return BBox{detail::stable_sigmoid(ref_logits.at(i, 0)),
                    detail::stable_sigmoid(ref_logits.at(i, 1)),
                    detail::stable_sigmoid(ref_logits.at(i, 2)),
                    detail::stable_sigmoid(ref_logits.at(i, 3))};
    }

    QueryUnit unit(int i) const {
        QueryUnit u;
        u.content.assign(contents.values().begin() + static_cast<std::ptrdiff_t>(i) * contents.cols(),
                         contents.values().begin() + static_cast<std::ptrdiff_t>(i + 1) * contents.cols());
        u.reference = reference(i);
        return u;
    }

    std::vector<QueryUnit> units() const {
        std::vector<QueryUnit> out;
        out.reserve(static_cast<std::size_t>(n()));
        for (int i = 0; i < n(); ++i) out.push_back(unit(i));
        return out;
    }
};

/// Parameter paths of one stage (content block, reference head, prediction
/// heads). With shared_stage every stage resolves to the same prefix.
struct StageParams {
    std::string prefix;      // content block, e.g. "stage3"
    std::string head_prefix; // prediction heads, e.g. "head3"

    std::string ln(int which) const { return prefix + "/ln" + std::to_string(which); }
    std::string self_proj(const char* which) const { return prefix + "/self/" + which; }
    std::string cross_proj(const char* which) const { return prefix + "/cross/" + which; }
    std::string ffn() const { return prefix + "/ffn"; }
    std::string ref_head() const { return prefix + "/ref"; }
    std::string cls_head() const { return head_prefix + "/cls"; }
    std::string reg_head() const { return head_prefix + "/reg"; }
};

inline StageParams stage_params(const DecoderConfig& cfg, int s) {
    if (s < 1 || s > cfg.stages) throw ContractError("stage index out of range");
    if (cfg.shared_stage) return StageParams{"stage_shared", "head_shared"};
    return StageParams{"stage" + std::to_string(s), "head" + std::to_string(s)};
}

/// Outputs of the two prediction heads, still on the tape.
struct HeadOutputs {
    Tensor class_logits; // [n, K+1], background last
    Tensor boxes;        // [n, 4] in (0,1)
};

/// One materialized prediction.
struct Prediction {
    std::vector<double> class_logits; // K+1 entries, background last
    BBox box;
};

namespace detail {

inline void create_layer_norm(ParamStore& ps, const std::string& path, int d) {
    auto& gain = ps.create(path + "/gain", {d});
    for (double& v : gain.value) v = 1.0;
    ps.create(path + "/bias", {d});
}

inline void create_stage_block(ParamStore& ps, const StageParams& sp, const DecoderConfig& cfg,
                               Rng& rng) {
    const int d = cfg.dim;
    const int c = cfg.feat_channels();
    create_layer_norm(ps, sp.ln(1), d);
    for (const char* w : {"wq", "wk", "wv", "wo"})
        init_uniform_fan_in(ps.create(sp.self_proj(w), {d, d}), d, rng);
    create_layer_norm(ps, sp.ln(2), d);
    init_uniform_fan_in(ps.create(sp.cross_proj("wq"), {d, d}), d, rng);
    init_uniform_fan_in(ps.create(sp.cross_proj("wr"), {4, d}), 4, rng);
    ps.create(sp.cross_proj("bq"), {d});
    init_uniform_fan_in(ps.create(sp.cross_proj("wk"), {c, d}), c, rng);
    init_uniform_fan_in(ps.create(sp.cross_proj("wv"), {c, d}), c, rng);
    init_uniform_fan_in(ps.create(sp.cross_proj("wo"), {d, d}), d, rng);
    create_layer_norm(ps, sp.ln(3), d);
    create_mlp(ps, sp.ffn(), d, cfg.ffn_hidden, d, rng);
    create_linear(ps, sp.ref_head(), d, 4, rng);
    create_mlp(ps, sp.cls_head(), d, d, cfg.logit_width(), rng);
    create_mlp(ps, sp.reg_head(), d, d, 4, rng);
}

} // namespace detail

/// Creates every parameter the configured decoder needs. Initial query
/// contents start near zero; initial reference logits start near zero too,
/// which places every reference box near the image center.
inline void create_decoder_params(ParamStore& ps, const DecoderConfig& cfg, Rng& rng) {
    auto& qc = ps.create("queries/content", {cfg.queries, cfg.dim});
    for (double& v : qc.value) v = rng.uniform(-0.02, 0.02);
    auto& qr = ps.create("queries/ref_logit", {cfg.queries, 4});
    for (double& v : qr.value) v = rng.uniform(-0.1, 0.1);
    const int last = cfg.shared_stage ? 1 : cfg.stages;
    for (int s = 1; s <= last; ++s) detail::create_stage_block(ps, stage_params(cfg, s), cfg, rng);
}

/// Additional initial-query embeddings for grouped designs: group 1 uses the
/// primary "queries" paths, groups 2..count get their own.
inline void create_group_embeddings(ParamStore& ps, const DecoderConfig& cfg, int count, Rng& rng) {
    for (int gi = 2; gi <= count; ++gi) {
        const std::string base = "group" + std::to_string(gi) + "/queries";
        auto& qc = ps.create(base + "/content", {cfg.queries, cfg.dim});
        for (double& v : qc.value) v = rng.uniform(-0.02, 0.02);
        auto& qr = ps.create(base + "/ref_logit", {cfg.queries, 4});
        for (double& v : qr.value) v = rng.uniform(-0.1, 0.1);
    }
}

/// Zeroes the output-side parameters of every residual branch (and the
/// reference head), which turns each stage into the identity map. Used by
/// tests probing the residual structure.
inline void zero_residual_params(ParamStore& ps, const DecoderConfig& cfg) {
    const int last = cfg.shared_stage ? 1 : cfg.stages;
    for (int s = 1; s <= last; ++s) {
        const StageParams sp = stage_params(cfg, s);
        for (const std::string& name :
             {sp.self_proj("wo"), sp.cross_proj("wo"), sp.ffn() + "/fc2/w", sp.ffn() + "/fc2/b",
              sp.ref_head() + "/w", sp.ref_head() + "/b"}) {
            auto& e = ps.at(name);
            e.value.assign(e.value.size(), 0.0);
        }
    }
}

/// One recorded pass of the decoder over a single feature map. Holds the
/// tape, the parameters and the per-stage projected feature cache; every
/// query-set transformation in a training step or inference run goes through
/// one of these.
class DecodePass {
public:
    DecodePass(Graph& g, ParamStore& ps, const DecoderConfig& cfg, const FeatureMap& x)
        : g_(g), ps_(ps), cfg_(cfg) {
        if (x.cell_count() < 1) throw ContractError("feature map has no cells");
        if (x.channels != cfg.feat_channels())
            throw ShapeError("feature map channel count does not match the configuration");
        feat_ = g_.input({x.cell_count(), x.channels}, x.cells);
    }

    Graph& graph() { return g_; }
    ParamStore& params() { return ps_; }
    const DecoderConfig& config() const { return cfg_; }

    /// The learned initial queries q^0. Grouped designs pass the embedding
    /// prefix of their group; the default is the primary embedding.
    QuerySet init_queries(const std::string& base = "queries") {
        QuerySet q;
        q.contents = g_.param(ps_, base + "/content");
        q.ref_logits = g_.param(ps_, base + "/ref_logit");
        q.stage = 0;
        return q;
    }

    /// One residual stage. Self-attention sees only the units of `q` —
    /// attention never crosses independently decoded sets. `residual_scale`
    /// multiplies each residual term (1.0 leaves the tape untouched by any
    /// scaling node, so the default path is bit-identical to an unscaled one).
    QuerySet decode_stage(int s, const QuerySet& q, double residual_scale = 1.0) {
        const StageParams sp = stage_params(cfg_, s);
        Tensor c = q.contents;
        Tensor ref = q.ref_logits;

        // Self-attention over this set's own units.
        {
            Tensor h = layer_norm(c, g_.param(ps_, sp.ln(1) + "/gain"), g_.param(ps_, sp.ln(1) + "/bias"));
            Tensor att = attention(matmul(h, g_.param(ps_, sp.self_proj("wq"))),
                                   matmul(h, g_.param(ps_, sp.self_proj("wk"))),
                                   matmul(h, g_.param(ps_, sp.self_proj("wv"))));
            c = add(c, scaled(matmul(att, g_.param(ps_, sp.self_proj("wo"))), residual_scale));
        }

        // Cross-attention over the feature grid; the attention query mixes
        // content with the current reference box.
        {
            Tensor h = layer_norm(c, g_.param(ps_, sp.ln(2) + "/gain"), g_.param(ps_, sp.ln(2) + "/bias"));
            Tensor boxes = sigmoid(ref);
            Tensor cq = add_row(add(matmul(h, g_.param(ps_, sp.cross_proj("wq"))),
                                    matmul(boxes, g_.param(ps_, sp.cross_proj("wr")))),
                                g_.param(ps_, sp.cross_proj("bq")));
            auto [k, v] = projected_features(sp);
            Tensor att = attention(cq, k, v);
            c = add(c, scaled(matmul(att, g_.param(ps_, sp.cross_proj("wo"))), residual_scale));
        }

        // Feed-forward block.
        {
            Tensor h = layer_norm(c, g_.param(ps_, sp.ln(3) + "/gain"), g_.param(ps_, sp.ln(3) + "/bias"));
            c = add(c, scaled(mlp(h, ps_, sp.ffn()), residual_scale));
        }

        // Reference refinement: a logit-domain delta from the new content.
        Tensor delta = add_row(matmul(c, g_.param(ps_, sp.ref_head() + "/w")),
                               g_.param(ps_, sp.ref_head() + "/b"));
        ref = add(ref, scaled(delta, residual_scale));

        QuerySet out;
        out.contents = c;
        out.ref_logits = ref;
        out.stage = s;
        return out;
    }

    /// Classification and regression heads of the set's emitting stage.
    /// The regression head produces a logit-domain delta on the reference;
    /// the logistic map keeps the resulting box inside [0,1].
    HeadOutputs predict_heads(const QuerySet& q) {
        if (q.stage < 1) throw ContractError("prediction heads need a decoded query set");
        const StageParams sp = stage_params(cfg_, q.stage);
        HeadOutputs out;
        out.class_logits = mlp(q.contents, ps_, sp.cls_head());
        out.boxes = sigmoid(add(q.ref_logits, mlp(q.contents, ps_, sp.reg_head())));
        return out;
    }

    /// Head outputs materialized to plain values.
    std::vector<Prediction> predict(const QuerySet& q) {
        const HeadOutputs ho = predict_heads(q);
        std::vector<Prediction> preds(static_cast<std::size_t>(q.n()));
        const int kw = cfg_.logit_width();
        for (int i = 0; i < q.n(); ++i) {
            auto& p = preds[static_cast<std::size_t>(i)];
            p.class_logits.assign(ho.class_logits.values().begin() + static_cast<std::ptrdiff_t>(i) * kw,
                                  ho.class_logits.values().begin() + static_cast<std::ptrdiff_t>(i + 1) * kw);
            p.box = BBox{ho.boxes.at(i, 0), ho.boxes.at(i, 1), ho.boxes.at(i, 2), ho.boxes.at(i, 3)};
        }
        return preds;
    }

private:
    Tensor scaled(Tensor t, double s) { return s == 1.0 ? t : scale(t, s); }

    std::pair<Tensor, Tensor> projected_features(const StageParams& sp) {
        auto it = feat_cache_.find(sp.prefix);
        if (it != feat_cache_.end()) return it->second;
        Tensor k = matmul(feat_, g_.param(ps_, sp.cross_proj("wk")));
        Tensor v = matmul(feat_, g_.param(ps_, sp.cross_proj("wv")));
        feat_cache_.emplace(sp.prefix, std::pair<Tensor, Tensor>{k, v});
        return {k, v};
    }

    Graph& g_;
    ParamStore& ps_;
    const DecoderConfig& cfg_;
    Tensor feat_;
    std::map<std::string, std::pair<Tensor, Tensor>> feat_cache_;
};

} // namespace qrlab
