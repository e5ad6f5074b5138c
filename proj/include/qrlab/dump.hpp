#pragma once

// Prediction dump: versioned JSON-lines. The first line is a header object,
// every following line is one image with its ground truth and the per-stage
// prediction chains. "scores" holds per-class log-scores (background last);
// softmax is applied downstream, so any vector with the same softmax works,
// which lets external detectors feed their own dumps into the diagnostics
// command.

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qrlab/diagnostics.hpp"
#include "qrlab/errors.hpp"

namespace qrlab {

inline constexpr const char* kDumpSchema = "qrlab.dump";
inline constexpr int kDumpVersion = 1;

namespace detail {

using ojson = nlohmann::ordered_json;

inline ojson box_json(const BBox& b) { return ojson::array({b.cx, b.cy, b.w, b.h}); }

inline BBox box_from_json(const ojson& j) {
    if (!j.is_array() || j.size() != 4) throw SchemaError("dump box must be [cx, cy, w, h]");
    return BBox{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

} // namespace detail

inline void write_dump(const std::string& path, const std::vector<ImageEval>& images,
                       int stages, int classes) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw ConfigError("cannot open dump for writing: " + path);
    detail::ojson header;
    header["schema"] = kDumpSchema;
    header["version"] = kDumpVersion;
    header["stages"] = stages;
    header["classes"] = classes;
    header["images"] = images.size();
    os << header.dump() << "\n";
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& img = images[i];
        detail::ojson line;
        line["image"] = i;
        detail::ojson gt;
        auto boxes = detail::ojson::array();
        for (const auto& b : img.gt.boxes) boxes.push_back(detail::box_json(b));
        gt["boxes"] = std::move(boxes);
        gt["labels"] = img.gt.labels;
        line["gt"] = std::move(gt);
        auto stage_arr = detail::ojson::array();
        for (const auto& stage : img.preds.per_stage) {
            auto preds = detail::ojson::array();
            for (std::size_t q = 0; q < stage.size(); ++q) {
                detail::ojson p;
                p["query"] = q;
                p["scores"] = stage[q].class_logits;
                p["box"] = detail::box_json(stage[q].box);
                preds.push_back(std::move(p));
            }
            stage_arr.push_back(std::move(preds));
        }
        line["stages"] = std::move(stage_arr);
        os << line.dump() << "\n";
    }
    if (!os) throw ConfigError("dump write failed: " + path);
}

struct DumpHeader {
    int stages = 0;
    int classes = 0;
    std::size_t images = 0;
};

inline std::vector<ImageEval> load_dump(const std::string& path, DumpHeader* header_out = nullptr) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open dump: " + path);
    std::string line;
    if (!std::getline(is, line)) throw SchemaError("dump is empty: " + path);
    detail::ojson header;
    try {
        header = detail::ojson::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("dump header is not valid JSON: ") + e.what());
    }
    if (!header.is_object() || header.value("schema", std::string()) != kDumpSchema)
        throw SchemaError("not a prediction dump: " + path);
    const int version = header.value("version", -1);
    if (version != kDumpVersion)
        throw SchemaError("unsupported dump version " + std::to_string(version));
    DumpHeader h;
    h.stages = header.value("stages", 0);
    h.classes = header.value("classes", 0);
    h.images = header.value("images", std::size_t{0});

    std::vector<ImageEval> images;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        detail::ojson j;
        try {
            j = detail::ojson::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError(std::string("dump line is not valid JSON: ") + e.what());
        }
        ImageEval img;
        const auto& gt = j.at("gt");
        for (const auto& b : gt.at("boxes")) img.gt.boxes.push_back(detail::box_from_json(b));
        img.gt.labels = gt.at("labels").get<std::vector<int>>();
        for (const auto& stage : j.at("stages")) {
            std::vector<Prediction> preds;
            for (const auto& p : stage) {
                Prediction pr;
                pr.class_logits = p.at("scores").get<std::vector<double>>();
                pr.box = detail::box_from_json(p.at("box"));
                preds.push_back(std::move(pr));
            }
            img.preds.per_stage.push_back(std::move(preds));
        }
        images.push_back(std::move(img));
    }
    if (h.images != images.size()) throw SchemaError("dump image count does not match header");
    if (header_out) *header_out = h;
    return images;
}

// ---------------------------------------------------------------------------
// Machine-readable diagnostics report.

namespace detail {

inline ojson rate_json(const RateResult& r) {
    ojson j;
    j["triggered"] = r.triggered;
    j["total"] = r.total;
    if (auto rate = r.rate())
        j["rate"] = *rate;
    else
        j["rate"] = nullptr;
    return j;
}

} // namespace detail

inline detail::ojson report_json(const DiagnosticsReport& report) {
    detail::ojson j;
    j["schema"] = "qrlab.diagnostics";
    j["version"] = 1;
    auto sections = detail::ojson::array();
    for (const auto& sec : report.sections) {
        detail::ojson s;
        s["iou_thresh"] = sec.iou_thresh;
        s["per_stage_ap"] = sec.per_stage_ap;
        s["tp_fading"] = detail::rate_json(sec.fading);
        s["fp_exacerbation"] = detail::rate_json(sec.exacerbation);
        auto rows = detail::ojson::array();
        for (const auto& row : sec.attribution) {
            detail::ojson r;
            r["stages"] = row.stages;
            r["tp_fading"] = detail::rate_json(row.fading);
            r["fp_exacerbation"] = detail::rate_json(row.exacerbation);
            rows.push_back(std::move(r));
        }
        s["attribution"] = std::move(rows);
        s["final_ap"] = sec.final_ap;
        s["oracle_ap"] = sec.oracle_ap;
        sections.push_back(std::move(s));
    }
    j["sections"] = std::move(sections);
    return j;
}

} // namespace qrlab
