#pragma once

// Per-step training metrics, one JSON object per line, append-only with
// strictly increasing step numbers.

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qrlab/errors.hpp"

namespace qrlab {

struct MetricsRecord {
    long step = 0;
    std::vector<double> per_stage_loss; // summed per decoding stage
    double total_loss = 0.0;
    double lr = 0.0;
    std::vector<int> supervision_counts;
    double wall_seconds = 0.0; // since run start
};

class MetricsWriter {
public:
    explicit MetricsWriter(const std::string& path) : os_(path, std::ios::trunc) {
        if (!os_) throw ConfigError("cannot open metrics file for writing: " + path);
    }

    void write(const MetricsRecord& r) {
        if (r.step <= last_step_) throw ContractError("metrics steps must be strictly increasing");
        last_step_ = r.step;
        nlohmann::ordered_json j;
        j["step"] = r.step;
        j["per_stage_loss"] = r.per_stage_loss;
        j["total_loss"] = r.total_loss;
        j["lr"] = r.lr;
        j["supervision_counts"] = r.supervision_counts;
        j["wall_seconds"] = r.wall_seconds;
        os_ << j.dump() << "\n";
        os_.flush();
    }

private:
    std::ofstream os_;
    long last_step_ = -1;
};

inline std::vector<MetricsRecord> load_metrics(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open metrics file: " + path);
    std::vector<MetricsRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::ordered_json j;
        try {
            j = nlohmann::ordered_json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError(std::string("metrics line is not valid JSON: ") + e.what());
        }
        MetricsRecord r;
        r.step = j.value("step", 0L);
        r.per_stage_loss = j.value("per_stage_loss", std::vector<double>{});
        r.total_loss = j.value("total_loss", 0.0);
        r.lr = j.value("lr", 0.0);
        r.supervision_counts = j.value("supervision_counts", std::vector<int>{});
        r.wall_seconds = j.value("wall_seconds", 0.0);
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace qrlab
