#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dvlm/errors.hpp"
#include "dvlm/qa.hpp"

namespace dvlm {

inline nlohmann::json record_to_json(const QARecord& r) {
    return nlohmann::json{{"scene_seed", r.scene_seed}, {"task", to_string(r.task)},
                          {"qtype", to_string(r.qtype)}, {"is_core", r.is_core},
                          {"question", r.question},     {"answer", r.answer},
                          {"identities", r.identities}};
}

inline QARecord record_from_json(const nlohmann::json& j) {
    QARecord r;
    r.scene_seed = j.at("scene_seed").get<int64_t>();
    r.task = task_from_string(j.at("task").get<std::string>());
    r.qtype = qtype_from_string(j.at("qtype").get<std::string>());
    r.is_core = j.at("is_core").get<bool>();
    r.question = j.at("question").get<std::string>();
    r.answer = j.at("answer").get<std::string>();
    r.identities = j.at("identities").get<std::vector<std::string>>();
    return r;
}

inline void write_records(const std::string& path, const std::vector<QARecord>& records) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    for (const auto& r : records) out << record_to_json(r).dump() << "\n";
}

inline std::vector<QARecord> read_records(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::vector<QARecord> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

// Per-task and per-question-type record counts, for the dataset manifest.
inline nlohmann::json dataset_manifest(const std::vector<QARecord>& records) {
    std::map<std::string, int> by_task, by_qtype;
    int core = 0;
    for (const auto& r : records) {
        by_task[to_string(r.task)]++;
        by_qtype[to_string(r.qtype)]++;
        core += r.is_core ? 1 : 0;
    }
    return nlohmann::json{{"total", records.size()},
                          {"core", core},
                          {"by_task", by_task},
                          {"by_qtype", by_qtype}};
}

// Leading-prefix split; train gets round(ratio * N) records.
inline std::pair<std::vector<QARecord>, std::vector<QARecord>> split_records(
    const std::vector<QARecord>& records, double ratio) {
    if (ratio < 0.0 || ratio > 1.0) throw ConfigError("split ratio outside [0,1]");
    size_t n_train = static_cast<size_t>(
        std::llround(ratio * static_cast<double>(records.size())));
    std::vector<QARecord> train(records.begin(), records.begin() + n_train);
    std::vector<QARecord> val(records.begin() + n_train, records.end());
    return {std::move(train), std::move(val)};
}

// All question/answer strings, for vocabulary construction.
inline std::vector<std::string> corpus_texts(const std::vector<QARecord>& records) {
    std::vector<std::string> out;
    out.reserve(records.size() * 2);
    for (const auto& r : records) {
        out.push_back(r.question);
        out.push_back(r.answer);
    }
    return out;
}

}  // namespace dvlm
