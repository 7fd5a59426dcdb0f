#pragma once

#include <cstdlib>
#include <future>
#include <optional>
#include <string>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "dvlm/errors.hpp"
#include "dvlm/metrics.hpp"

namespace dvlm {

// Semantic-alignment judge. With no endpoint configured (or on any endpoint
// failure) it falls back to deterministic token-level F1 x 100, and every
// score records where it came from.
struct JudgeConfig {
    std::string url;                              // empty => fallback only
    std::string token_env = "DVLM_JUDGE_TOKEN";   // bearer token source
    int max_in_flight = 4;                        // parallel request bound
    int timeout_seconds = 10;
};

struct JudgeScore {
    double score = 0.0;              // 0..100
    std::string provenance;          // "endpoint" or "fallback"
};

struct JudgeQuery {
    std::string question;
    std::string reference;
    std::string candidate;
};

namespace detail {

// Splits "http://host:port/path" into client base and path; anything that
// doesn't parse cleanly is treated as unusable (fallback).
struct EndpointParts {
    std::string base;  // scheme://host[:port]
    std::string path;
};

inline std::optional<EndpointParts> split_endpoint(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) return std::nullopt;
    auto path_start = url.find('/', scheme_end + 3);
    EndpointParts p;
    if (path_start == std::string::npos) {
        p.base = url;
        p.path = "/";
    } else {
        p.base = url.substr(0, path_start);
        p.path = url.substr(path_start);
    }
    if (p.base.size() <= scheme_end + 3) return std::nullopt;
    return p;
}

}  // namespace detail

inline JudgeScore judge_one(const JudgeQuery& q, const JudgeConfig& cfg) {
    if (!cfg.url.empty()) {
        if (auto parts = detail::split_endpoint(cfg.url)) {
            httplib::Client client(parts->base);
            client.set_connection_timeout(cfg.timeout_seconds);
            client.set_read_timeout(cfg.timeout_seconds);
            httplib::Headers headers;
            if (const char* tok = std::getenv(cfg.token_env.c_str()); tok != nullptr && *tok)
                headers.emplace("Authorization", std::string("Bearer ") + tok);
            nlohmann::json body = {{"question", q.question},
                                   {"reference", q.reference},
                                   {"candidate", q.candidate}};
            auto res = client.Post(parts->path, headers, body.dump(), "application/json");
            if (res && res->status == 200) {
                try {
                    auto j = nlohmann::json::parse(res->body);
                    double s = j.at("score").get<double>();
                    if (s >= 0.0 && s <= 100.0) return {s, "endpoint"};
                } catch (const nlohmann::json::exception&) {
                    // fall through to fallback
                }
            }
        }
    }
    return {100.0 * token_f1(q.candidate, q.reference), "fallback"};
}

// Scores a batch, keeping at most max_in_flight requests outstanding and
// returning results in input order.
inline std::vector<JudgeScore> judge_batch(const std::vector<JudgeQuery>& queries,
                                           const JudgeConfig& cfg) {
    std::vector<JudgeScore> out(queries.size());
    const size_t stride = static_cast<size_t>(std::max(1, cfg.max_in_flight));
    for (size_t start = 0; start < queries.size(); start += stride) {
        size_t end = std::min(queries.size(), start + stride);
        std::vector<std::future<JudgeScore>> fs;
        for (size_t i = start; i < end; ++i)
            fs.push_back(std::async(std::launch::async,
                                    [&queries, &cfg, i] { return judge_one(queries[i], cfg); }));
        for (size_t i = start; i < end; ++i) out[i] = fs[i - start].get();
    }
    return out;
}

}  // namespace dvlm
