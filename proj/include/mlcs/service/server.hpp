#pragma once

// HTTP routes for the intervention explorer, mounted under /api/v1.

#include <filesystem>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "mlcs/service/engine.hpp"

namespace mlcs::service {

inline constexpr const char* kApiPrefix = "/api/v1";

namespace detail {

inline void send(httplib::Response& res, const Engine& engine, int status, Json body) {
    body["model_version"] = engine.version();
    res.status = status;
    res.set_header("X-Model-Version", engine.version());
    res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, const Engine& engine, int status, const std::string& code, const std::string& message) {
    send(res, engine, status, {{"error", {{"code", code}, {"message", message}}}});
}

inline std::size_t parse_count(const httplib::Request& req, const char* key, std::size_t fallback) {
    if (!req.has_param(key)) return fallback;
    const auto text = req.get_param_value(key);
    try {
        std::size_t used = 0;
        const long long v = std::stoll(text, &used);
        if (used != text.size() || v < 0) throw std::invalid_argument(key);
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw ArgumentError(std::string("query parameter '") + key + "' must be a non-negative integer");
    }
}

inline int parse_id(const std::string& text, const char* what) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(text, &used);
        if (used == text.size()) return v;
    } catch (const std::exception&) {
    }
    throw NotFoundError(std::string("unknown ") + what + " '" + text + "'");
}

inline Json parse_body(const httplib::Request& req) {
    auto j = Json::parse(req.body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ArgumentError("request body must be a JSON object");
    return j;
}

template <class T>
T field(const Json& body, const char* key) {
    if (!body.contains(key)) throw ArgumentError(std::string("missing field '") + key + "'");
    try {
        return body.at(key).get<T>();
    } catch (const Json::exception&) {
        throw ArgumentError(std::string("field '") + key + "' has the wrong type");
    }
}

}  // namespace detail

/// Registers every route on `server`; `static_dir` (if non-empty) is served under /.
inline void install_routes(httplib::Server& server, Engine& engine, const std::filesystem::path& static_dir = {}) {
    using httplib::Request;
    using httplib::Response;
    const std::string api = kApiPrefix;

    auto guard = [&engine](auto handler) {
        return [&engine, handler](const Request& req, Response& res) {
            try {
                handler(req, res);
            } catch (const NotFoundError& e) {
                detail::send_error(res, engine, 404, "not_found", e.what());
            } catch (const ArgumentError& e) {
                detail::send_error(res, engine, 400, "bad_request", e.what());
            } catch (const Error& e) {
                detail::send_error(res, engine, 400, e.category(), e.what());
            } catch (const std::exception& e) {
                detail::send_error(res, engine, 500, "internal", e.what());
            }
        };
    };

    server.Get(api + "/tree", guard([&](const Request&, Response& res) { detail::send(res, engine, 200, engine.tree_json()); }));

    server.Get(api + "/samples", guard([&](const Request& req, Response& res) {
                   const std::string split = req.has_param("split") ? req.get_param_value("split") : "test";
                   detail::send(res, engine, 200,
                                engine.samples(split, detail::parse_count(req, "offset", 0), detail::parse_count(req, "limit", 50)));
               }));

    server.Post(api + "/sessions", guard([&](const Request& req, Response& res) {
                    const auto body = detail::parse_body(req);
                    const auto split = body.contains("split") ? detail::field<std::string>(body, "split") : std::string("test");
                    const auto sample = detail::field<long long>(body, "sample_id");
                    if (sample < 0) throw NotFoundError("unknown sample " + std::to_string(sample));
                    detail::send(res, engine, 201, engine.create_session(static_cast<std::size_t>(sample), split));
                }));

    server.Get(api + "/sessions/:id", guard([&](const Request& req, Response& res) {
                   detail::send(res, engine, 200, engine.session(req.path_params.at("id")));
               }));

    server.Post(api + "/sessions/:id/intervene", guard([&](const Request& req, Response& res) {
                    const auto body = detail::parse_body(req);
                    const int node = detail::field<int>(body, "node_id");
                    const int value = detail::field<int>(body, "value");
                    detail::send(res, engine, 200, engine.intervene(req.path_params.at("id"), node, value));
                }));

    server.Delete(api + "/sessions/:id/intervene/:node", guard([&](const Request& req, Response& res) {
                      const int node = detail::parse_id(req.path_params.at("node"), "concept node");
                      detail::send(res, engine, 200, engine.remove_intervention(req.path_params.at("id"), node));
                  }));

    server.Get(api + "/prototypes/:node", guard([&](const Request& req, Response& res) {
                   const int node = detail::parse_id(req.path_params.at("node"), "concept node");
                   detail::send(res, engine, 200, engine.prototypes(node, detail::parse_count(req, "n", 10)));
               }));

    server.Get(api + "/metrics", guard([&](const Request&, Response& res) { detail::send(res, engine, 200, engine.metrics()); }));

    // unknown API paths get a JSON 404 rather than the static fallback
    server.set_error_handler([&engine](const Request& req, Response& res) {
        if (req.path.rfind(kApiPrefix, 0) == 0 && res.body.empty())
            detail::send_error(res, engine, res.status, res.status == 404 ? "not_found" : "error", "no route for " + req.method + " " + req.path);
    });

    if (!static_dir.empty()) {
        if (!std::filesystem::is_directory(static_dir)) throw PathError("static UI directory missing: " + static_dir.string());
        server.set_mount_point("/", static_dir.string());
    }
}

}  // namespace mlcs::service
