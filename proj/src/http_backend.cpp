#include <chrono>
#include <cstdlib>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "socioverse/behavior.hpp"

namespace socioverse {

namespace {

struct Endpoint {
    std::string origin;  // scheme://host[:port]
    std::string path;
};

Endpoint split_endpoint(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw TransportError("endpoint must start with http:// or https://", false);
    const auto scheme = url.substr(0, scheme_end);
    if (scheme != "http" && scheme != "https") {
        throw TransportError(fmt::format("unsupported endpoint scheme '{}'", scheme), false);
    }
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
    if (scheme == "https") throw TransportError("https endpoints need a TLS-enabled build", false);
#endif
    const auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

bool is_auth_failure(int status) { return status == 401 || status == 403; }

}  // namespace

std::string http_llm_call(const BackendDescriptor& d, std::string_view prompt, std::string_view request_tag) {
    const auto endpoint = split_endpoint(d.endpoint);
    httplib::Client client(endpoint.origin);
    const auto timeout = std::chrono::duration<double>(d.timeout_seconds);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    client.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));

    httplib::Headers headers;
    if (const char* key = std::getenv(d.api_key_env.c_str()); key && *key) {
        headers.emplace("Authorization", fmt::format("Bearer {}", key));
    }
    if (!request_tag.empty()) headers.emplace("X-Socioverse-Agent", std::string(request_tag));

    nlohmann::json body = {{"model", d.model},
                           {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
                           {"temperature", d.temperature},
                           {"max_tokens", d.max_tokens}};

    const auto started = std::chrono::steady_clock::now();
    auto res = client.Post(endpoint.path, headers, body.dump(), "application/json");
    const auto elapsed_ms =
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started).count();

    if (!res) {
        const auto err = httplib::to_string(res.error());
        spdlog::debug("POST {} [{}] failed after {} ms: {}", d.endpoint, request_tag, elapsed_ms, err);
        throw TransportError(fmt::format("request to {} failed: {}", d.endpoint, err), true);
    }
    spdlog::debug("POST {} [{}] -> {} in {} ms, {} bytes", d.endpoint, request_tag, res->status, elapsed_ms,
                  res->body.size());

    if (is_auth_failure(res->status)) {
        throw TransportError(fmt::format("authentication failed (HTTP {})", res->status), false, res->status);
    }
    if (res->status < 200 || res->status >= 300) {
        throw TransportError(fmt::format("HTTP {} from {}", res->status, d.endpoint), true, res->status);
    }

    try {
        const auto reply = nlohmann::json::parse(res->body);
        const auto& content = reply.at("choices").at(0).at("message").at("content");
        if (!content.is_string()) throw TransportError("response content is not a string", true, res->status);
        return content.get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw TransportError(fmt::format("malformed response body: {}", e.what()), true, res->status);
    }
}

}  // namespace socioverse
