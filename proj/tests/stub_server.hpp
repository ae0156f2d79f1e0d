#pragma once

#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace testing {

// Chat-completions endpoint on an ephemeral local port. The handler sees the
// raw request and fills the response.
class StubServer {
public:
    using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

    explicit StubServer(Handler handler) : handler_(std::move(handler)) {
        server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
            {
                std::lock_guard lock(mutex_);
                requests_.push_back(req);
            }
            handler_(req, res);
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~StubServer() {
        server_.stop();
        thread_.join();
    }
    StubServer(const StubServer&) = delete;
    StubServer& operator=(const StubServer&) = delete;

    std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }

    std::vector<httplib::Request> requests() const {
        std::lock_guard lock(mutex_);
        return requests_;
    }

    static void reply(httplib::Response& res, const std::string& content) {
        const nlohmann::json body = {{"choices", {{{"index", 0}, {"message", {{"role", "assistant"}, {"content", content}}}}}}};
        res.set_content(body.dump(), "application/json");
    }

private:
    Handler handler_;
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
    mutable std::mutex mutex_;
    std::vector<httplib::Request> requests_;
};

}  // namespace testing
