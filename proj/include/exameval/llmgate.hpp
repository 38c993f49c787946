#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "httplib.h"

#include "exameval/error.hpp"
#include "exameval/io.hpp"
#include "exameval/rng.hpp"

namespace exameval {

/// Delimiters around a reasoning segment in raw model output.
struct TraceDelimiters {
    std::string open = "<think>";
    std::string close = "</think>";
};

struct ModelConfig {
    std::string name;
    /// Model identifier sent on the wire; falls back to `name`.
    std::string wire_model;
    /// Base URL; requests go to {endpoint_url}/chat/completions. The scheme
    /// "mock:<script.json>" selects the built-in in-process mock.
    std::string endpoint_url;
    /// Name of the environment variable holding the API key (never the key).
    std::string api_key_env;
    double temperature = 0.0;
    int max_tokens = 4096;
    double request_timeout_s = 300.0;
    int max_retries = 3;
    int concurrency_limit = 4;
    int retry_base_ms = 1000;
    int retry_cap_ms = 60000;
    std::optional<std::string> system_prompt;
    std::vector<TraceDelimiters> trace_delimiters = {TraceDelimiters{}};

    const std::string& model_id() const { return wire_model.empty() ? name : wire_model; }

    void check() const {
        if (name.empty()) throw ConfigError("model config: name is required");
        if (endpoint_url.empty()) throw ConfigError("model config '" + name + "': endpoint_url is required");
        if (!(temperature >= 0.0)) throw ConfigError("model config '" + name + "': temperature must be >= 0");
        if (max_tokens < 1) throw ConfigError("model config '" + name + "': max_tokens must be >= 1");
        if (concurrency_limit < 1)
            throw ConfigError("model config '" + name + "': concurrency_limit must be >= 1");
        if (max_retries < 0) throw ConfigError("model config '" + name + "': max_retries must be >= 0");
        if (retry_base_ms < 0 || retry_cap_ms < 0)
            throw ConfigError("model config '" + name + "': retry delays must be >= 0");
        for (const auto& d : trace_delimiters)
            if (d.open.empty() || d.close.empty())
                throw ConfigError("model config '" + name + "': trace delimiters must be non-empty");
    }
};

inline ModelConfig model_config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("model config must be an object");
    ModelConfig c;
    try {
        c.name = j.value("name", std::string{});
        c.wire_model = j.value("model", std::string{});
        c.endpoint_url = j.value("endpoint_url", std::string{});
        c.api_key_env = j.value("api_key_env", std::string{});
        c.temperature = j.value("temperature", 0.0);
        c.max_tokens = j.value("max_tokens", 4096);
        c.request_timeout_s = j.value("request_timeout", 300.0);
        c.max_retries = j.value("max_retries", 3);
        c.concurrency_limit = j.value("concurrency_limit", 4);
        c.retry_base_ms = j.value("retry_base_ms", 1000);
        c.retry_cap_ms = j.value("retry_cap_ms", 60000);
        if (auto it = j.find("system_prompt"); it != j.end() && !it->is_null())
            c.system_prompt = it->get<std::string>();
        if (auto it = j.find("trace_delimiters"); it != j.end()) {
            c.trace_delimiters.clear();
            for (const auto& d : *it)
                c.trace_delimiters.push_back({d.at("open").get<std::string>(), d.at("close").get<std::string>()});
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.check();
    return c;
}

inline json to_json(const ModelConfig& c) {
    json delims = json::array();
    for (const auto& d : c.trace_delimiters) delims.push_back({{"open", d.open}, {"close", d.close}});
    json j = {{"name", c.name},
              {"model", c.model_id()},
              {"endpoint_url", c.endpoint_url},
              {"api_key_env", c.api_key_env},
              {"temperature", c.temperature},
              {"max_tokens", c.max_tokens},
              {"request_timeout", c.request_timeout_s},
              {"max_retries", c.max_retries},
              {"concurrency_limit", c.concurrency_limit},
              {"retry_base_ms", c.retry_base_ms},
              {"retry_cap_ms", c.retry_cap_ms},
              {"trace_delimiters", delims}};
    j["system_prompt"] = c.system_prompt ? json(*c.system_prompt) : json(nullptr);
    return j;
}

struct ChatPrompt {
    std::optional<std::string> system;
    std::string user;
};

enum class FinishReason { stop, length, error };

inline const char* to_string(FinishReason r) {
    switch (r) {
        case FinishReason::stop: return "stop";
        case FinishReason::length: return "length";
        case FinishReason::error: return "error";
    }
    return "error";
}

struct ChatExchange {
    json request;
    std::string response_text;
    FinishReason finish_reason = FinishReason::stop;
    std::int64_t latency_ms = 0;
    int attempt_count = 0;
};

/// Key used by mock scripts to address a prompt: FNV-1a 64 of the user
/// message, lower-case hex.
inline std::string prompt_key(std::string_view user_message) { return hex64(fnv1a64(user_message)); }

/// Deterministic unit-norm embedding from hashed word tokens. Used by the
/// mock embeddings endpoint and as an offline embedder.
inline std::vector<double> hash_embedding(std::string_view text, std::size_t dim = 64) {
    std::vector<double> v(dim, 0.0);
    const std::string norm = normalize_text(text);
    std::size_t start = 0;
    while (start < norm.size()) {
        std::size_t end = norm.find(' ', start);
        if (end == std::string::npos) end = norm.size();
        const auto word = std::string_view(norm).substr(start, end - start);
        const std::uint64_t h = fnv1a64(word);
        v[h % dim] += ((h >> 32) & 1) ? 1.0 : -1.0;
        start = end + 1;
    }
    double n2 = 0;
    for (double x : v) n2 += x * x;
    if (n2 > 0)
        for (double& x : v) x /= std::sqrt(n2);
    return v;
}

// ---------------------------------------------------------------------------
// Mock script
// ---------------------------------------------------------------------------

/// Canned responses for the mock endpoint.
///
/// Script JSON:
///   {
///     "responses": {"<prompt_key>": "text" | {"content": "...", "finish_reason": "length"}},
///     "rules": [{"contains": ["a", "b"], "response": ... }],
///     "default": "text" | {...} | null,
///     "fail_first": [503, 503],
///     "latency_ms": 0
///   }
/// Lookup order: exact key, then rules in order (all substrings must occur
/// in the user message), then default; otherwise 404.
class MockScript {
public:
    struct Reply {
        std::string content;
        std::string finish_reason = "stop";
    };
    struct Rule {
        std::vector<std::string> contains;
        Reply reply;
    };

    MockScript() = default;
    MockScript(MockScript&&) = default;
    MockScript& operator=(MockScript&&) = default;
    // Copies get a fresh mutex and the remaining fail_first sequence.
    MockScript(const MockScript& o)
        : by_key_(o.by_key_),
          rules_(o.rules_),
          default_(o.default_),
          fail_first_(o.fail_first_),
          served_failures_(o.served_failures_),
          latency_ms_(o.latency_ms_) {}
    MockScript& operator=(const MockScript& o) {
        if (this != &o) *this = MockScript(o);
        return *this;
    }

    static MockScript from_json(const json& j) {
        MockScript s;
        if (!j.is_object()) throw ConfigError("mock script must be a JSON object");
        try {
            if (auto it = j.find("responses"); it != j.end())
                for (const auto& [k, v] : it->items()) s.by_key_[k] = reply_from_json(v);
            if (auto it = j.find("rules"); it != j.end())
                for (const auto& r : *it) {
                    Rule rule;
                    const json& c = r.at("contains");
                    if (c.is_string()) rule.contains.push_back(c.get<std::string>());
                    else
                        for (const auto& x : c) rule.contains.push_back(x.get<std::string>());
                    rule.reply = reply_from_json(r.at("response"));
                    s.rules_.push_back(std::move(rule));
                }
            if (auto it = j.find("default"); it != j.end() && !it->is_null()) s.default_ = reply_from_json(*it);
            if (auto it = j.find("fail_first"); it != j.end())
                s.fail_first_ = it->get<std::vector<int>>();
            s.latency_ms_ = j.value("latency_ms", 0);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("mock script: ") + e.what());
        }
        return s;
    }

    static MockScript load(const std::filesystem::path& path) { return from_json(load_config_file(path)); }

    MockScript& add_response(std::string_view user_message, std::string content,
                             std::string finish_reason = "stop") {
        by_key_[prompt_key(user_message)] = Reply{std::move(content), std::move(finish_reason)};
        return *this;
    }
    MockScript& add_rule(std::vector<std::string> contains, std::string content) {
        rules_.push_back(Rule{std::move(contains), Reply{std::move(content), "stop"}});
        return *this;
    }
    MockScript& set_default(std::optional<std::string> content) {
        if (content) default_ = Reply{std::move(*content), "stop"};
        else default_.reset();
        return *this;
    }
    MockScript& set_fail_first(std::vector<int> statuses) {
        fail_first_ = std::move(statuses);
        return *this;
    }
    MockScript& set_latency_ms(int ms) {
        latency_ms_ = ms;
        return *this;
    }

    int latency_ms() const { return latency_ms_; }

    /// Returns (status, body). Thread-safe; the fail_first sequence is
    /// consumed by the first requests to arrive.
    std::pair<int, json> handle_chat(const json& request) {
        {
            std::lock_guard lock(*mu_);
            if (served_failures_ < fail_first_.size()) {
                const int status = fail_first_[served_failures_++];
                return {status, json{{"error", {{"message", "scripted failure"}, {"code", status}}}}};
            }
        }
        std::string user;
        try {
            for (const auto& m : request.at("messages"))
                if (m.at("role") == "user") user = m.at("content").get<std::string>();
        } catch (const json::exception&) {
            return {400, json{{"error", {{"message", "malformed chat request"}}}}};
        }
        const Reply* reply = lookup(user);
        if (!reply) return {404, json{{"error", {{"message", "no scripted response for prompt " + prompt_key(user)}}}}};
        json body = {{"id", "mock-" + prompt_key(user)},
                     {"object", "chat.completion"},
                     {"model", request.value("model", std::string("mock"))},
                     {"choices",
                      json::array({{{"index", 0},
                                    {"message", {{"role", "assistant"}, {"content", reply->content}}},
                                    {"finish_reason", reply->finish_reason}}})}};
        return {200, body};
    }

    static std::pair<int, json> handle_embeddings(const json& request) {
        json data = json::array();
        std::vector<std::string> inputs;
        try {
            const json& in = request.at("input");
            if (in.is_string()) inputs.push_back(in.get<std::string>());
            else inputs = in.get<std::vector<std::string>>();
        } catch (const json::exception&) {
            return {400, json{{"error", {{"message", "malformed embeddings request"}}}}};
        }
        for (std::size_t i = 0; i < inputs.size(); ++i)
            data.push_back({{"object", "embedding"}, {"index", i}, {"embedding", hash_embedding(inputs[i])}});
        return {200, json{{"object", "list"}, {"data", data}}};
    }

private:
    static Reply reply_from_json(const json& v) {
        if (v.is_string()) return Reply{v.get<std::string>(), "stop"};
        return Reply{v.at("content").get<std::string>(), v.value("finish_reason", std::string("stop"))};
    }

    const Reply* lookup(const std::string& user) const {
        if (auto it = by_key_.find(prompt_key(user)); it != by_key_.end()) return &it->second;
        for (const auto& r : rules_) {
            bool all = true;
            for (const auto& needle : r.contains)
                if (user.find(needle) == std::string::npos) {
                    all = false;
                    break;
                }
            if (all) return &r.reply;
        }
        return default_ ? &*default_ : nullptr;
    }

    std::map<std::string, Reply> by_key_;
    std::vector<Rule> rules_;
    std::optional<Reply> default_;
    std::vector<int> fail_first_;
    std::size_t served_failures_ = 0;
    int latency_ms_ = 0;
    std::unique_ptr<std::mutex> mu_ = std::make_unique<std::mutex>();
};

/// Tracks concurrent in-flight requests and the high-water mark.
class InFlightGauge {
public:
    class Scope {
    public:
        explicit Scope(InFlightGauge& g) : g_(g) {
            const int now = ++g_.current_;
            int prev = g_.peak_.load();
            while (prev < now && !g_.peak_.compare_exchange_weak(prev, now)) {
            }
            ++g_.total_;
        }
        ~Scope() { --g_.current_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        InFlightGauge& g_;
    };

    int peak() const { return peak_.load(); }
    int total() const { return total_.load(); }

private:
    std::atomic<int> current_{0};
    std::atomic<int> peak_{0};
    std::atomic<int> total_{0};
};

// ---------------------------------------------------------------------------
// Transport
// ---------------------------------------------------------------------------

struct HttpReply {
    int status = 0;  // 0: no HTTP response (connection failure)
    std::string body;
    std::string error;
};

class ChatTransport {
public:
    virtual ~ChatTransport() = default;
    virtual HttpReply post_json(const std::string& path, const std::string& body) = 0;
};

struct ParsedUrl {
    std::string scheme_host_port;
    std::string path_prefix;
};

inline ParsedUrl split_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("endpoint_url must include a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    ParsedUrl p;
    if (path_start == std::string::npos) {
        p.scheme_host_port = url;
    } else {
        p.scheme_host_port = url.substr(0, path_start);
        p.path_prefix = url.substr(path_start);
    }
    while (!p.path_prefix.empty() && p.path_prefix.back() == '/') p.path_prefix.pop_back();
    return p;
}

class HttpChatTransport : public ChatTransport {
public:
    HttpChatTransport(const std::string& endpoint_url, std::string api_key, double timeout_s)
        : url_(split_url(endpoint_url)), api_key_(std::move(api_key)), timeout_s_(timeout_s) {}

    HttpReply post_json(const std::string& path, const std::string& body) override {
        httplib::Client cli(url_.scheme_host_port);
        const auto secs = static_cast<time_t>(timeout_s_);
        const auto usecs = static_cast<time_t>((timeout_s_ - static_cast<double>(secs)) * 1e6);
        cli.set_connection_timeout(secs, usecs);
        cli.set_read_timeout(secs, usecs);
        cli.set_write_timeout(secs, usecs);
        httplib::Headers headers;
        if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
        auto res = cli.Post(url_.path_prefix + path, headers, body, "application/json");
        if (!res) return HttpReply{0, {}, httplib::to_string(res.error())};
        return HttpReply{res->status, res->body, {}};
    }

private:
    ParsedUrl url_;
    std::string api_key_;
    double timeout_s_;
};

/// The "mock:" endpoint: same wire shapes, no sockets.
class InProcessMockTransport : public ChatTransport {
public:
    explicit InProcessMockTransport(std::shared_ptr<MockScript> script) : script_(std::move(script)) {}

    HttpReply post_json(const std::string& path, const std::string& body) override {
        InFlightGauge::Scope scope(gauge_);
        json req;
        try {
            req = json::parse(body);
        } catch (const json::parse_error&) {
            return HttpReply{400, R"({"error":{"message":"invalid JSON"}})", {}};
        }
        if (script_->latency_ms() > 0)
            std::this_thread::sleep_for(std::chrono::milliseconds(script_->latency_ms()));
        std::pair<int, json> out;
        if (path == "/chat/completions") out = script_->handle_chat(req);
        else if (path == "/embeddings") out = MockScript::handle_embeddings(req);
        else out = {404, json{{"error", {{"message", "unknown path " + path}}}}};
        return HttpReply{out.first, out.second.dump(), {}};
    }

    const InFlightGauge& gauge() const { return gauge_; }

private:
    std::shared_ptr<MockScript> script_;
    InFlightGauge gauge_;
};

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

/// Chat-completions client for one model configuration. Safe for concurrent
/// use; at most `concurrency_limit` requests are in flight at once.
class ChatClient {
public:
    explicit ChatClient(ModelConfig cfg) : ChatClient(cfg, make_transport(cfg)) {}

    ChatClient(ModelConfig cfg, std::shared_ptr<ChatTransport> transport)
        : cfg_(std::move(cfg)),
          transport_(std::move(transport)),
          slots_(cfg_.concurrency_limit),
          jitter_(fnv1a64(cfg_.name)) {
        cfg_.check();
    }

    ChatClient(const ChatClient&) = delete;
    ChatClient& operator=(const ChatClient&) = delete;

    const ModelConfig& config() const { return cfg_; }

    json build_request(const ChatPrompt& prompt) const {
        json messages = json::array();
        if (prompt.system) messages.push_back({{"role", "system"}, {"content", *prompt.system}});
        messages.push_back({{"role", "user"}, {"content", prompt.user}});
        return {{"model", cfg_.model_id()},
                {"messages", messages},
                {"temperature", cfg_.temperature},
                {"max_tokens", cfg_.max_tokens}};
    }

    /// Sends one chat request. Transport failures and 5xx are retried with
    /// exponential backoff; a 4xx fails immediately.
    ChatExchange complete(const ChatPrompt& prompt) {
        ChatExchange ex;
        ex.request = build_request(prompt);
        const std::string body = ex.request.dump();
        const auto t0 = std::chrono::steady_clock::now();
        int last_status = 0;
        std::string last_error;
        for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
            if (attempt > 0) std::this_thread::sleep_for(backoff_delay(attempt));
            ex.attempt_count = attempt + 1;
            HttpReply reply;
            {
                slots_.acquire();
                struct Release {
                    std::counting_semaphore<kMaxSlots>& s;
                    ~Release() { s.release(); }
                } release{slots_};
                reply = transport_->post_json("/chat/completions", body);
            }
            last_status = reply.status;
            if (reply.status == 0) {
                last_error = reply.error;
                continue;
            }
            if (reply.status >= 500) {
                last_error = "HTTP " + std::to_string(reply.status);
                continue;
            }
            if (reply.status >= 400)
                throw TransportError("endpoint '" + cfg_.name + "' rejected request: HTTP " +
                                         std::to_string(reply.status) + " " + error_message(reply.body),
                                     reply.status);
            parse_completion(reply.body, ex);
            ex.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                                std::chrono::steady_clock::now() - t0)
                                .count();
            return ex;
        }
        throw TransportError("endpoint '" + cfg_.name + "' failed after " + std::to_string(ex.attempt_count) +
                                 " attempts: " + (last_error.empty() ? "unknown error" : last_error),
                             last_status);
    }

    /// Delay before retry number `attempt` (1-based): base * 2^(attempt-1),
    /// jittered by +-20%, capped.
    std::chrono::milliseconds backoff_delay(int attempt) {
        const double base = static_cast<double>(cfg_.retry_base_ms) * std::ldexp(1.0, attempt - 1);
        double factor;
        {
            std::lock_guard lock(jitter_mu_);
            factor = 0.8 + 0.4 * jitter_.unit();
        }
        const double ms = std::min(base * factor, static_cast<double>(cfg_.retry_cap_ms));
        return std::chrono::milliseconds(static_cast<std::int64_t>(ms));
    }

    static std::shared_ptr<ChatTransport> make_transport(const ModelConfig& cfg) {
        if (cfg.endpoint_url.rfind("mock:", 0) == 0) {
            auto script = std::make_shared<MockScript>(MockScript::load(cfg.endpoint_url.substr(5)));
            return std::make_shared<InProcessMockTransport>(std::move(script));
        }
        std::string key;
        if (!cfg.api_key_env.empty()) {
            const char* v = std::getenv(cfg.api_key_env.c_str());
            if (!v) throw ConfigError("environment variable " + cfg.api_key_env + " is not set");
            key = v;
        }
        return std::make_shared<HttpChatTransport>(cfg.endpoint_url, std::move(key), cfg.request_timeout_s);
    }

    std::shared_ptr<ChatTransport> transport() const { return transport_; }

private:
    static constexpr std::ptrdiff_t kMaxSlots = 1024;

    static std::string error_message(const std::string& body) {
        try {
            const json j = json::parse(body);
            if (j.contains("error") && j["error"].contains("message")) return j["error"]["message"].get<std::string>();
        } catch (...) {
        }
        return body.substr(0, 200);
    }

    static void parse_completion(const std::string& body, ChatExchange& ex) {
        try {
            const json j = json::parse(body);
            const json& choice = j.at("choices").at(0);
            const json& content = choice.at("message").at("content");
            ex.response_text = content.is_null() ? std::string{} : content.get<std::string>();
            const std::string fr = choice.value("finish_reason", std::string("stop"));
            ex.finish_reason = fr == "length" ? FinishReason::length : FinishReason::stop;
        } catch (const json::exception& e) {
            throw ProtocolError(std::string("malformed chat-completions response: ") + e.what());
        }
    }

    ModelConfig cfg_;
    std::shared_ptr<ChatTransport> transport_;
    std::counting_semaphore<kMaxSlots> slots_;
    std::mutex jitter_mu_;
    Rng jitter_;
};

// ---------------------------------------------------------------------------
// Mock server
// ---------------------------------------------------------------------------

/// Serves a MockScript over HTTP in the chat-completions wire shape
/// (POST /v1/chat/completions and /v1/embeddings).
class MockServer {
public:
    explicit MockServer(std::shared_ptr<MockScript> script, std::string host = "127.0.0.1")
        : script_(std::move(script)), host_(std::move(host)) {
        server_.new_task_queue = [] { return new httplib::ThreadPool(32); };
        auto handler = [this](bool chat) {
            return [this, chat](const httplib::Request& req, httplib::Response& res) {
                InFlightGauge::Scope scope(gauge_);
                if (script_->latency_ms() > 0)
                    std::this_thread::sleep_for(std::chrono::milliseconds(script_->latency_ms()));
                json body;
                try {
                    body = json::parse(req.body);
                } catch (const json::parse_error&) {
                    res.status = 400;
                    res.set_content(R"({"error":{"message":"invalid JSON"}})", "application/json");
                    return;
                }
                auto [status, out] = chat ? script_->handle_chat(body) : MockScript::handle_embeddings(body);
                res.status = status;
                res.set_content(out.dump(), "application/json");
            };
        };
        server_.Post("/v1/chat/completions", handler(true));
        server_.Post("/v1/embeddings", handler(false));
    }

    ~MockServer() { stop(); }
    MockServer(const MockServer&) = delete;
    MockServer& operator=(const MockServer&) = delete;

    /// Binds (port 0 picks a free port) and serves on a background thread.
    int start(int port = 0) {
        if (port == 0) {
            port_ = server_.bind_to_any_port(host_);
        } else {
            port_ = server_.bind_to_port(host_, port) ? port : -1;
        }
        if (port_ <= 0) throw ConfigError("mock server: cannot bind " + host_ + ":" + std::to_string(port));
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return port_;
    }

    /// Blocks serving on the calling thread.
    void run(int port) {
        if (!server_.bind_to_port(host_, port))
            throw ConfigError("mock server: cannot bind " + host_ + ":" + std::to_string(port));
        port_ = port;
        server_.listen_after_bind();
    }

    void stop() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }

    int port() const { return port_; }
    std::string base_url() const { return "http://" + host_ + ":" + std::to_string(port_) + "/v1"; }
    const InFlightGauge& gauge() const { return gauge_; }

private:
    std::shared_ptr<MockScript> script_;
    std::string host_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = -1;
    InFlightGauge gauge_;
};

}  // namespace exameval
