#include "cavlab/rsu.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>

#include "cavlab/config.hpp"
#include "json.hpp"

namespace cavlab::rsu {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::size_t kMaxRequestBytes = 64 * 1024;
constexpr std::size_t kMaxResponseBytes = 64 * 1024 * 1024;
constexpr std::string_view kPolicyPrefix = R"({"type":"policy","artifact":)";

Clock::time_point deadline_after(double seconds) {
    return Clock::now() + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(seconds));
}

int remaining_ms(Clock::time_point deadline) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
    return left <= 0 ? 0 : static_cast<int>(std::min<long long>(left, 1 << 30));
}

struct Fd {
    int fd = -1;
    explicit Fd(int f = -1) : fd(f) {}
    Fd(const Fd&) = delete;
    Fd& operator=(const Fd&) = delete;
    ~Fd() {
        if (fd >= 0) ::close(fd);
    }
};

enum class Io { Ok, Eof, Timeout, TooLong, Failed };

// Reads up to and excluding the first '\n'.
Io read_line(int fd, Clock::time_point deadline, std::size_t max_bytes, std::string& out) {
    char buf[16384];
    for (;;) {
        pollfd p{fd, POLLIN, 0};
        const int ms = remaining_ms(deadline);
        if (ms == 0) return Io::Timeout;
        const int r = ::poll(&p, 1, ms);
        if (r == 0) return Io::Timeout;
        if (r < 0) {
            if (errno == EINTR) continue;
            return Io::Failed;
        }
        const ssize_t n = ::recv(fd, buf, sizeof buf, 0);
        if (n == 0) return Io::Eof;
        if (n < 0) {
            if (errno == EINTR || errno == EAGAIN) continue;
            return Io::Failed;
        }
        const char* nl = static_cast<const char*>(std::memchr(buf, '\n', static_cast<std::size_t>(n)));
        const std::size_t take = nl ? static_cast<std::size_t>(nl - buf) : static_cast<std::size_t>(n);
        if (out.size() + take > max_bytes) return Io::TooLong;
        out.append(buf, take);
        if (nl) return Io::Ok;
    }
}

Io send_all(int fd, std::string_view data, Clock::time_point deadline) {
    while (!data.empty()) {
        pollfd p{fd, POLLOUT, 0};
        const int ms = remaining_ms(deadline);
        if (ms == 0) return Io::Timeout;
        const int r = ::poll(&p, 1, ms);
        if (r == 0) return Io::Timeout;
        if (r < 0) {
            if (errno == EINTR) continue;
            return Io::Failed;
        }
        const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR || errno == EAGAIN) continue;
            return Io::Failed;
        }
        data.remove_prefix(static_cast<std::size_t>(n));
    }
    return Io::Ok;
}

std::string gai_message(int rc) { return ::gai_strerror(rc); }

double finite_number(const json& j, const char* name) {
    const auto it = j.find(name);
    if (it == j.end() || !it->is_number()) throw ProtocolError(std::string("field '") + name + "' must be a number");
    const double v = it->get<double>();
    if (!std::isfinite(v)) throw ProtocolError(std::string("field '") + name + "' must be finite");
    return v;
}

std::string string_field(const json& j, const char* name) {
    const auto it = j.find(name);
    if (it == j.end() || !it->is_string()) throw ProtocolError(std::string("field '") + name + "' must be a string");
    return it->get<std::string>();
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void Geofence::validate() const {
    for (double v : {x_min, x_max, y_min, y_max})
        if (!std::isfinite(v)) throw std::invalid_argument("geofence bounds must be finite");
    if (!(x_min < x_max)) throw std::invalid_argument("geofence: x_min must be < x_max");
    if (!(y_min < y_max)) throw std::invalid_argument("geofence: y_min must be < y_max");
}

Endpoint parse_endpoint(std::string_view s) {
    const auto colon = s.rfind(':');
    if (colon == std::string_view::npos || colon == 0 || colon + 1 == s.size())
        throw std::invalid_argument("endpoint must be host:port, got '" + std::string(s) + "'");
    Endpoint e;
    e.host = std::string(s.substr(0, colon));
    if (e.host.size() >= 2 && e.host.front() == '[' && e.host.back() == ']') e.host = e.host.substr(1, e.host.size() - 2);
    unsigned port = 0;
    const auto digits = s.substr(colon + 1);
    const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), port);
    if (ec != std::errc() || ptr != digits.data() + digits.size() || port > 65535)
        throw std::invalid_argument("invalid port in endpoint '" + std::string(s) + "'");
    e.port = static_cast<std::uint16_t>(port);
    return e;
}

std::string to_string(const Endpoint& e) {
    const bool v6 = e.host.find(':') != std::string::npos;
    return (v6 ? "[" + e.host + "]" : e.host) + ":" + std::to_string(e.port);
}

void RsuConfig::validate() const {
    geofence.validate();
    if (max_connections == 0) throw std::invalid_argument("max_connections must be >= 1");
    if (!(timeout_s > 0.0) || !std::isfinite(timeout_s)) throw std::invalid_argument("timeout_s must be > 0");
    if (artifact_path.empty()) throw std::invalid_argument("artifact path is required");
}

RsuConfig load_rsu_config(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError(path + ": expected a JSON object");
    static const std::set<std::string> known = {"bind", "geofence", "artifact", "max_connections", "timeout_s"};
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw ConfigError("rsu config: unknown field '" + key + "'");

    RsuConfig c;
    try {
        if (j.contains("bind")) c.bind = parse_endpoint(j.at("bind").get<std::string>());
        const json& g = j.at("geofence");
        c.geofence = {g.at("x_min").get<double>(), g.at("x_max").get<double>(), g.at("y_min").get<double>(),
                      g.at("y_max").get<double>()};
        std::filesystem::path artifact = j.at("artifact").get<std::string>();
        if (artifact.is_relative()) artifact = std::filesystem::path(path).parent_path() / artifact;
        c.artifact_path = artifact.string();
        if (j.contains("max_connections")) c.max_connections = j.at("max_connections").get<std::size_t>();
        if (j.contains("timeout_s")) c.timeout_s = j.at("timeout_s").get<double>();
    } catch (const json::exception& e) {
        throw ConfigError("rsu config: " + std::string(e.what()));
    } catch (const std::invalid_argument& e) {
        throw ConfigError("rsu config: " + std::string(e.what()));
    }
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("rsu config: " + std::string(e.what()));
    }
    return c;
}

// ---------------------------------------------------------------------------
// Messages

std::string encode(const Message& m) {
    return std::visit(
        [](const auto& msg) -> std::string {
            using T = std::decay_t<decltype(msg)>;
            if constexpr (std::is_same_v<T, Hello>) {
                return json{{"type", "hello"}, {"vehicle_id", msg.vehicle_id}, {"x", msg.x}, {"y", msg.y}}.dump() +
                       "\n";
            } else if constexpr (std::is_same_v<T, Policy>) {
                return std::string(kPolicyPrefix) + msg.artifact + "}\n";
            } else if constexpr (std::is_same_v<T, None>) {
                return json{{"type", "none"}, {"reason", msg.reason}}.dump() + "\n";
            } else {
                return json{{"type", "error"}, {"code", msg.code}, {"detail", msg.detail}}.dump() + "\n";
            }
        },
        m);
}

Message decode(std::string_view line) {
    if (!line.empty() && line.back() == '\n') line.remove_suffix(1);
    if (line.find('\n') != std::string_view::npos) throw ProtocolError("message spans more than one line");
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        throw ProtocolError(std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ProtocolError("message must be a JSON object");
    const std::string type = string_field(j, "type");
    if (type == "hello") return Hello{string_field(j, "vehicle_id"), finite_number(j, "x"), finite_number(j, "y")};
    if (type == "policy") {
        const auto it = j.find("artifact");
        if (it == j.end() || !it->is_object()) throw ProtocolError("policy message without an artifact object");
        // Keep the served bytes when the message has the canonical layout.
        if (line.substr(0, kPolicyPrefix.size()) == kPolicyPrefix && line.back() == '}')
            return Policy{std::string(line.substr(kPolicyPrefix.size(), line.size() - kPolicyPrefix.size() - 1))};
        return Policy{it->dump()};
    }
    if (type == "none") return None{string_field(j, "reason")};
    if (type == "error") return Error{string_field(j, "code"), j.value("detail", std::string())};
    throw ProtocolError("unknown message type '" + type + "'");
}

Message handle_request(const Message& request, const Geofence& fence, std::string_view artifact) {
    const auto* hello = std::get_if<Hello>(&request);
    if (hello == nullptr) return Error{"bad_request", "expected a hello message"};
    if (!fence.contains(hello->x, hello->y)) return None{"outside_geofence"};
    return Policy{std::string(artifact)};
}

Message handle_line(std::string_view line, const Geofence& fence, std::string_view artifact) {
    try {
        return handle_request(decode(line), fence, artifact);
    } catch (const ProtocolError& e) {
        return Error{"bad_request", e.what()};
    }
}

// ---------------------------------------------------------------------------
// Server

Server::Server(RsuConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    artifact_ = imitation::load_artifact(cfg_.artifact_path);
    artifact_text_ = read_file(cfg_.artifact_path);
    while (!artifact_text_.empty() && (artifact_text_.back() == '\n' || artifact_text_.back() == '\r'))
        artifact_text_.pop_back();
    if (artifact_text_.find('\n') != std::string::npos) {
        // Pretty-printed file: serve the canonical single-line form.
        artifact_text_ = imitation::serialize_artifact(artifact_);
        artifact_text_.pop_back();
    }
}

Server::~Server() { stop(); }

void Server::start() {
    if (listen_fd_ >= 0) return;
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE | AI_NUMERICSERV;
    addrinfo* res = nullptr;
    const std::string port = std::to_string(cfg_.bind.port);
    const int rc = ::getaddrinfo(cfg_.bind.host.empty() ? nullptr : cfg_.bind.host.c_str(), port.c_str(), &hints, &res);
    if (rc != 0) throw std::runtime_error("cannot resolve " + to_string(cfg_.bind) + ": " + gai_message(rc));
    std::string last_error = "no usable address";
    for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
        const int fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
        if (fd < 0) {
            last_error = std::strerror(errno);
            continue;
        }
        const int one = 1;
        ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        if (::bind(fd, ai->ai_addr, ai->ai_addrlen) == 0 && ::listen(fd, 128) == 0) {
            listen_fd_ = fd;
            break;
        }
        last_error = std::strerror(errno);
        ::close(fd);
    }
    ::freeaddrinfo(res);
    if (listen_fd_ < 0) throw std::runtime_error("cannot bind " + to_string(cfg_.bind) + ": " + last_error);

    sockaddr_storage addr{};
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = addr.ss_family == AF_INET6 ? ntohs(reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port)
                                       : ntohs(reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
    stopping_ = false;
    acceptor_ = std::thread([this] { accept_loop(); });
}

void Server::stop() {
    stopping_ = true;
    slot_free_.notify_all();
    if (acceptor_.joinable()) acceptor_.join();
    std::list<Worker> workers;
    {
        std::lock_guard lock(mu_);
        workers.swap(workers_);
    }
    for (auto& w : workers) w.thread.join();
    if (listen_fd_ >= 0) {
        ::close(listen_fd_);
        listen_fd_ = -1;
    }
}

void Server::accept_loop() {
    while (!stopping_) {
        {
            std::unique_lock lock(mu_);
            for (auto it = workers_.begin(); it != workers_.end();) {
                if (it->done->load()) {
                    it->thread.join();
                    it = workers_.erase(it);
                } else {
                    ++it;
                }
            }
            // At the cap, leave further clients queued in the listen backlog.
            if (active_ >= cfg_.max_connections) {
                slot_free_.wait_for(lock, std::chrono::milliseconds(100));
                continue;
            }
        }
        pollfd p{listen_fd_, POLLIN, 0};
        const int r = ::poll(&p, 1, 100);
        if (r <= 0) continue;
        const int fd = ::accept4(listen_fd_, nullptr, nullptr, SOCK_CLOEXEC);
        if (fd < 0) continue;

        auto done = std::make_shared<std::atomic<bool>>(false);
        std::lock_guard lock(mu_);
        ++active_;
        workers_.push_back({std::thread([this, fd, done] {
                                serve_connection(fd);
                                {
                                    std::lock_guard inner(mu_);
                                    --active_;
                                }
                                slot_free_.notify_all();
                                done->store(true);
                            }),
                            done});
    }
}

void Server::serve_connection(int raw_fd) {
    Fd fd(raw_fd);
    const auto deadline = deadline_after(cfg_.timeout_s);
    std::string line;
    const Io io = read_line(fd.fd, deadline, kMaxRequestBytes, line);
    Message response;
    switch (io) {
        case Io::Ok:
            response = handle_line(line, cfg_.geofence, artifact_text_);
            break;
        case Io::TooLong:
            response = Error{"bad_request", "request line exceeds " + std::to_string(kMaxRequestBytes) + " bytes"};
            break;
        case Io::Eof:
            if (line.empty()) return;
            response = Error{"bad_request", "request not terminated by a newline"};
            break;
        case Io::Timeout:
        case Io::Failed:
            return;
    }
    if (send_all(fd.fd, encode(response), deadline) == Io::Ok) {
        ++served_;
        ::shutdown(fd.fd, SHUT_WR);
    }
}

// ---------------------------------------------------------------------------
// Client

std::string exchange(const Endpoint& endpoint, std::string_view line, double timeout_s) {
    using Kind = FetchError::Kind;
    const auto deadline = deadline_after(timeout_s);
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_NUMERICSERV;
    addrinfo* res = nullptr;
    const std::string port = std::to_string(endpoint.port);
    const int rc = ::getaddrinfo(endpoint.host.c_str(), port.c_str(), &hints, &res);
    if (rc != 0) throw FetchError(Kind::Connection, "cannot resolve " + to_string(endpoint) + ": " + gai_message(rc));

    Fd fd;
    std::string last_error = "no usable address";
    bool timed_out = false;
    for (addrinfo* ai = res; ai != nullptr && fd.fd < 0; ai = ai->ai_next) {
        const int s = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC | SOCK_NONBLOCK, ai->ai_protocol);
        if (s < 0) continue;
        int err = 0;
        if (::connect(s, ai->ai_addr, ai->ai_addrlen) != 0) {
            err = errno;
            if (err == EINPROGRESS) {
                pollfd p{s, POLLOUT, 0};
                const int r = ::poll(&p, 1, remaining_ms(deadline));
                if (r == 0) {
                    timed_out = true;
                    err = ETIMEDOUT;
                } else {
                    socklen_t len = sizeof err;
                    ::getsockopt(s, SOL_SOCKET, SO_ERROR, &err, &len);
                }
            }
        }
        if (err == 0) {
            fd.fd = s;
        } else {
            last_error = std::strerror(err);
            ::close(s);
        }
    }
    ::freeaddrinfo(res);
    if (fd.fd < 0) {
        if (timed_out) throw FetchError(Kind::Timeout, "timed out connecting to " + to_string(endpoint));
        throw FetchError(Kind::Connection, "cannot connect to " + to_string(endpoint) + ": " + last_error);
    }

    switch (send_all(fd.fd, line, deadline)) {
        case Io::Ok: break;
        case Io::Timeout: throw FetchError(Kind::Timeout, "timed out sending request");
        default: throw FetchError(Kind::Connection, "connection lost while sending request");
    }
    std::string response;
    switch (read_line(fd.fd, deadline, kMaxResponseBytes, response)) {
        case Io::Ok: return response;
        case Io::Timeout: throw FetchError(Kind::Timeout, "timed out waiting for response");
        case Io::TooLong: throw FetchError(Kind::Protocol, "response too long");
        case Io::Eof:
            throw FetchError(response.empty() ? Kind::Connection : Kind::Protocol,
                             response.empty() ? "connection closed without a response"
                                              : "response not terminated by a newline");
        case Io::Failed: break;
    }
    throw FetchError(Kind::Connection, "connection error while reading response");
}

std::optional<Fetched> fetch(const Endpoint& endpoint, const std::string& vehicle_id, double x, double y,
                             double timeout_s) {
    using Kind = FetchError::Kind;
    const std::string response = exchange(endpoint, encode(Hello{vehicle_id, x, y}), timeout_s);
    Message m;
    try {
        m = decode(response);
    } catch (const ProtocolError& e) {
        throw FetchError(Kind::Protocol, std::string("bad response: ") + e.what());
    }
    if (std::holds_alternative<None>(m)) return std::nullopt;
    if (const auto* err = std::get_if<Error>(&m))
        throw FetchError(Kind::Protocol, "server error " + err->code + ": " + err->detail);
    const auto* policy = std::get_if<Policy>(&m);
    if (policy == nullptr) throw FetchError(Kind::Protocol, "unexpected response type");
    try {
        return Fetched{imitation::parse_artifact(policy->artifact), policy->artifact};
    } catch (const imitation::ArtifactError& e) {
        if (e.kind() == imitation::ArtifactError::Kind::Checksum) throw FetchError(Kind::Checksum, e.what());
        throw FetchError(Kind::Protocol, std::string("invalid artifact in response: ") + e.what());
    }
}

}  // namespace cavlab::rsu
