#pragma once

// Roadside-unit policy service. Newline-delimited JSON over TCP, one request
// and one response per connection:
//
//   -> {"type":"hello","vehicle_id":"v1","x":10.5,"y":2.0}
//   <- {"type":"policy","artifact":{...}}          inside the geofence
//   <- {"type":"none","reason":"outside_geofence"}  outside
//   <- {"type":"error","code":"bad_request","detail":"..."}

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <variant>

#include "cavlab/imitation.hpp"

namespace cavlab::rsu {

/// Half-open rectangle: x_min <= x < x_max and y_min <= y < y_max.
struct Geofence {
    double x_min = 0.0, x_max = 0.0, y_min = 0.0, y_max = 0.0;

    bool contains(double x, double y) const { return x_min <= x && x < x_max && y_min <= y && y < y_max; }
    void validate() const;
};

struct Endpoint {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;  // 0 = ephemeral when binding
};

/// "host:port"; throws std::invalid_argument.
Endpoint parse_endpoint(std::string_view s);
std::string to_string(const Endpoint& e);

struct RsuConfig {
    Endpoint bind;
    Geofence geofence;
    std::string artifact_path;
    std::size_t max_connections = 16;
    double timeout_s = 5.0;

    void validate() const;
};

/// JSON layout: {"bind": "host:port", "geofence": {"x_min":..,"x_max":..,
/// "y_min":..,"y_max":..}, "artifact": path, "max_connections": n,
/// "timeout_s": s}. A relative artifact path is resolved against the config
/// file's directory.
RsuConfig load_rsu_config(const std::string& path);

// ---------------------------------------------------------------------------
// Messages

struct Hello {
    std::string vehicle_id;
    double x = 0.0, y = 0.0;
};
struct Policy {
    std::string artifact;  // the artifact JSON document, verbatim, no newline
};
struct None {
    std::string reason;
};
struct Error {
    std::string code;
    std::string detail;
};

using Message = std::variant<Hello, Policy, None, Error>;

class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// One JSON object terminated by '\n'.
std::string encode(const Message& m);
/// Accepts a line with or without its trailing '\n'. Throws ProtocolError on
/// malformed JSON, an unknown type or missing/ill-typed fields.
Message decode(std::string_view line);

/// Pure request handler. `artifact` is the served document.
Message handle_request(const Message& request, const Geofence& fence, std::string_view artifact);
/// Decodes then handles; undecodable lines yield Error{bad_request}.
Message handle_line(std::string_view line, const Geofence& fence, std::string_view artifact);

// ---------------------------------------------------------------------------
// Server

class Server {
public:
    /// Loads and validates the artifact; throws on failure.
    explicit Server(RsuConfig cfg);
    ~Server();

    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    /// Binds and starts accepting on a background thread. Throws
    /// std::runtime_error when the endpoint cannot be bound.
    void start();
    /// Stops accepting, then waits for in-flight requests (each bounded by the
    /// timeout). Idempotent.
    void stop();

    std::uint16_t port() const { return port_; }
    std::uint64_t requests_served() const { return served_.load(); }
    const std::string& artifact_text() const { return artifact_text_; }
    const imitation::PolicyArtifact& artifact() const { return artifact_; }

private:
    void accept_loop();
    void serve_connection(int fd);

    RsuConfig cfg_;
    std::string artifact_text_;
    imitation::PolicyArtifact artifact_;
    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
    std::atomic<bool> stopping_{false};
    std::atomic<std::uint64_t> served_{0};
    std::thread acceptor_;

    std::mutex mu_;
    std::condition_variable slot_free_;
    std::size_t active_ = 0;
    struct Worker {
        std::thread thread;
        std::shared_ptr<std::atomic<bool>> done;
    };
    std::list<Worker> workers_;
};

// ---------------------------------------------------------------------------
// Client

class FetchError : public std::runtime_error {
public:
    enum class Kind { Connection, Timeout, Checksum, Protocol };

    FetchError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

struct Fetched {
    imitation::PolicyArtifact artifact;
    std::string text;  // the document as served
};

/// Sends Hello and returns the verified artifact, or nullopt when the RSU
/// answers None. Throws FetchError.
std::optional<Fetched> fetch(const Endpoint& endpoint, const std::string& vehicle_id, double x, double y,
                             double timeout_s = 5.0);

/// Low-level exchange: sends `line` verbatim and returns the response line
/// (without '\n'). Throws FetchError (Connection / Timeout / Protocol).
std::string exchange(const Endpoint& endpoint, std::string_view line, double timeout_s = 5.0);

}  // namespace cavlab::rsu
