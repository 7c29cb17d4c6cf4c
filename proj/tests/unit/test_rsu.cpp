#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <future>
#include <thread>

#include "cavlab/rsu.hpp"
#include "doctest.h"

using namespace cavlab;
using namespace cavlab::rsu;
namespace fs = std::filesystem;

namespace {

imitation::PolicyArtifact small_artifact() {
    imitation::PolicyArtifact a;
    a.model = {5, 4, 2, 11};
    a.encoder.k = 2;
    a.params = rnn::SeqModel::initialized(a.model).params;
    return a;
}

struct Fixture {
    fs::path dir;
    RsuConfig cfg;

    Fixture() {
        dir = fs::temp_directory_path() / ("cavlab_rsu_" + std::to_string(::getpid()));
        fs::create_directories(dir);
        cfg.artifact_path = (dir / "policy.json").string();
        imitation::save_artifact(small_artifact(), cfg.artifact_path);
        cfg.geofence = {0.0, 100.0, -10.0, 10.0};
        cfg.timeout_s = 2.0;
    }
    ~Fixture() { fs::remove_all(dir); }
};

// One-shot TCP peer that accepts a single connection, reads a line and
// answers with `reply` (or stays silent when `reply` is empty).
class FakePeer {
public:
    explicit FakePeer(std::string reply) : reply_(std::move(reply)) {
        fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        ::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
        ::listen(fd_, 1);
        socklen_t len = sizeof addr;
        ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
        port_ = ntohs(addr.sin_port);
        thread_ = std::thread([this] {
            const int c = ::accept(fd_, nullptr, nullptr);
            if (c < 0) return;
            char buf[4096];
            (void)::recv(c, buf, sizeof buf, 0);
            if (!reply_.empty()) (void)::send(c, reply_.data(), reply_.size(), MSG_NOSIGNAL);
            std::unique_lock lock(mu_);
            cv_.wait_for(lock, std::chrono::seconds(5), [this] { return release_; });
            ::close(c);
        });
    }
    ~FakePeer() {
        {
            std::lock_guard lock(mu_);
            release_ = true;
        }
        cv_.notify_all();
        ::shutdown(fd_, SHUT_RDWR);  // wakes an accept() that never got a client
        thread_.join();
        ::close(fd_);
    }
    Endpoint endpoint() const { return {"127.0.0.1", port_}; }

private:
    std::string reply_;
    int fd_ = -1;
    std::uint16_t port_ = 0;
    std::thread thread_;
    std::mutex mu_;
    std::condition_variable cv_;
    bool release_ = false;
};

}  // namespace

TEST_CASE("geofence is half-open") {
    const Geofence g{0, 10, 0, 5};
    CHECK(g.contains(0, 0));
    CHECK(g.contains(9.999, 4.999));
    CHECK_FALSE(g.contains(10, 1));
    CHECK_FALSE(g.contains(1, 5));
    CHECK_FALSE(g.contains(-0.001, 1));
    CHECK_THROWS(Geofence{5, 5, 0, 1}.validate());
}

TEST_CASE("endpoints") {
    const auto e = parse_endpoint("10.0.0.1:8080");
    CHECK(e.host == "10.0.0.1");
    CHECK(e.port == 8080);
    CHECK(to_string(e) == "10.0.0.1:8080");
    CHECK_THROWS_AS(parse_endpoint("nohost"), std::invalid_argument);
    CHECK_THROWS_AS(parse_endpoint("h:70000"), std::invalid_argument);
    CHECK_THROWS_AS(parse_endpoint("h:x"), std::invalid_argument);
}

TEST_CASE("message codec") {
    const Message hello = Hello{"v1", 10.5, 2.0};
    const auto line = encode(hello);
    CHECK(line.back() == '\n');
    const auto back = std::get<Hello>(decode(line));
    CHECK(back.vehicle_id == "v1");
    CHECK(back.x == 10.5);
    CHECK(back.y == 2.0);

    const std::string doc = R"({"a":1})";
    CHECK(encode(Policy{doc}) == R"({"type":"policy","artifact":{"a":1}})" "\n");
    CHECK(std::get<Policy>(decode(encode(Policy{doc}))).artifact == doc);
    CHECK(std::get<None>(decode(encode(None{"outside_geofence"}))).reason == "outside_geofence");

    CHECK_THROWS_AS(decode("{"), ProtocolError);
    CHECK_THROWS_AS(decode(R"({"type":"bogus"})"), ProtocolError);
    CHECK_THROWS_AS(decode(R"({"type":"hello","vehicle_id":"v","x":"1","y":2})"), ProtocolError);
}

TEST_CASE("handle_request") {
    const Geofence g{0, 100, -10, 10};
    const std::string art = R"({"x":1})";
    CHECK(std::get<Policy>(handle_request(Hello{"v", 50, 0}, g, art)).artifact == art);
    CHECK(std::get<None>(handle_request(Hello{"v", 150, 0}, g, art)).reason == "outside_geofence");
    CHECK(std::get<Error>(handle_request(None{"x"}, g, art)).code == "bad_request");
    CHECK(std::get<Error>(handle_line("garbage", g, art)).code == "bad_request");
    CHECK(std::holds_alternative<Policy>(handle_line(R"({"type":"hello","vehicle_id":"v","x":0,"y":-10})", g, art)));
}

TEST_CASE("config file") {
    Fixture fx;
    const auto path = fx.dir / "rsu.json";
    std::ofstream(path) << R"({"bind":"127.0.0.1:0","geofence":{"x_min":0,"x_max":10,"y_min":-1,"y_max":1},)"
                        << R"("artifact":"policy.json","max_connections":4,"timeout_s":1.5})";
    const auto cfg = load_rsu_config(path.string());
    CHECK(cfg.artifact_path == (fx.dir / "policy.json").string());
    CHECK(cfg.max_connections == 4);
    CHECK(cfg.geofence.x_max == 10);

    std::ofstream(path) << R"({"bind":"127.0.0.1:0","geofence":{"x_min":0,"x_max":10,"y_min":-1,"y_max":1},)"
                        << R"("artifact":"policy.json","colour":"red"})";
    CHECK_THROWS(load_rsu_config(path.string()));
}

TEST_CASE("server round trip") {
    Fixture fx;
    Server server(fx.cfg);
    server.start();
    const Endpoint ep{"127.0.0.1", server.port()};
    REQUIRE(ep.port != 0);

    SUBCASE("inside the geofence") {
        const auto got = fetch(ep, "v1", 50.0, 0.0);
        REQUIRE(got.has_value());
        CHECK(got->text == server.artifact_text());
        CHECK(got->artifact == small_artifact());

        // Inference with the fetched model is bit-identical to the original.
        const auto local = small_artifact().seq_model();
        rnn::Matrix x(4, local.config.input_dim, 0.3);
        CHECK(rnn::predict(got->artifact.seq_model(), x) == rnn::predict(local, x));
    }

    SUBCASE("outside the geofence") { CHECK_FALSE(fetch(ep, "v1", 100.0, 0.0).has_value()); }

    SUBCASE("bad request") {
        const auto reply = exchange(ep, "{\"type\":\"none\",\"reason\":\"x\"}\n");
        CHECK(std::get<Error>(decode(reply)).code == "bad_request");
    }

    SUBCASE("a silent client is dropped without blocking others") {
        fx.cfg.timeout_s = 0.3;
        Server quick(fx.cfg);
        quick.start();
        const int s = ::socket(AF_INET, SOCK_STREAM, 0);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(quick.port());
        addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        REQUIRE(::connect(s, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
        CHECK(fetch({"127.0.0.1", quick.port()}, "v2", 1.0, 1.0).has_value());
        char buf[16];
        CHECK(::recv(s, buf, sizeof buf, 0) == 0);  // closed by the server, no response
        ::close(s);
        CHECK(quick.requests_served() == 1);
        quick.stop();
    }

    server.stop();
    server.stop();
}

TEST_CASE("concurrent clients beyond the connection cap are all served") {
    Fixture fx;
    fx.cfg.max_connections = 16;
    Server server(fx.cfg);
    server.start();
    const Endpoint ep{"127.0.0.1", server.port()};
    std::vector<std::future<bool>> results;
    for (int i = 0; i < 32; ++i)
        results.push_back(std::async(std::launch::async, [&, i] {
            const auto got = fetch(ep, "v" + std::to_string(i), 10.0 + i, 0.0, 10.0);
            return got.has_value() && got->text == server.artifact_text();
        }));
    int ok = 0;
    for (auto& r : results) ok += r.get();
    CHECK(ok == 32);
    CHECK(server.requests_served() == 32);
    server.stop();
}

TEST_CASE("fetch failures are distinguishable") {
    SUBCASE("nobody listening") {
        Endpoint ep{"127.0.0.1", 0};
        {
            FakePeer probe("");
            ep = probe.endpoint();
        }
        try {
            fetch(ep, "v", 0, 0, 1.0);
            FAIL("expected FetchError");
        } catch (const FetchError& e) {
            CHECK(e.kind() == FetchError::Kind::Connection);
        }
    }

    SUBCASE("peer never answers") {
        FakePeer peer("");
        try {
            fetch(peer.endpoint(), "v", 0, 0, 0.3);
            FAIL("expected FetchError");
        } catch (const FetchError& e) {
            CHECK(e.kind() == FetchError::Kind::Timeout);
        }
    }

    SUBCASE("corrupted artifact") {
        std::string doc = imitation::serialize_artifact(small_artifact());
        doc.pop_back();
        const auto pos = doc.find_first_of("123456789", doc.find("\"by\":["));
        doc[pos] = doc[pos] == '1' ? '2' : '1';
        FakePeer peer(encode(Policy{doc}));
        try {
            fetch(peer.endpoint(), "v", 0, 0, 2.0);
            FAIL("expected FetchError");
        } catch (const FetchError& e) {
            CHECK(e.kind() == FetchError::Kind::Checksum);
        }
    }

    SUBCASE("garbage response") {
        FakePeer peer("hello there\n");
        try {
            fetch(peer.endpoint(), "v", 0, 0, 2.0);
            FAIL("expected FetchError");
        } catch (const FetchError& e) {
            CHECK(e.kind() == FetchError::Kind::Protocol);
        }
    }
}

TEST_CASE("server refuses a bad artifact") {
    Fixture fx;
    std::ofstream(fx.cfg.artifact_path) << "{}";
    CHECK_THROWS(Server(fx.cfg));
}
