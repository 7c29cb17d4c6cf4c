#pragma once

// Floating-car-data (FCD) trajectory logs, the subset of the SUMO export
// format that the imitation pipeline consumes:
//
//   <fcd-export>
//     <timestep time="0.00">
//       <vehicle id="v0" x="5.0" y="1.5" speed="10.0" angle="90.0" lane="main_0"/>
//     </timestep>
//   </fcd-export>
//
// Unknown attributes are ignored; unknown elements are rejected.

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cavlab::fcd {

struct Snapshot {
    std::string vehicle_id;
    double x = 0.0;
    double y = 0.0;
    double speed = 0.0;  // m/s
    double angle = 0.0;  // degrees in [0, 360), 0 = north, clockwise
    std::optional<std::string> lane;

    friend bool operator==(const Snapshot&, const Snapshot&) = default;
};

struct Timestep {
    double time = 0.0;  // seconds
    std::vector<Snapshot> snapshots;

    friend bool operator==(const Timestep&, const Timestep&) = default;
};

class ParseError : public std::runtime_error {
public:
    ParseError(std::size_t line, std::size_t column, std::string token, const std::string& message);

    std::size_t line() const { return line_; }
    std::size_t column() const { return column_; }
    const std::string& token() const { return token_; }

private:
    std::size_t line_;
    std::size_t column_;
    std::string token_;
};

/// Parses a UTF-8 document. Throws ParseError (1-based line and column).
std::vector<Timestep> parse_fcd(std::string_view document);

/// Inverse of parse_fcd on the retained fields; numbers use shortest
/// round-trip formatting.
std::string write_fcd(const std::vector<Timestep>& timesteps);

}  // namespace cavlab::fcd
