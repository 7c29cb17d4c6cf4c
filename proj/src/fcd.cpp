#include "cavlab/fcd.hpp"

#include <charconv>
#include <cmath>
#include <set>

#include "cavlab/qlearn.hpp"

namespace cavlab::fcd {

ParseError::ParseError(std::size_t line, std::size_t column, std::string token, const std::string& message)
    : std::runtime_error("line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + message +
                         (token.empty() ? std::string() : " (near '" + token + "')")),
      line_(line),
      column_(column),
      token_(std::move(token)) {}

namespace {

struct Position {
    std::size_t line = 1;
    std::size_t column = 1;
};

struct Attribute {
    std::string name;
    std::string value;
    Position at;  // start of the value
};

struct Tag {
    std::string name;
    Position at;
    std::vector<Attribute> attributes;
    bool self_closing = false;

    const Attribute* find(std::string_view n) const {
        for (const auto& a : attributes)
            if (a.name == n) return &a;
        return nullptr;
    }
};

bool is_name_start(char c) {
    return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || c == '_' || c == ':' ||
           static_cast<unsigned char>(c) >= 0x80;
}

bool is_name_char(char c) { return is_name_start(c) || (c >= '0' && c <= '9') || c == '-' || c == '.'; }

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; }

class Reader {
public:
    explicit Reader(std::string_view doc) : doc_(doc) {
        if (doc_.substr(0, 3) == "\xEF\xBB\xBF") advance(3);
    }

    bool eof() const { return i_ >= doc_.size(); }
    char peek(std::size_t off = 0) const { return i_ + off < doc_.size() ? doc_[i_ + off] : '\0'; }
    bool starts_with(std::string_view s) const { return doc_.substr(i_, s.size()) == s; }
    Position pos() const { return pos_; }

    void advance(std::size_t n = 1) {
        for (std::size_t k = 0; k < n && i_ < doc_.size(); ++k, ++i_) {
            if (doc_[i_] == '\n') {
                ++pos_.line;
                pos_.column = 1;
            } else {
                ++pos_.column;
            }
        }
    }

    [[noreturn]] void fail(const std::string& message, std::string token = {}) const {
        if (token.empty() && !eof()) token = std::string(1, peek());
        throw ParseError(pos_.line, pos_.column, std::move(token), message);
    }
    [[noreturn]] static void fail_at(Position p, const std::string& message, std::string token) {
        throw ParseError(p.line, p.column, std::move(token), message);
    }

    void skip_space() {
        while (!eof() && is_space(peek())) advance();
    }

    void expect(std::string_view s, const char* what) {
        if (!starts_with(s)) fail(std::string("expected ") + what);
        advance(s.size());
    }

    // Whitespace, comments and processing instructions.
    void skip_misc() {
        for (;;) {
            skip_space();
            if (starts_with("<!--")) {
                skip_comment();
            } else if (starts_with("<?")) {
                skip_until("?>", "unterminated processing instruction");
            } else {
                return;
            }
        }
    }

    void skip_comment() {
        advance(4);
        while (!starts_with("-->")) {
            if (eof()) fail("unterminated comment");
            if (starts_with("--")) fail("'--' not allowed inside a comment", "--");
            advance();
        }
        advance(3);
    }

    void skip_until(std::string_view end, const char* message) {
        while (!starts_with(end)) {
            if (eof()) fail(message);
            advance();
        }
        advance(end.size());
    }

    std::string read_name() {
        if (eof() || !is_name_start(peek())) fail("expected a name");
        const std::size_t start = i_;
        while (!eof() && is_name_char(peek())) advance();
        return std::string(doc_.substr(start, i_ - start));
    }

    std::string read_value() {
        const char quote = peek();
        if (quote != '"' && quote != '\'') fail("expected a quoted attribute value");
        advance();
        std::string out;
        while (peek() != quote) {
            if (eof()) fail("unterminated attribute value");
            const char c = peek();
            if (c == '<') fail("'<' not allowed in attribute value");
            if (c == '&') {
                out += read_entity();
            } else {
                out += c;
                advance();
            }
        }
        advance();
        return out;
    }

    // Parses '<' name attributes ('>' | '/>'). The '<' must be current.
    Tag read_start_tag() {
        Tag tag;
        tag.at = pos();
        advance();
        tag.name = read_name();
        for (;;) {
            const bool had_space = !eof() && is_space(peek());
            skip_space();
            if (starts_with("/>")) {
                advance(2);
                tag.self_closing = true;
                return tag;
            }
            if (peek() == '>') {
                advance();
                return tag;
            }
            if (eof()) fail("unterminated start tag", tag.name);
            if (!had_space) fail("expected whitespace before attribute");
            Attribute attr;
            const Position name_at = pos();
            attr.name = read_name();
            skip_space();
            expect("=", "'=' after attribute name");
            skip_space();
            attr.at = pos();
            attr.value = read_value();
            if (tag.find(attr.name) != nullptr) fail_at(name_at, "duplicate attribute", attr.name);
            tag.attributes.push_back(std::move(attr));
        }
    }

    // Parses '</' name '>' and checks it closes `open`.
    void read_end_tag(const Tag& open) {
        const Position at = pos();
        advance(2);
        const std::string name = read_name();
        skip_space();
        expect(">", "'>' to close end tag");
        if (name != open.name)
            fail_at(at, "mismatched end tag, expected </" + open.name + ">", name);
    }

    // Skips whitespace and comments between child elements; any other text
    // is an error.
    void skip_content_space() {
        for (;;) {
            skip_space();
            if (starts_with("<!--")) {
                skip_comment();
                continue;
            }
            if (eof() || peek() == '<') return;
            fail("unexpected text content");
        }
    }

private:
    std::string read_entity() {
        const Position at = pos();
        const std::size_t start = i_;
        while (!eof() && peek() != ';' && i_ - start < 12) advance();
        if (peek() != ';') fail_at(at, "unterminated entity reference", std::string(doc_.substr(start, i_ - start)));
        const std::string ent(doc_.substr(start + 1, i_ - start - 1));
        advance();
        if (ent == "amp") return "&";
        if (ent == "lt") return "<";
        if (ent == "gt") return ">";
        if (ent == "quot") return "\"";
        if (ent == "apos") return "'";
        if (ent.size() > 1 && ent[0] == '#') {
            unsigned long cp = 0;
            const bool hex = ent[1] == 'x';
            const char* first = ent.data() + (hex ? 2 : 1);
            const auto [ptr, ec] = std::from_chars(first, ent.data() + ent.size(), cp, hex ? 16 : 10);
            if (ec == std::errc() && ptr == ent.data() + ent.size() && cp > 0 && cp <= 0x10FFFF) return encode_utf8(cp);
        }
        fail_at(at, "unknown entity", "&" + ent + ";");
    }

    static std::string encode_utf8(unsigned long cp) {
        std::string s;
        if (cp < 0x80) {
            s += static_cast<char>(cp);
        } else if (cp < 0x800) {
            s += static_cast<char>(0xC0 | (cp >> 6));
            s += static_cast<char>(0x80 | (cp & 0x3F));
        } else if (cp < 0x10000) {
            s += static_cast<char>(0xE0 | (cp >> 12));
            s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
            s += static_cast<char>(0x80 | (cp & 0x3F));
        } else {
            s += static_cast<char>(0xF0 | (cp >> 18));
            s += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
            s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
            s += static_cast<char>(0x80 | (cp & 0x3F));
        }
        return s;
    }

    std::string_view doc_;
    std::size_t i_ = 0;
    Position pos_;
};

const Attribute& required(const Tag& tag, std::string_view name) {
    const Attribute* a = tag.find(name);
    if (a == nullptr)
        Reader::fail_at(tag.at, "<" + tag.name + "> is missing required attribute '" + std::string(name) + "'",
                        tag.name);
    return *a;
}

double number(const Attribute& a) {
    double v = 0.0;
    const char* first = a.value.data();
    const char* last = first + a.value.size();
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (a.value.empty() || ec != std::errc() || ptr != last || !std::isfinite(v))
        Reader::fail_at(a.at, "attribute '" + a.name + "' is not a finite number", a.value);
    return v;
}

Snapshot parse_vehicle(const Tag& tag) {
    Snapshot s;
    s.vehicle_id = required(tag, "id").value;
    if (s.vehicle_id.empty()) Reader::fail_at(required(tag, "id").at, "empty vehicle id", "");
    s.x = number(required(tag, "x"));
    s.y = number(required(tag, "y"));
    const Attribute& speed = required(tag, "speed");
    s.speed = number(speed);
    if (s.speed < 0.0) Reader::fail_at(speed.at, "negative speed", speed.value);
    const Attribute& angle = required(tag, "angle");
    s.angle = number(angle);
    if (s.angle < 0.0 || s.angle >= 360.0) Reader::fail_at(angle.at, "angle outside [0, 360)", angle.value);
    if (const Attribute* lane = tag.find("lane")) s.lane = lane->value;
    return s;
}

Timestep parse_timestep(Reader& rd, const Tag& tag) {
    Timestep ts;
    ts.time = number(required(tag, "time"));
    if (tag.self_closing) return ts;
    std::set<std::string> ids;
    for (;;) {
        rd.skip_content_space();
        if (rd.eof()) rd.fail("unexpected end of document inside <timestep>", "timestep");
        if (rd.starts_with("</")) {
            rd.read_end_tag(tag);
            return ts;
        }
        const Tag child = rd.read_start_tag();
        if (child.name != "vehicle") Reader::fail_at(child.at, "unknown element <" + child.name + ">", child.name);
        if (!child.self_closing) {
            rd.skip_content_space();
            if (!rd.starts_with("</")) rd.fail("<vehicle> must not have child elements");
            rd.read_end_tag(child);
        }
        Snapshot s = parse_vehicle(child);
        if (!ids.insert(s.vehicle_id).second)
            Reader::fail_at(child.at, "duplicate vehicle id '" + s.vehicle_id + "' in timestep", s.vehicle_id);
        ts.snapshots.push_back(std::move(s));
    }
}

}  // namespace

std::vector<Timestep> parse_fcd(std::string_view document) {
    Reader rd(document);
    rd.skip_misc();
    if (rd.starts_with("<!")) rd.fail("document type declarations are not supported", "<!");
    if (rd.peek() != '<') rd.fail(rd.eof() ? "empty document" : "expected root element");
    const Tag root = rd.read_start_tag();
    if (root.name != "fcd-export") Reader::fail_at(root.at, "root element must be <fcd-export>", root.name);

    std::vector<Timestep> out;
    if (!root.self_closing) {
        for (;;) {
            rd.skip_content_space();
            if (rd.eof()) rd.fail("unexpected end of document, <fcd-export> not closed", "fcd-export");
            if (rd.starts_with("</")) {
                rd.read_end_tag(root);
                break;
            }
            const Tag tag = rd.read_start_tag();
            if (tag.name != "timestep") Reader::fail_at(tag.at, "unknown element <" + tag.name + ">", tag.name);
            Timestep ts = parse_timestep(rd, tag);
            if (!out.empty() && !(ts.time > out.back().time))
                Reader::fail_at(required(tag, "time").at, "timestep times must be strictly increasing",
                                required(tag, "time").value);
            out.push_back(std::move(ts));
        }
    }
    rd.skip_misc();
    if (!rd.eof()) rd.fail("content after the root element");
    return out;
}

namespace {

std::string escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

std::string write_fcd(const std::vector<Timestep>& timesteps) {
    std::string out = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    if (timesteps.empty()) return out + "<fcd-export/>\n";
    out += "<fcd-export>\n";
    for (const auto& ts : timesteps) {
        out += "  <timestep time=\"" + format_double(ts.time) + "\"";
        if (ts.snapshots.empty()) {
            out += "/>\n";
            continue;
        }
        out += ">\n";
        for (const auto& s : ts.snapshots) {
            out += "    <vehicle id=\"" + escape(s.vehicle_id) + "\" x=\"" + format_double(s.x) + "\" y=\"" +
                   format_double(s.y) + "\" angle=\"" + format_double(s.angle) + "\" speed=\"" +
                   format_double(s.speed) + "\"";
            if (s.lane) out += " lane=\"" + escape(*s.lane) + "\"";
            out += "/>\n";
        }
        out += "  </timestep>\n";
    }
    out += "</fcd-export>\n";
    return out;
}

}  // namespace cavlab::fcd
