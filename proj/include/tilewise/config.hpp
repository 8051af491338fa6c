#pragma once

// Minimal TOML subset: [section] / [a.b] headers, `key = value` pairs with
// strings, integers, floats, booleans and (possibly multi-line) arrays of
// those, and # comments. Enough for experiment configs; nothing more.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "tilewise/errors.hpp"

namespace tilewise {

struct ConfigValue;
using ConfigArray = std::vector<ConfigValue>;

struct ConfigValue {
    std::variant<bool, std::int64_t, double, std::string, ConfigArray> data;

    [[nodiscard]] bool is_bool() const { return std::holds_alternative<bool>(data); }
    [[nodiscard]] bool is_int() const { return std::holds_alternative<std::int64_t>(data); }
    [[nodiscard]] bool is_number() const { return is_int() || std::holds_alternative<double>(data); }
    [[nodiscard]] bool is_string() const { return std::holds_alternative<std::string>(data); }
    [[nodiscard]] bool is_array() const { return std::holds_alternative<ConfigArray>(data); }
};

/// Flat key -> value map; keys are dotted paths ("xai.layers").
using ConfigTable = std::map<std::string, ConfigValue>;

namespace detail {

class TomlReader {
public:
    TomlReader(std::string_view text, std::string origin) : s_(text), origin_(std::move(origin)) {}

    ConfigTable parse() {
        ConfigTable out;
        std::string section;
        while (true) {
            skip_blank_lines();
            if (eof()) break;
            if (peek() == '[') {
                ++pos_;
                skip_spaces();
                section = read_key();
                skip_spaces();
                expect(']');
                end_of_line();
                continue;
            }
            const std::string key = read_key();
            skip_spaces();
            expect('=');
            skip_spaces();
            ConfigValue v = read_value(false);
            end_of_line();
            const std::string full = section.empty() ? key : section + "." + key;
            if (!out.emplace(full, std::move(v)).second) fail("duplicate key '" + full + "'");
        }
        return out;
    }

    /// A lone value, as given in a command-line override. Bare words are
    /// accepted as strings.
    ConfigValue parse_lone_value() {
        skip_spaces();
        ConfigValue v = read_value(true);
        skip_spaces();
        if (!eof()) fail("trailing characters after value");
        return v;
    }

private:
    [[noreturn]] void fail(const std::string& what) const {
        std::size_t line = 1;
        for (std::size_t i = 0; i < pos_ && i < s_.size(); ++i) line += s_[i] == '\n';
        throw config_error(origin_ + ":" + std::to_string(line) + ": " + what);
    }

    [[nodiscard]] bool eof() const { return pos_ >= s_.size(); }
    [[nodiscard]] char peek() const { return eof() ? '\0' : s_[pos_]; }

    void expect(char c) {
        if (peek() != c) fail(std::string("expected '") + c + "'");
        ++pos_;
    }

    void skip_spaces() {
        while (!eof() && (peek() == ' ' || peek() == '\t')) ++pos_;
    }

    void skip_comment() {
        if (peek() == '#') {
            while (!eof() && peek() != '\n') ++pos_;
        }
    }

    void skip_blank_lines() {
        while (!eof()) {
            skip_spaces();
            skip_comment();
            if (peek() == '\n' || peek() == '\r') {
                ++pos_;
            } else {
                break;
            }
        }
    }

    void end_of_line() {
        skip_spaces();
        skip_comment();
        if (peek() == '\r') ++pos_;
        if (!eof() && peek() != '\n') fail("unexpected characters at end of line");
        if (!eof()) ++pos_;
    }

    std::string read_key() {
        std::string key;
        while (!eof()) {
            const char c = peek();
            if (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.') {
                key += c;
                ++pos_;
            } else {
                break;
            }
        }
        if (key.empty() || key.front() == '.' || key.back() == '.') fail("invalid key");
        return key;
    }

    ConfigValue read_value(bool allow_bare) {
        const char c = peek();
        if (c == '"') return {read_string()};
        if (c == '[') return {read_array()};
        std::string word;
        while (!eof()) {
            const char d = peek();
            if (std::isalnum(static_cast<unsigned char>(d)) || d == '+' || d == '-' || d == '.' || d == '_') {
                word += d;
                ++pos_;
            } else {
                break;
            }
        }
        if (word.empty()) fail("missing value");
        if (word == "true") return {true};
        if (word == "false") return {false};
        std::string digits;
        for (char d : word) {
            if (d != '_') digits += d;
        }
        const bool floaty = digits.find_first_of(".eE") != std::string::npos && digits != "inf" && digits != "nan";
        const char* b = digits.data();
        const char* e = digits.data() + digits.size();
        if (*b == '+') ++b;
        if (!floaty) {
            std::int64_t i = 0;
            auto [p, ec] = std::from_chars(b, e, i);
            if (ec == std::errc() && p == e) return {i};
        } else {
            double d = 0;
            auto [p, ec] = std::from_chars(b, e, d);
            if (ec == std::errc() && p == e && std::isfinite(d)) return {d};
        }
        if (allow_bare) return {word};
        fail("cannot parse value '" + word + "'");
    }

    std::string read_string() {
        expect('"');
        std::string out;
        while (true) {
            if (eof() || peek() == '\n') fail("unterminated string");
            char c = s_[pos_++];
            if (c == '"') break;
            if (c == '\\') {
                if (eof()) fail("unterminated escape");
                const char e = s_[pos_++];
                switch (e) {
                    case 'n': c = '\n'; break;
                    case 't': c = '\t'; break;
                    case '"': c = '"'; break;
                    case '\\': c = '\\'; break;
                    default: fail(std::string("unsupported escape \\") + e);
                }
            }
            out += c;
        }
        return out;
    }

    ConfigArray read_array() {
        expect('[');
        ConfigArray out;
        while (true) {
            skip_blank_lines();
            if (peek() == ']') {
                ++pos_;
                return out;
            }
            out.push_back(read_value(false));
            skip_blank_lines();
            if (peek() == ',') {
                ++pos_;
            } else if (peek() != ']') {
                fail("expected ',' or ']' in array");
            }
        }
    }

    std::string_view s_;
    std::string origin_;
    std::size_t pos_ = 0;
};

inline std::string format_double(double v) {
    // shortest representation that round-trips, always with a '.' or exponent
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    std::string s(buf, p);
    if (s.find_first_of(".eE") == std::string::npos) s += ".0";
    return s;
}

}  // namespace detail

inline ConfigTable parse_config(std::string_view text, std::string origin = "<config>") {
    return detail::TomlReader(text, std::move(origin)).parse();
}

inline ConfigTable load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string());
}

/// Parse a `section.key=value` override.
inline std::pair<std::string, ConfigValue> parse_override(std::string_view text) {
    const auto eq = text.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw config_error("override '" + std::string(text) + "' is not of the form key=value");
    }
    std::string key(text.substr(0, eq));
    while (!key.empty() && key.back() == ' ') key.pop_back();
    return {key, detail::TomlReader(text.substr(eq + 1), "override " + key).parse_lone_value()};
}

inline std::string format_value(const ConfigValue& v) {
    struct Visitor {
        std::string operator()(bool b) const { return b ? "true" : "false"; }
        std::string operator()(std::int64_t i) const { return std::to_string(i); }
        std::string operator()(double d) const { return detail::format_double(d); }
        std::string operator()(const std::string& s) const {
            std::string out = "\"";
            for (char c : s) {
                if (c == '"' || c == '\\') out += '\\';
                if (c == '\n') {
                    out += "\\n";
                    continue;
                }
                out += c;
            }
            return out + "\"";
        }
        std::string operator()(const ConfigArray& a) const {
            std::string out = "[";
            for (std::size_t i = 0; i < a.size(); ++i) out += (i ? ", " : "") + format_value(a[i]);
            return out + "]";
        }
    };
    return std::visit(Visitor{}, v.data);
}

/// Write a flat table back as TOML, grouped by section in key order.
inline std::string format_config(const ConfigTable& table) {
    std::map<std::string, std::vector<std::pair<std::string, const ConfigValue*>>> sections;
    for (const auto& [key, v] : table) {
        const auto dot = key.rfind('.');
        const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
        sections[section].emplace_back(dot == std::string::npos ? key : key.substr(dot + 1), &v);
    }
    std::ostringstream os;
    bool first = true;
    for (const auto& [section, entries] : sections) {
        if (!section.empty()) {
            os << (first ? "" : "\n") << '[' << section << "]\n";
        }
        first = false;
        for (const auto& [k, v] : entries) os << k << " = " << format_value(*v) << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Typed access with schema checking
// ---------------------------------------------------------------------------

/// Reads typed values out of a table and remembers which keys were used so
/// leftovers can be rejected.
class ConfigReader {
public:
    explicit ConfigReader(const ConfigTable& table) : table_(table) {}

    template <typename T>
    void read(const std::string& key, T& target) {
        known_.push_back(key);
        auto it = table_.find(key);
        if (it == table_.end()) return;
        assign(key, it->second, target);
    }

    /// Throws config_error naming every key that no read() asked for.
    void reject_unknown() const {
        std::string unknown;
        for (const auto& [key, v] : table_) {
            if (std::find(known_.begin(), known_.end(), key) == known_.end()) unknown += (unknown.empty() ? "" : ", ") + key;
        }
        if (!unknown.empty()) throw config_error("unknown config key(s): " + unknown);
    }

private:
    [[noreturn]] static void type_error(const std::string& key, const char* want) {
        throw config_error("config key '" + key + "' must be " + want);
    }

    static void assign(const std::string& key, const ConfigValue& v, bool& out) {
        if (!v.is_bool()) type_error(key, "a boolean");
        out = std::get<bool>(v.data);
    }
    static void assign(const std::string& key, const ConfigValue& v, double& out) {
        if (v.is_int()) {
            out = static_cast<double>(std::get<std::int64_t>(v.data));
        } else if (std::holds_alternative<double>(v.data)) {
            out = std::get<double>(v.data);
        } else {
            type_error(key, "a number");
        }
    }
    template <typename I>
        requires std::is_integral_v<I>
    static void assign(const std::string& key, const ConfigValue& v, I& out) {
        if (!v.is_int()) type_error(key, "an integer");
        const auto i = std::get<std::int64_t>(v.data);
        if constexpr (std::is_unsigned_v<I>) {
            if (i < 0) type_error(key, "a non-negative integer");
        }
        out = static_cast<I>(i);
    }
    static void assign(const std::string& key, const ConfigValue& v, std::string& out) {
        if (!v.is_string()) type_error(key, "a string");
        out = std::get<std::string>(v.data);
    }
    template <typename E>
    static void assign(const std::string& key, const ConfigValue& v, std::vector<E>& out) {
        if (!v.is_array()) type_error(key, "an array");
        std::vector<E> tmp;
        for (const auto& e : std::get<ConfigArray>(v.data)) {
            E x{};
            assign(key, e, x);
            tmp.push_back(x);
        }
        out = std::move(tmp);
    }

    const ConfigTable& table_;
    std::vector<std::string> known_;
};

/// Converts typed values into ConfigValues for the resolved-config dump.
inline ConfigValue to_config_value(bool v) { return {v}; }
inline ConfigValue to_config_value(double v) { return {v}; }
inline ConfigValue to_config_value(const std::string& v) { return {v}; }
template <typename I>
    requires std::is_integral_v<I>
ConfigValue to_config_value(I v) {
    return {static_cast<std::int64_t>(v)};
}
template <typename E>
ConfigValue to_config_value(const std::vector<E>& v) {
    ConfigArray a;
    for (const auto& e : v) a.push_back(to_config_value(e));
    return {a};
}

}  // namespace tilewise
