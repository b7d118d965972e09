#pragma once

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kdkit/error.hpp"

namespace kdkit {

// Parse tree of the config language: a strict YAML subset with block
// mappings/sequences, flow sequences of scalars, plain and double-quoted
// scalars, comments, and the two tags !import_call and !ref. Tagged nodes
// stay unevaluated until instantiation.
class ConfigValue {
public:
    enum class Kind { null_v, boolean, integer, floating, string, sequence, mapping, tagged };

    std::size_t line = 0;
    std::size_t column = 0;

    ConfigValue() = default;

    static ConfigValue null() { return ConfigValue(); }
    static ConfigValue boolean(bool b) {
        ConfigValue v;
        v.kind_ = Kind::boolean;
        v.bool_ = b;
        return v;
    }
    static ConfigValue integer(long long i) {
        ConfigValue v;
        v.kind_ = Kind::integer;
        v.int_ = i;
        return v;
    }
    static ConfigValue floating(double f) {
        ConfigValue v;
        v.kind_ = Kind::floating;
        v.float_ = f;
        return v;
    }
    static ConfigValue str(std::string s) {
        ConfigValue v;
        v.kind_ = Kind::string;
        v.str_ = std::move(s);
        return v;
    }
    static ConfigValue sequence(std::vector<ConfigValue> items = {}) {
        ConfigValue v;
        v.kind_ = Kind::sequence;
        v.items_ = std::move(items);
        return v;
    }
    static ConfigValue mapping(std::vector<std::pair<std::string, ConfigValue>> entries = {}) {
        ConfigValue v;
        v.kind_ = Kind::mapping;
        v.entries_ = std::move(entries);
        return v;
    }
    static ConfigValue tagged(std::string tag, ConfigValue payload) {
        ConfigValue v;
        v.kind_ = Kind::tagged;
        v.tag_ = std::move(tag);
        v.payload_.push_back(std::move(payload));
        return v;
    }

    Kind kind() const { return kind_; }
    bool is_null() const { return kind_ == Kind::null_v; }
    bool is_bool() const { return kind_ == Kind::boolean; }
    bool is_int() const { return kind_ == Kind::integer; }
    bool is_float() const { return kind_ == Kind::floating; }
    bool is_string() const { return kind_ == Kind::string; }
    bool is_sequence() const { return kind_ == Kind::sequence; }
    bool is_mapping() const { return kind_ == Kind::mapping; }
    bool is_tagged() const { return kind_ == Kind::tagged; }
    bool is_scalar() const {
        return kind_ == Kind::null_v || kind_ == Kind::boolean || kind_ == Kind::integer ||
               kind_ == Kind::floating || kind_ == Kind::string;
    }

    bool as_bool() const {
        expect(Kind::boolean, "boolean");
        return bool_;
    }
    long long as_int() const {
        expect(Kind::integer, "integer");
        return int_;
    }
    double as_float() const {
        expect(Kind::floating, "float");
        return float_;
    }
    // numeric accessor with the one permitted coercion: int widens to float
    double number() const {
        if (kind_ == Kind::integer) return static_cast<double>(int_);
        expect(Kind::floating, "number");
        return float_;
    }
    const std::string& as_string() const {
        expect(Kind::string, "string");
        return str_;
    }

    std::vector<ConfigValue>& items() {
        expect(Kind::sequence, "sequence");
        return items_;
    }
    const std::vector<ConfigValue>& items() const {
        expect(Kind::sequence, "sequence");
        return items_;
    }

    std::vector<std::pair<std::string, ConfigValue>>& entries() {
        expect(Kind::mapping, "mapping");
        return entries_;
    }
    const std::vector<std::pair<std::string, ConfigValue>>& entries() const {
        expect(Kind::mapping, "mapping");
        return entries_;
    }

    const ConfigValue* find(const std::string& key) const {
        expect(Kind::mapping, "mapping");
        for (const auto& [k, v] : entries_) {
            if (k == key) return &v;
        }
        return nullptr;
    }
    ConfigValue* find(const std::string& key) {
        expect(Kind::mapping, "mapping");
        for (auto& [k, v] : entries_) {
            if (k == key) return &v;
        }
        return nullptr;
    }
    bool has(const std::string& key) const { return find(key) != nullptr; }
    const ConfigValue& at(const std::string& key) const {
        const ConfigValue* v = find(key);
        if (!v) throw ConfigError(where() + "missing key '" + key + "'");
        return *v;
    }

    const std::string& tag() const {
        expect(Kind::tagged, "tagged node");
        return tag_;
    }
    const ConfigValue& payload() const {
        expect(Kind::tagged, "tagged node");
        return payload_[0];
    }
    ConfigValue& payload() {
        expect(Kind::tagged, "tagged node");
        return payload_[0];
    }

    std::string where() const {
        if (line == 0) return "";
        return "line " + std::to_string(line) + ", column " + std::to_string(column) + ": ";
    }

    // structural equality; source positions are ignored
    friend bool operator==(const ConfigValue& a, const ConfigValue& b) {
        if (a.kind_ != b.kind_) return false;
        switch (a.kind_) {
            case Kind::null_v: return true;
            case Kind::boolean: return a.bool_ == b.bool_;
            case Kind::integer: return a.int_ == b.int_;
            case Kind::floating: return a.float_ == b.float_;
            case Kind::string: return a.str_ == b.str_;
            case Kind::sequence: return a.items_ == b.items_;
            case Kind::mapping: return a.entries_ == b.entries_;
            case Kind::tagged: return a.tag_ == b.tag_ && a.payload_ == b.payload_;
        }
        return false;
    }
    friend bool operator!=(const ConfigValue& a, const ConfigValue& b) { return !(a == b); }

private:
    void expect(Kind k, const char* what) const {
        if (kind_ != k) throw ConfigError(where() + "expected " + what);
    }

    Kind kind_ = Kind::null_v;
    bool bool_ = false;
    long long int_ = 0;
    double float_ = 0.0;
    std::string str_;
    std::vector<ConfigValue> items_;
    std::vector<std::pair<std::string, ConfigValue>> entries_;
    std::string tag_;
    std::vector<ConfigValue> payload_;  // exactly one element when tagged
};

namespace detail {

inline bool known_tag(const std::string& tag) { return tag == "import_call" || tag == "ref"; }

struct SourceLine {
    std::size_t indent = 0;
    std::string text;  // content after indentation, comments stripped
    std::size_t number = 0;
};

[[noreturn]] inline void parse_fail(std::size_t line, std::size_t col, const std::string& msg) {
    throw ConfigError("parse error at line " + std::to_string(line) + ", column " +
                      std::to_string(col) + ": " + msg);
}

inline bool plain_int(const std::string& s) {
    std::size_t i = (s[0] == '+' || s[0] == '-') ? 1 : 0;
    if (i == s.size()) return false;
    for (; i < s.size(); ++i) {
        if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
    }
    return true;
}

inline bool plain_float(const std::string& s) {
    std::size_t i = (s[0] == '+' || s[0] == '-') ? 1 : 0;
    std::size_t digits = 0, dots = 0, exps = 0;
    bool digit_before_exp = false;
    for (; i < s.size(); ++i) {
        const char c = s[i];
        if (std::isdigit(static_cast<unsigned char>(c))) {
            ++digits;
            if (exps == 0) digit_before_exp = true;
        } else if (c == '.') {
            if (dots++ || exps) return false;
        } else if (c == 'e' || c == 'E') {
            if (exps++ || !digit_before_exp) return false;
            if (i + 1 < s.size() && (s[i + 1] == '+' || s[i + 1] == '-')) ++i;
            if (i + 1 >= s.size()) return false;
        } else {
            return false;
        }
    }
    return digits > 0 && (dots > 0 || exps > 0);
}

inline ConfigValue typed_plain_scalar(const std::string& s, std::size_t line, std::size_t col) {
    ConfigValue v;
    if (s == "null" || s == "~") {
        v = ConfigValue::null();
    } else if (s == "true") {
        v = ConfigValue::boolean(true);
    } else if (s == "false") {
        v = ConfigValue::boolean(false);
    } else if (plain_int(s)) {
        errno = 0;
        char* end = nullptr;
        const long long n = std::strtoll(s.c_str(), &end, 10);
        if (errno == ERANGE || *end != '\0') parse_fail(line, col, "integer out of range: " + s);
        v = ConfigValue::integer(n);
    } else if (plain_float(s)) {
        v = ConfigValue::floating(std::strtod(s.c_str(), nullptr));
    } else {
        const char c = s[0];
        if (c == '&' || c == '*') parse_fail(line, col, "anchors and aliases are not supported");
        if (c == '\'') parse_fail(line, col, "single-quoted strings are not supported");
        if (c == '{' || c == '}') parse_fail(line, col, "flow mappings are not supported");
        if (c == '%' || c == '@' || c == '`' || c == '|' || c == '>') {
            parse_fail(line, col, std::string("unsupported indicator '") + c + "'");
        }
        v = ConfigValue::str(s);
    }
    v.line = line;
    v.column = col;
    return v;
}

// Strips a trailing comment (an unquoted '#' at line start or after a space)
// and reports whether any double quote is left unclosed.
inline std::string strip_comment(const std::string& raw, std::size_t lineno) {
    bool quoted = false;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const char c = raw[i];
        if (quoted) {
            if (c == '\\') {
                ++i;
            } else if (c == '"') {
                quoted = false;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == '#' && (i == 0 || raw[i - 1] == ' ' || raw[i - 1] == '\t')) {
            return raw.substr(0, i);
        }
    }
    if (quoted) parse_fail(lineno, raw.size(), "unterminated string");
    return raw;
}

class ConfigParser {
public:
    explicit ConfigParser(const std::string& text) {
        std::size_t lineno = 0, start = 0;
        while (start <= text.size()) {
            std::size_t end = text.find('\n', start);
            if (end == std::string::npos) end = text.size();
            ++lineno;
            std::string raw = text.substr(start, end - start);
            if (!raw.empty() && raw.back() == '\r') raw.pop_back();
            raw = strip_comment(raw, lineno);
            std::size_t indent = 0;
            while (indent < raw.size() && raw[indent] == ' ') ++indent;
            if (indent < raw.size() && raw[indent] == '\t') {
                parse_fail(lineno, indent + 1, "tabs are not allowed in indentation");
            }
            std::string content = raw.substr(indent);
            while (!content.empty() && (content.back() == ' ' || content.back() == '\t')) {
                content.pop_back();
            }
            if (!content.empty()) lines_.push_back({indent, content, lineno});
            if (end == text.size()) break;
            start = end + 1;
        }
    }

    ConfigValue parse_document() {
        if (lines_.empty()) return ConfigValue::null();
        ConfigValue root = parse_block(0);
        if (pos_ < lines_.size()) {
            parse_fail(lines_[pos_].number, lines_[pos_].indent + 1, "unexpected dedent");
        }
        return root;
    }

private:
    bool at_end() const { return pos_ >= lines_.size(); }
    const SourceLine& cur() const { return lines_[pos_]; }

    static bool is_seq_item(const std::string& text) {
        return text == "-" || text.rfind("- ", 0) == 0;
    }

    ConfigValue parse_block(std::size_t min_indent) {
        if (at_end() || cur().indent < min_indent) return ConfigValue::null();
        const std::size_t indent = cur().indent;
        if (is_seq_item(cur().text)) return parse_sequence(indent);
        return parse_mapping(indent, nullptr, 0, 0);
    }

    ConfigValue parse_sequence(std::size_t indent) {
        ConfigValue seq = ConfigValue::sequence();
        seq.line = cur().number;
        seq.column = indent + 1;
        while (!at_end() && cur().indent == indent && is_seq_item(cur().text)) {
            const SourceLine line = cur();
            ++pos_;
            if (line.text == "-") {
                seq.items().push_back(parse_block(indent + 1));
                continue;
            }
            std::size_t off = 1;
            while (off < line.text.size() && line.text[off] == ' ') ++off;
            const std::string rest = line.text.substr(off);
            const std::size_t rest_col = indent + off;
            seq.items().push_back(parse_flow_value(rest, line.number, rest_col, indent, true));
        }
        if (!at_end() && cur().indent > indent) {
            parse_fail(cur().number, cur().indent + 1, "unexpected indent");
        }
        return seq;
    }

    // Parses the text that follows "- " or "key: ". For sequence items the
    // text may also open a compact mapping whose further entries sit at the
    // text's own column.
    ConfigValue parse_flow_value(const std::string& text, std::size_t lineno, std::size_t col,
                                 std::size_t anchor_indent, bool allow_mapping) {
        if (text[0] == '!') {
            return parse_tagged(text, lineno, col, anchor_indent);
        }
        if (text[0] == '[') {
            return parse_flow_sequence(text, lineno, col);
        }
        if (allow_mapping) {
            std::size_t split = find_key_split(text);
            if (split != std::string::npos) {
                return parse_mapping(col, &text, lineno, col);
            }
        }
        return parse_scalar_text(text, lineno, col);
    }

    ConfigValue parse_tagged(const std::string& text, std::size_t lineno, std::size_t col,
                             std::size_t anchor_indent) {
        std::size_t name_end = 1;
        while (name_end < text.size() && text[name_end] != ' ') ++name_end;
        const std::string name = text.substr(1, name_end - 1);
        if (name.empty()) parse_fail(lineno, col + 1, "empty tag name");
        if (!known_tag(name)) parse_fail(lineno, col + 1, "unknown tag '!" + name + "'");
        std::size_t rest_off = name_end;
        while (rest_off < text.size() && text[rest_off] == ' ') ++rest_off;
        const std::string rest = text.substr(rest_off);

        ConfigValue payload;
        if (!rest.empty()) {
            if (rest[0] == '[') {
                payload = parse_flow_sequence(rest, lineno, col + rest_off);
            } else {
                payload = parse_scalar_text(rest, lineno, col + rest_off);
            }
        } else {
            payload = parse_block(anchor_indent + 1);
        }
        ConfigValue v = ConfigValue::tagged(name, std::move(payload));
        v.line = lineno;
        v.column = col + 1;
        return v;
    }

    // Position of the ": " (or trailing ':') separating key from value,
    // respecting double quotes; npos when the text is not a mapping entry.
    static std::size_t find_key_split(const std::string& text) {
        bool quoted = false;
        for (std::size_t i = 0; i < text.size(); ++i) {
            const char c = text[i];
            if (quoted) {
                if (c == '\\') {
                    ++i;
                } else if (c == '"') {
                    quoted = false;
                }
            } else if (c == '"') {
                quoted = true;
            } else if (c == ':' && (i + 1 == text.size() || text[i + 1] == ' ')) {
                return i;
            }
        }
        return std::string::npos;
    }

    // `first` non-null parses a compact mapping whose first entry is given
    // inline (a "- key: value" sequence item).
    ConfigValue parse_mapping(std::size_t indent, const std::string* first,
                              std::size_t first_lineno, std::size_t first_col) {
        ConfigValue map = ConfigValue::mapping();
        bool have_first = first != nullptr;
        map.line = have_first ? first_lineno : cur().number;
        map.column = have_first ? first_col + 1 : indent + 1;

        while (true) {
            std::string text;
            std::size_t lineno, col;
            if (have_first) {
                text = *first;
                lineno = first_lineno;
                col = first_col;
                have_first = false;
            } else {
                if (at_end() || cur().indent != indent || is_seq_item(cur().text)) break;
                text = cur().text;
                lineno = cur().number;
                col = cur().indent;
                ++pos_;
            }

            const std::size_t split = find_key_split(text);
            if (split == std::string::npos) {
                parse_fail(lineno, col + 1, "expected 'key:' mapping entry");
            }
            std::string key_text = text.substr(0, split);
            while (!key_text.empty() && key_text.back() == ' ') key_text.pop_back();
            std::string key;
            if (!key_text.empty() && key_text[0] == '"') {
                ConfigValue k = parse_scalar_text(key_text, lineno, col);
                key = k.as_string();
            } else {
                key = key_text;
            }
            if (key.empty()) parse_fail(lineno, col + 1, "empty mapping key");
            if (map.has(key)) parse_fail(lineno, col + 1, "duplicate mapping key '" + key + "'");

            std::size_t voff = split + 1;
            while (voff < text.size() && text[voff] == ' ') ++voff;
            ConfigValue value;
            if (voff >= text.size()) {
                value = parse_block(indent + 1);
            } else {
                value = parse_flow_value(text.substr(voff), lineno, col + voff, indent, false);
            }
            map.entries().emplace_back(std::move(key), std::move(value));
        }
        if (!at_end() && cur().indent > indent) {
            parse_fail(cur().number, cur().indent + 1, "unexpected indent");
        }
        return map;
    }

    ConfigValue parse_flow_sequence(const std::string& text, std::size_t lineno, std::size_t col) {
        ConfigValue seq = ConfigValue::sequence();
        seq.line = lineno;
        seq.column = col + 1;
        std::size_t i = 1;
        auto skip_spaces = [&] {
            while (i < text.size() && text[i] == ' ') ++i;
        };
        skip_spaces();
        if (i < text.size() && text[i] == ']') {
            ++i;
        } else {
            while (true) {
                skip_spaces();
                if (i >= text.size()) parse_fail(lineno, col + i, "unterminated flow sequence");
                std::string token;
                const std::size_t token_col = col + i;
                if (text[i] == '"') {
                    std::size_t start = i++;
                    while (i < text.size() && text[i] != '"') {
                        if (text[i] == '\\') ++i;
                        ++i;
                    }
                    if (i >= text.size()) parse_fail(lineno, token_col + 1, "unterminated string");
                    token = text.substr(start, ++i - start);
                } else if (text[i] == '[') {
                    parse_fail(lineno, col + i + 1, "nested flow sequences are not supported");
                } else {
                    std::size_t start = i;
                    while (i < text.size() && text[i] != ',' && text[i] != ']') ++i;
                    token = text.substr(start, i - start);
                    while (!token.empty() && token.back() == ' ') token.pop_back();
                    if (token.empty()) parse_fail(lineno, token_col + 1, "empty flow element");
                }
                seq.items().push_back(parse_scalar_text(token, lineno, token_col));
                skip_spaces();
                if (i >= text.size()) parse_fail(lineno, col + i, "unterminated flow sequence");
                if (text[i] == ',') {
                    ++i;
                    continue;
                }
                if (text[i] == ']') {
                    ++i;
                    break;
                }
                parse_fail(lineno, col + i + 1, "expected ',' or ']'");
            }
        }
        std::size_t j = i;
        while (j < text.size() && text[j] == ' ') ++j;
        if (j < text.size()) parse_fail(lineno, col + j + 1, "trailing text after flow sequence");
        return seq;
    }

    ConfigValue parse_scalar_text(const std::string& text, std::size_t lineno, std::size_t col) {
        if (text[0] == '"') {
            std::string out;
            std::size_t i = 1;
            for (; i < text.size() && text[i] != '"'; ++i) {
                char c = text[i];
                if (c == '\\') {
                    if (++i >= text.size()) parse_fail(lineno, col + i, "bad escape");
                    switch (text[i]) {
                        case 'n': c = '\n'; break;
                        case 't': c = '\t'; break;
                        case 'r': c = '\r'; break;
                        case '"': c = '"'; break;
                        case '\\': c = '\\'; break;
                        default: parse_fail(lineno, col + i, "unsupported escape sequence");
                    }
                }
                out.push_back(c);
            }
            if (i >= text.size()) parse_fail(lineno, col + 1, "unterminated string");
            if (i + 1 != text.size()) {
                parse_fail(lineno, col + i + 2, "trailing text after string");
            }
            ConfigValue v = ConfigValue::str(out);
            v.line = lineno;
            v.column = col + 1;
            return v;
        }
        if (text[0] == '{' || text[0] == '}') {
            parse_fail(lineno, col + 1, "flow mappings are not supported");
        }
        if (find_key_split(text) != std::string::npos) {
            parse_fail(lineno, col + 1, "unexpected ':' in scalar");
        }
        return typed_plain_scalar(text, lineno, col + 1);
    }

    std::vector<SourceLine> lines_;
    std::size_t pos_ = 0;
};

// Shortest decimal text that parses back to exactly this double.
inline std::string double_text(double v) {
    char buf[40];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) return buf;
    }
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline bool plain_safe(const std::string& s) {
    if (s.empty() || s == "null" || s == "~" || s == "true" || s == "false") return false;
    if (plain_int(s) || plain_float(s)) return false;
    if (s.front() == ' ' || s.back() == ' ') return false;
    static const std::string forbidden_first = "!&*?|>%@`\"'#-[]{},:";
    if (forbidden_first.find(s.front()) != std::string::npos) return false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const char c = s[i];
        if (c == '"' || c == '#' || c == '[' || c == ']' || c == '{' || c == '}' || c == ',') {
            return false;
        }
        if (static_cast<unsigned char>(c) < 0x20) return false;
        if (c == ':' && (i + 1 == s.size() || s[i + 1] == ' ')) return false;
    }
    return true;
}

inline std::string quote_string(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            case '\r': out += "\\r"; break;
            default: out.push_back(c);
        }
    }
    out.push_back('"');
    return out;
}

inline std::string scalar_text(const ConfigValue& v) {
    switch (v.kind()) {
        case ConfigValue::Kind::null_v: return "null";
        case ConfigValue::Kind::boolean: return v.as_bool() ? "true" : "false";
        case ConfigValue::Kind::integer: return std::to_string(v.as_int());
        case ConfigValue::Kind::floating: {
            std::string s = double_text(v.as_float());
            if (s.find_first_of(".eE") == std::string::npos &&
                s.find_first_of("ni") == std::string::npos) {
                s += ".0";  // keep the float kind through a re-parse
            }
            return s;
        }
        case ConfigValue::Kind::string: {
            const std::string& s = v.as_string();
            return plain_safe(s) ? s : quote_string(s);
        }
        default: throw Error("scalar_text on a non-scalar node");
    }
}

inline bool flow_friendly(const ConfigValue& v) {
    if (!v.is_sequence()) return false;
    for (const auto& item : v.items()) {
        if (!item.is_scalar()) return false;
        if (item.is_string() && !plain_safe(item.as_string()) &&
            item.as_string().find('"') != std::string::npos) {
            return false;
        }
    }
    return true;
}

inline std::string flow_text(const ConfigValue& seq) {
    std::string out = "[";
    for (std::size_t i = 0; i < seq.items().size(); ++i) {
        if (i) out += ", ";
        out += scalar_text(seq.items()[i]);
    }
    out += "]";
    return out;
}

inline void serialize_node(const ConfigValue& v, std::size_t indent, std::string& out);

inline void serialize_mapping_entries(const ConfigValue& map, std::size_t indent,
                                      std::string& out, bool first_inline) {
    const std::string pad(indent, ' ');
    bool first = true;
    for (const auto& [key, value] : map.entries()) {
        if (!(first && first_inline)) out += pad;
        first = false;
        out += plain_safe(key) ? key : quote_string(key);
        out += ":";
        if (value.is_scalar()) {
            out += " " + scalar_text(value) + "\n";
        } else if (flow_friendly(value)) {
            out += " " + flow_text(value) + "\n";
        } else if (value.is_tagged()) {
            out += " ";
            serialize_node(value, indent, out);
        } else if ((value.is_mapping() && value.entries().empty()) ||
                   (value.is_sequence() && value.items().empty())) {
            out += value.is_mapping() ? " {}\n" : " []\n";
        } else {
            out += "\n";
            serialize_node(value, indent + 2, out);
        }
    }
}

inline void serialize_node(const ConfigValue& v, std::size_t indent, std::string& out) {
    const std::string pad(indent, ' ');
    switch (v.kind()) {
        case ConfigValue::Kind::mapping:
            serialize_mapping_entries(v, indent, out, false);
            break;
        case ConfigValue::Kind::sequence:
            for (const auto& item : v.items()) {
                if (item.is_scalar()) {
                    out += pad + "- " + scalar_text(item) + "\n";
                } else if (flow_friendly(item)) {
                    out += pad + "- " + flow_text(item) + "\n";
                } else if (item.is_mapping() && !item.entries().empty()) {
                    out += pad + "- ";
                    serialize_mapping_entries(item, indent + 2, out, true);
                } else if (item.is_tagged()) {
                    out += pad + "- ";
                    serialize_node(item, indent + 2, out);
                } else {
                    out += pad + "-\n";
                    serialize_node(item, indent + 2, out);
                }
            }
            break;
        case ConfigValue::Kind::tagged: {
            // caller has emitted everything before the tag token
            out += "!" + v.tag();
            const ConfigValue& p = v.payload();
            if (p.is_scalar() && !p.is_null()) {
                out += " " + scalar_text(p) + "\n";
            } else if (flow_friendly(p)) {
                out += " " + flow_text(p) + "\n";
            } else if (p.is_null()) {
                out += "\n";
            } else {
                out += "\n";
                serialize_node(p, indent + 2, out);
            }
            break;
        }
        default:
            out += pad + scalar_text(v) + "\n";
    }
}

}  // namespace detail

inline ConfigValue parse_config(const std::string& text) {
    return detail::ConfigParser(text).parse_document();
}

inline ConfigValue parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

// Canonical text form; parse(serialize(parse(x))) == parse(x).
inline std::string serialize_config(const ConfigValue& v) {
    if (v.is_null()) return "";
    std::string out;
    detail::serialize_node(v, 0, out);
    return out;
}

// Parses an override value with the same scalar typing rules as the config
// format; flow sequences allowed.
inline ConfigValue parse_override_value(const std::string& text) {
    if (text.empty()) return ConfigValue::null();
    ConfigValue doc = parse_config("v: " + text);
    return doc.at("v");
}

namespace detail {

inline std::vector<std::string> split_dotted(const std::string& dotted) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (start <= dotted.size()) {
        std::size_t dot = dotted.find('.', start);
        if (dot == std::string::npos) dot = dotted.size();
        parts.push_back(dotted.substr(start, dot - start));
        start = dot + 1;
    }
    for (const auto& p : parts) {
        if (p.empty()) throw ConfigError("bad path '" + dotted + "'");
    }
    return parts;
}

// Steps through one path segment; tagged nodes are transparent (the path
// descends into their payload).
inline ConfigValue* descend(ConfigValue* node, const std::string& part) {
    while (node->is_tagged()) node = &node->payload();
    if (node->is_mapping()) return node->find(part);
    if (node->is_sequence()) {
        if (!plain_int(part)) return nullptr;
        const std::size_t i = static_cast<std::size_t>(std::strtoll(part.c_str(), nullptr, 10));
        if (i >= node->items().size()) return nullptr;
        return &node->items()[i];
    }
    return nullptr;
}

}  // namespace detail

inline ConfigValue* find_config_path(ConfigValue& root, const std::string& dotted) {
    ConfigValue* node = &root;
    for (const auto& part : detail::split_dotted(dotted)) {
        node = detail::descend(node, part);
        if (!node) return nullptr;
    }
    return node;
}

inline const ConfigValue* find_config_path(const ConfigValue& root, const std::string& dotted) {
    return find_config_path(const_cast<ConfigValue&>(root), dotted);
}

// Applies one `a.b.c=value` style override. Intermediate segments must
// exist; the final key may be new (inserted at the end of its mapping).
inline void set_config_path(ConfigValue& root, const std::string& dotted, ConfigValue value) {
    auto parts = detail::split_dotted(dotted);
    ConfigValue* node = &root;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        node = detail::descend(node, parts[i]);
        if (!node) {
            throw ConfigError("override path '" + dotted + "' does not resolve: no '" + parts[i] +
                              "'");
        }
    }
    while (node->is_tagged()) node = &node->payload();
    const std::string& last = parts.back();
    if (node->is_sequence()) {
        ConfigValue* slot = detail::descend(node, last);
        if (!slot) throw ConfigError("override path '" + dotted + "' does not resolve");
        *slot = std::move(value);
        return;
    }
    if (!node->is_mapping()) {
        throw ConfigError("override path '" + dotted + "' does not land in a mapping");
    }
    if (ConfigValue* slot = node->find(last)) {
        *slot = std::move(value);
    } else {
        node->entries().emplace_back(last, std::move(value));
    }
}

}  // namespace kdkit
