#pragma once

// Reader and writer for the scenario document format:
//
//   # comment
//   [section.name]
//   key = 1.5
//   list = [1, 2, 3.25]
//   path = "relative/file.csv"
//
// One value per line. Keys are unique per section; sections may not repeat.

#include <charconv>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <variant>
#include <vector>

namespace merge_stack {

/// Error carrying the dotted path of the offending field.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string field, const std::string& message)
        : std::runtime_error(field.empty() ? message : field + ": " + message), field_(std::move(field)) {}

    [[nodiscard]] const std::string& field() const { return field_; }

private:
    std::string field_;
};

/// Shortest decimal text that parses back to the same double.
inline std::string format_number(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

struct ConfigValue {
    std::variant<double, std::vector<double>, std::string> data;
    int line = 0;
};

class ConfigDocument {
public:
    using Section = std::map<std::string, ConfigValue>;

    static ConfigDocument parse(std::string_view text) {
        ConfigDocument doc;
        std::string current;
        int line_no = 0;
        std::size_t pos = 0;
        while (pos <= text.size()) {
            const std::size_t eol = std::min(text.find('\n', pos), text.size());
            std::string_view line = text.substr(pos, eol - pos);
            pos = eol + 1;
            ++line_no;
            line = strip(strip_comment(line));
            if (line.empty()) continue;

            if (line.front() == '[') {
                if (line.back() != ']') throw line_error(line_no, "unterminated section header");
                std::string name(strip(line.substr(1, line.size() - 2)));
                if (name.empty()) throw line_error(line_no, "empty section name");
                if (doc.sections_.count(name)) throw ConfigError(name, "section appears twice");
                doc.sections_[name];
                doc.order_.push_back(name);
                current = std::move(name);
                continue;
            }

            const auto eq = line.find('=');
            if (eq == std::string_view::npos) throw line_error(line_no, "expected 'key = value'");
            const std::string key(strip(line.substr(0, eq)));
            const std::string_view raw = strip(line.substr(eq + 1));
            if (current.empty()) throw line_error(line_no, "key '" + key + "' outside any section");
            if (key.empty()) throw line_error(line_no, "empty key");
            const std::string path = current + "." + key;
            auto& sec = doc.sections_[current];
            if (sec.count(key)) throw ConfigError(path, "key appears twice");
            sec[key] = ConfigValue{parse_value(raw, path), line_no};
        }
        return doc;
    }

    [[nodiscard]] bool has_section(const std::string& s) const { return sections_.count(s) != 0; }
    [[nodiscard]] const std::vector<std::string>& section_order() const { return order_; }

    [[nodiscard]] const ConfigValue* find(const std::string& section, const std::string& key) const {
        const auto s = sections_.find(section);
        if (s == sections_.end()) return nullptr;
        const auto k = s->second.find(key);
        return k == s->second.end() ? nullptr : &k->second;
    }

    [[nodiscard]] std::vector<std::string> keys(const std::string& section) const {
        std::vector<std::string> out;
        if (const auto s = sections_.find(section); s != sections_.end())
            for (const auto& [k, _] : s->second) out.push_back(k);
        return out;
    }

    [[nodiscard]] std::optional<double> number(const std::string& section, const std::string& key) const {
        const auto* v = find(section, key);
        if (!v) return std::nullopt;
        if (const auto* d = std::get_if<double>(&v->data)) return *d;
        throw ConfigError(section + "." + key, "expected a number");
    }

    [[nodiscard]] std::optional<std::vector<double>> list(const std::string& section, const std::string& key) const {
        const auto* v = find(section, key);
        if (!v) return std::nullopt;
        if (const auto* l = std::get_if<std::vector<double>>(&v->data)) return *l;
        if (const auto* d = std::get_if<double>(&v->data)) return std::vector<double>{*d};
        throw ConfigError(section + "." + key, "expected a list of numbers");
    }

    [[nodiscard]] std::optional<std::string> text(const std::string& section, const std::string& key) const {
        const auto* v = find(section, key);
        if (!v) return std::nullopt;
        if (const auto* s = std::get_if<std::string>(&v->data)) return *s;
        throw ConfigError(section + "." + key, "expected a quoted string");
    }

private:
    static std::string_view strip(std::string_view s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string_view::npos) return {};
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    // '#' inside a quoted string is kept.
    static std::string_view strip_comment(std::string_view s) {
        bool quoted = false;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '"') quoted = !quoted;
            else if (s[i] == '#' && !quoted) return s.substr(0, i);
        }
        return s;
    }

    static ConfigError line_error(int line, const std::string& msg) {
        return ConfigError("line " + std::to_string(line), msg);
    }

    static double parse_double(std::string_view tok, const std::string& path) {
        tok = strip(tok);
        if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
        double v = 0.0;
        const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (tok.empty() || res.ec != std::errc() || res.ptr != tok.data() + tok.size())
            throw ConfigError(path, "cannot parse '" + std::string(tok) + "' as a number");
        if (!std::isfinite(v)) throw ConfigError(path, "value must be finite");
        return v;
    }

    static decltype(ConfigValue::data) parse_value(std::string_view raw, const std::string& path) {
        if (raw.empty()) throw ConfigError(path, "missing value");
        if (raw.front() == '"') {
            if (raw.size() < 2 || raw.back() != '"') throw ConfigError(path, "unterminated string");
            return std::string(raw.substr(1, raw.size() - 2));
        }
        if (raw.front() == '[') {
            if (raw.back() != ']') throw ConfigError(path, "unterminated list");
            std::vector<double> out;
            std::string_view body = strip(raw.substr(1, raw.size() - 2));
            while (!body.empty()) {
                const auto comma = body.find(',');
                out.push_back(parse_double(body.substr(0, comma), path));
                if (comma == std::string_view::npos) break;
                body = strip(body.substr(comma + 1));
                if (body.empty()) throw ConfigError(path, "trailing comma in list");
            }
            return out;
        }
        return parse_double(raw, path);
    }

    std::map<std::string, Section> sections_;
    std::vector<std::string> order_;
};

/// Accumulates a document in a fixed section/key order.
class ConfigWriter {
public:
    void section(const std::string& name) {
        if (!out_.str().empty()) out_ << '\n';
        out_ << '[' << name << "]\n";
    }
    void number(const std::string& key, double v) { out_ << key << " = " << format_number(v) << '\n'; }
    void list(const std::string& key, const std::vector<double>& v) {
        out_ << key << " = [";
        for (std::size_t i = 0; i < v.size(); ++i) out_ << (i ? ", " : "") << format_number(v[i]);
        out_ << "]\n";
    }
    void text(const std::string& key, const std::string& v) { out_ << key << " = \"" << v << "\"\n"; }

    [[nodiscard]] std::string str() const { return out_.str(); }

private:
    std::ostringstream out_;
};

}  // namespace merge_stack
