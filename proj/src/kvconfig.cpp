#include "refsr/kvconfig.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "refsr/error.hpp"

namespace refsr {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::string format_double(double v) {
    // Shortest representation that round-trips.
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

KeyValueConfig KeyValueConfig::parse(const std::string& text) {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos || eq == 0)
            fail(ErrorCode::InvalidArgument, "config line " + std::to_string(lineno) + ": expected key=value");
        cfg.values_[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::NotFound, path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

void KeyValueConfig::set(const std::string& key, double value) { values_[key] = format_double(value); }

void KeyValueConfig::set(const std::string& key, long long value) { values_[key] = std::to_string(value); }

std::optional<std::string> KeyValueConfig::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& def) const {
    return get(key).value_or(def);
}

double KeyValueConfig::get_double(const std::string& key, double def) const {
    const auto v = get(key);
    if (!v) return def;
    double out = 0.0;
    const auto* first = v->data();
    const auto* last = v->data() + v->size();
    auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc() || ptr != last) fail(ErrorCode::InvalidArgument, key + ": not a number: " + *v);
    return out;
}

long long KeyValueConfig::get_int(const std::string& key, long long def) const {
    const auto v = get(key);
    if (!v) return def;
    long long out = 0;
    const auto* first = v->data();
    const auto* last = v->data() + v->size();
    auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc() || ptr != last) fail(ErrorCode::InvalidArgument, key + ": not an integer: " + *v);
    return out;
}

bool KeyValueConfig::get_bool(const std::string& key, bool def) const {
    const auto v = get(key);
    if (!v) return def;
    if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
    if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
    fail(ErrorCode::InvalidArgument, key + ": not a boolean: " + *v);
}

std::pair<double, double> KeyValueConfig::get_range(const std::string& key, std::pair<double, double> def) const {
    const auto v = get(key);
    if (!v) return def;
    const auto comma = v->find(',');
    if (comma == std::string::npos) fail(ErrorCode::InvalidArgument, key + ": expected lo,hi");
    KeyValueConfig tmp;
    tmp.set("lo", trim(v->substr(0, comma)));
    tmp.set("hi", trim(v->substr(comma + 1)));
    return {tmp.get_double("lo", 0.0), tmp.get_double("hi", 0.0)};
}

KeyValueConfig KeyValueConfig::section(const std::string& prefix) const {
    KeyValueConfig out;
    const std::string p = prefix + ".";
    for (const auto& [k, v] : values_)
        if (k.rfind(p, 0) == 0) out.values_[k.substr(p.size())] = v;
    return out;
}

void KeyValueConfig::merge(const KeyValueConfig& other, const std::string& prefix) {
    for (const auto& [k, v] : other.values_) values_[prefix.empty() ? k : prefix + "." + k] = v;
}

std::string KeyValueConfig::to_string() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
}

void KeyValueConfig::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) fail(ErrorCode::Unwritable, path.string());
    out << to_string();
}

}  // namespace refsr
