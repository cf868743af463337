#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace refsr {

// Line-oriented `key=value` store. Keys may carry section dots
// (`model.dim=64`); `#` starts a comment line. Iteration order is sorted so
// serialized output is stable.
class KeyValueConfig {
public:
    static KeyValueConfig parse(const std::string& text);
    static KeyValueConfig load(const std::filesystem::path& path);

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    void set(const std::string& key, double value);
    void set(const std::string& key, long long value);
    void set(const std::string& key, int value) { set(key, static_cast<long long>(value)); }
    void set(const std::string& key, bool value) { set(key, std::string(value ? "true" : "false")); }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    std::optional<std::string> get(const std::string& key) const;

    // Typed getters fall back to `def` when the key is absent and throw
    // InvalidArgument when present but unparsable.
    std::string get_string(const std::string& key, const std::string& def) const;
    double get_double(const std::string& key, double def) const;
    long long get_int(const std::string& key, long long def) const;
    bool get_bool(const std::string& key, bool def) const;
    // "lo,hi" pairs.
    std::pair<double, double> get_range(const std::string& key, std::pair<double, double> def) const;

    // Entries under `prefix.` with the prefix stripped.
    KeyValueConfig section(const std::string& prefix) const;
    // Copies every entry of `other` under `prefix.`, overriding existing keys.
    void merge(const KeyValueConfig& other, const std::string& prefix = "");

    std::string to_string() const;
    void save(const std::filesystem::path& path) const;

    const std::map<std::string, std::string>& entries() const noexcept { return values_; }

private:
    std::map<std::string, std::string> values_;
};

std::string format_double(double v);

}  // namespace refsr
