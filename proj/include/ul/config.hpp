#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace ul {

// Flat, typed key=value configuration. Keys use dotted section prefixes
// ("schedule.lambda_max=5"); values stay verbatim strings until a typed getter
// parses them, so parse -> serialize -> parse is the identity on entries.
// '#' starts a comment; blank lines are ignored; duplicate keys are errors.
struct ConfigMap {
    std::vector<std::pair<std::string, std::string>> entries;  // insertion order

    bool has(const std::string& key) const;
    const std::string* raw(const std::string& key) const;
    void set(const std::string& key, const std::string& value);

    std::string get_string(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key) const;
    double get_double(const std::string& key, double fallback) const;
    int64_t get_int(const std::string& key) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    bool get_bool(const std::string& key) const;
    bool get_bool(const std::string& key, bool fallback) const;
    // Full-range uint64 (seeds); rejects negative input instead of wrapping.
    uint64_t get_seed(const std::string& key) const;
    uint64_t get_seed(const std::string& key, uint64_t fallback) const;
    std::vector<int> get_int_list(const std::string& key) const;
    std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;
    std::vector<double> get_double_list(const std::string& key) const;

    void set_double(const std::string& key, double v);
    void set_int(const std::string& key, int64_t v);
    void set_bool(const std::string& key, bool v);
    void set_seed(const std::string& key, uint64_t v);
    void set_int_list(const std::string& key, const std::vector<int>& v);

    std::string serialize() const;

    // All keys actually read through a getter since construction; lets callers
    // reject misspelled keys.
    std::vector<std::string> unread_keys() const;

  private:
    mutable std::vector<std::string> read_;
    void note_read(const std::string& key) const;
};

// Diagnostics carry 1-based line numbers; the file loader prefixes the path.
ConfigMap parse_config_text(const std::string& text);
ConfigMap load_config_file(const std::string& path);
void save_config_file(const ConfigMap& cfg, const std::string& path);

}  // namespace ul
