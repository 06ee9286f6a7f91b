#include "ul/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ul {
namespace {

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

bool valid_key(const std::string& k) {
    if (k.empty()) return false;
    for (char c : k) {
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-')) {
            return false;
        }
    }
    return true;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* want) {
    throw std::invalid_argument("config: key '" + key + "' holds '" + value + "', expected " + want);
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) bad_value(key, value, "a number");
        return v;
    } catch (const std::invalid_argument&) {
        bad_value(key, value, "a number");
    } catch (const std::out_of_range&) {
        bad_value(key, value, "a representable number");
    }
}

int64_t parse_int(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const long long v = std::stoll(value, &pos);
        if (pos != value.size()) bad_value(key, value, "an integer");
        return v;
    } catch (const std::invalid_argument&) {
        bad_value(key, value, "an integer");
    } catch (const std::out_of_range&) {
        bad_value(key, value, "a representable integer");
    }
}

uint64_t parse_seed(const std::string& key, const std::string& value) {
    // stoull wraps negative input around instead of failing; refuse it up front.
    if (value.find('-') != std::string::npos) bad_value(key, value, "an unsigned integer");
    try {
        size_t pos = 0;
        const unsigned long long v = std::stoull(value, &pos);
        if (pos != value.size()) bad_value(key, value, "an unsigned integer");
        return v;
    } catch (const std::invalid_argument&) {
        bad_value(key, value, "an unsigned integer");
    } catch (const std::out_of_range&) {
        bad_value(key, value, "a representable unsigned integer");
    }
}

std::vector<std::string> split_commas(const std::string& value) {
    std::vector<std::string> parts;
    std::string cur;
    std::stringstream ss(value);
    while (std::getline(ss, cur, ',')) parts.push_back(trim(cur));
    return parts;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void ConfigMap::note_read(const std::string& key) const {
    if (std::find(read_.begin(), read_.end(), key) == read_.end()) read_.push_back(key);
}

bool ConfigMap::has(const std::string& key) const { return raw(key) != nullptr; }

const std::string* ConfigMap::raw(const std::string& key) const {
    for (const auto& [k, v] : entries) {
        if (k == key) {
            note_read(key);
            return &v;
        }
    }
    return nullptr;
}

void ConfigMap::set(const std::string& key, const std::string& value) {
    if (!valid_key(key)) throw std::invalid_argument("config: invalid key '" + key + "'");
    for (auto& [k, v] : entries) {
        if (k == key) {
            v = value;
            return;
        }
    }
    entries.emplace_back(key, value);
}

std::string ConfigMap::get_string(const std::string& key) const {
    const std::string* v = raw(key);
    if (!v) throw std::invalid_argument("config: missing required key '" + key + "'");
    return *v;
}

std::string ConfigMap::get_string(const std::string& key, const std::string& fallback) const {
    const std::string* v = raw(key);
    return v ? *v : fallback;
}

double ConfigMap::get_double(const std::string& key) const {
    return parse_double(key, get_string(key));
}

double ConfigMap::get_double(const std::string& key, double fallback) const {
    const std::string* v = raw(key);
    return v ? parse_double(key, *v) : fallback;
}

int64_t ConfigMap::get_int(const std::string& key) const { return parse_int(key, get_string(key)); }

int64_t ConfigMap::get_int(const std::string& key, int64_t fallback) const {
    const std::string* v = raw(key);
    return v ? parse_int(key, *v) : fallback;
}

bool ConfigMap::get_bool(const std::string& key) const {
    const std::string v = get_string(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad_value(key, v, "a boolean (true/false/1/0)");
}

bool ConfigMap::get_bool(const std::string& key, bool fallback) const {
    return has(key) ? get_bool(key) : fallback;
}

uint64_t ConfigMap::get_seed(const std::string& key) const {
    return parse_seed(key, get_string(key));
}

uint64_t ConfigMap::get_seed(const std::string& key, uint64_t fallback) const {
    const std::string* v = raw(key);
    return v ? parse_seed(key, *v) : fallback;
}

std::vector<int> ConfigMap::get_int_list(const std::string& key) const {
    std::vector<int> out;
    for (const std::string& p : split_commas(get_string(key))) {
        out.push_back(static_cast<int>(parse_int(key, p)));
    }
    return out;
}

std::vector<int> ConfigMap::get_int_list(const std::string& key,
                                         const std::vector<int>& fallback) const {
    return has(key) ? get_int_list(key) : fallback;
}

std::vector<double> ConfigMap::get_double_list(const std::string& key) const {
    std::vector<double> out;
    for (const std::string& p : split_commas(get_string(key))) out.push_back(parse_double(key, p));
    return out;
}

void ConfigMap::set_double(const std::string& key, double v) { set(key, format_double(v)); }
void ConfigMap::set_int(const std::string& key, int64_t v) { set(key, std::to_string(v)); }
void ConfigMap::set_bool(const std::string& key, bool v) { set(key, v ? "true" : "false"); }
void ConfigMap::set_seed(const std::string& key, uint64_t v) { set(key, std::to_string(v)); }

void ConfigMap::set_int_list(const std::string& key, const std::vector<int>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(v[i]);
    }
    set(key, s);
}

std::string ConfigMap::serialize() const {
    std::string out;
    for (const auto& [k, v] : entries) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

std::vector<std::string> ConfigMap::unread_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries) {
        if (std::find(read_.begin(), read_.end(), k) == read_.end()) out.push_back(k);
    }
    return out;
}

ConfigMap parse_config_text(const std::string& text) {
    ConfigMap cfg;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("line " + std::to_string(lineno) +
                                        ": expected key=value, got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!valid_key(key)) {
            throw std::invalid_argument("line " + std::to_string(lineno) + ": invalid key '" + key +
                                        "'");
        }
        for (const auto& [k, v] : cfg.entries) {
            if (k == key) {
                throw std::invalid_argument("line " + std::to_string(lineno) + ": duplicate key '" +
                                            key + "'");
            }
        }
        cfg.entries.emplace_back(key, value);
    }
    return cfg;
}

ConfigMap load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return parse_config_text(buf.str());
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(path + ":" + e.what());
    }
}

void save_config_file(const ConfigMap& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("config: cannot write '" + path + "'");
    out << cfg.serialize();
    if (!out) throw std::runtime_error("config: failed writing '" + path + "'");
}

}  // namespace ul
