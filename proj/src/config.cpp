#include "simplexlm/config.hpp"

#include <fstream>
#include <sstream>

#include "simplexlm/errors.hpp"

namespace simplexlm {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) {
        return "";
    }
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

} // namespace

ConfigFile ConfigFile::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open config: " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_string(ss.str(), path);
}

ConfigFile ConfigFile::parse_string(const std::string& text, const std::string& name) {
    ConfigFile cfg;
    cfg.name_ = name;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        cfg.ordered_lines_.push_back(line);
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') {
            continue;
        }
        if (t.front() == '[') {
            if (t.back() != ']' || t.size() < 3) {
                throw ConfigError(name + " line " + std::to_string(line_no) +
                                  ": malformed section header");
            }
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        const size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(name + " line " + std::to_string(line_no) +
                              ": expected key = value");
        }
        const std::string key = trim(t.substr(0, eq));
        if (key.empty()) {
            throw ConfigError(name + " line " + std::to_string(line_no) + ": empty key");
        }
        cfg.sections_[section][key].push_back(Entry{trim(t.substr(eq + 1)), line_no});
    }
    return cfg;
}

const ConfigFile::Entry* ConfigFile::find(const std::string& section,
                                          const std::string& key) const {
    auto sit = sections_.find(section);
    if (sit == sections_.end()) {
        return nullptr;
    }
    auto kit = sit->second.find(key);
    if (kit == sit->second.end() || kit->second.empty()) {
        return nullptr;
    }
    return &kit->second.back();
}

void ConfigFile::bad_value(const std::string& section, const std::string& key,
                           const Entry& e, const std::string& want) const {
    throw ConfigError(name_ + " line " + std::to_string(e.line) + ": [" + section + "] " +
                      key + " = '" + e.value + "' is not a valid " + want);
}

bool ConfigFile::has(const std::string& section, const std::string& key) const {
    return find(section, key) != nullptr;
}

std::string ConfigFile::get_str(const std::string& section, const std::string& key,
                                const std::string& fallback) const {
    const Entry* e = find(section, key);
    return e ? e->value : fallback;
}

std::string ConfigFile::require_str(const std::string& section,
                                    const std::string& key) const {
    const Entry* e = find(section, key);
    if (!e) {
        throw ConfigError(name_ + ": missing required key [" + section + "] " + key);
    }
    return e->value;
}

int ConfigFile::get_int(const std::string& section, const std::string& key,
                        int fallback) const {
    const Entry* e = find(section, key);
    if (!e) {
        return fallback;
    }
    try {
        size_t used = 0;
        const int v = std::stoi(e->value, &used);
        if (used != e->value.size()) {
            bad_value(section, key, *e, "integer");
        }
        return v;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        bad_value(section, key, *e, "integer");
    }
}

double ConfigFile::get_double(const std::string& section, const std::string& key,
                              double fallback) const {
    const Entry* e = find(section, key);
    if (!e) {
        return fallback;
    }
    try {
        size_t used = 0;
        const double v = std::stod(e->value, &used);
        if (used != e->value.size()) {
            bad_value(section, key, *e, "number");
        }
        return v;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        bad_value(section, key, *e, "number");
    }
}

bool ConfigFile::get_bool(const std::string& section, const std::string& key,
                          bool fallback) const {
    const Entry* e = find(section, key);
    if (!e) {
        return fallback;
    }
    if (e->value == "true" || e->value == "1" || e->value == "yes") {
        return true;
    }
    if (e->value == "false" || e->value == "0" || e->value == "no") {
        return false;
    }
    bad_value(section, key, *e, "boolean");
}

uint64_t ConfigFile::get_u64(const std::string& section, const std::string& key,
                             uint64_t fallback) const {
    const Entry* e = find(section, key);
    if (!e) {
        return fallback;
    }
    try {
        size_t used = 0;
        const uint64_t v = std::stoull(e->value, &used);
        if (used != e->value.size()) {
            bad_value(section, key, *e, "unsigned integer");
        }
        return v;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        bad_value(section, key, *e, "unsigned integer");
    }
}

std::vector<std::string> ConfigFile::get_all(const std::string& section,
                                             const std::string& key) const {
    std::vector<std::string> out;
    auto sit = sections_.find(section);
    if (sit == sections_.end()) {
        return out;
    }
    auto kit = sit->second.find(key);
    if (kit == sit->second.end()) {
        return out;
    }
    for (const Entry& e : kit->second) {
        out.push_back(e.value);
    }
    return out;
}

std::string ConfigFile::render() const {
    std::ostringstream out;
    for (const auto& line : ordered_lines_) {
        out << line << '\n';
    }
    return out.str();
}

} // namespace simplexlm
