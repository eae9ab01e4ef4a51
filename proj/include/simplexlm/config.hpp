#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace simplexlm {

// Flat, line-oriented key=value configuration with [section] headers and
// '#' comments. Diff-friendly and parsed with no dependencies; every error
// message carries the file name and line number.
class ConfigFile {
public:
    struct Entry {
        std::string value;
        int line = 0;
    };

    static ConfigFile parse_file(const std::string& path);
    static ConfigFile parse_string(const std::string& text, const std::string& name);

    bool has(const std::string& section, const std::string& key) const;
    std::string get_str(const std::string& section, const std::string& key,
                        const std::string& fallback) const;
    std::string require_str(const std::string& section, const std::string& key) const;
    int get_int(const std::string& section, const std::string& key, int fallback) const;
    double get_double(const std::string& section, const std::string& key,
                      double fallback) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
    uint64_t get_u64(const std::string& section, const std::string& key,
                     uint64_t fallback) const;
    // All values of a repeated key, in file order (e.g. shard lines).
    std::vector<std::string> get_all(const std::string& section,
                                     const std::string& key) const;

    // Flat dump for run-metadata records.
    std::string render() const;
    const std::string& name() const { return name_; }

private:
    std::string name_;
    // section -> key -> entries (repeats allowed)
    std::map<std::string, std::map<std::string, std::vector<Entry>>> sections_;
    std::vector<std::string> ordered_lines_;

    const Entry* find(const std::string& section, const std::string& key) const;
    [[noreturn]] void bad_value(const std::string& section, const std::string& key,
                                const Entry& e, const std::string& want) const;
};

} // namespace simplexlm
