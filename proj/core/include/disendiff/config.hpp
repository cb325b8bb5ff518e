// Plain-text `key = value` configuration files ('#' comments) and the run
// manifest written next to every command's outputs.
#pragma once

#include <map>
#include <string>

namespace disendiff {

class KeyValueFile {
  public:
    KeyValueFile() = default;
    static KeyValueFile load(const std::string& path);
    void save(const std::string& path) const;

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    std::string get(const std::string& key, const std::string& fallback = "") const;
    double get_double(const std::string& key, double fallback) const;
    int get_int(const std::string& key, int fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    // without this a string literal would bind to the bool overload
    void set(const std::string& key, const char* value) { values_[key] = value; }
    void set(const std::string& key, double value);
    void set(const std::string& key, int value) { values_[key] = std::to_string(value); }
    void set(const std::string& key, bool value) { values_[key] = value ? "true" : "false"; }

    const std::map<std::string, std::string>& values() const { return values_; }

  private:
    std::map<std::string, std::string> values_;
};

// Writes <dir>/manifest.txt with the config snapshot, seed, and content
// hashes of the named input files (checkpoints etc).
void write_manifest(const std::string& dir, const KeyValueFile& config,
                    const std::map<std::string, std::string>& input_files);

}  // namespace disendiff
