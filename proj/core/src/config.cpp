#include "disendiff/config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "disendiff/checkpoint.hpp"

namespace disendiff {

namespace {
std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}
}  // namespace

KeyValueFile KeyValueFile::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    KeyValueFile cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: missing '=' at " + path + ":" +
                                     std::to_string(lineno));
        cfg.values_[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return cfg;
}

void KeyValueFile::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path + " for writing");
    for (const auto& [k, v] : values_) f << k << " = " << v << "\n";
}

std::string KeyValueFile::get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

double KeyValueFile::get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : std::stod(it->second);
}

int KeyValueFile::get_int(const std::string& key, int fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : std::stoi(it->second);
}

bool KeyValueFile::get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw std::runtime_error("config: bad boolean '" + it->second + "' for " + key);
}

void KeyValueFile::set(const std::string& key, double value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    values_[key] = os.str();
}

void write_manifest(const std::string& dir, const KeyValueFile& config,
                    const std::map<std::string, std::string>& input_files) {
    std::filesystem::create_directories(dir);
    KeyValueFile m = config;
    for (const auto& [label, path] : input_files)
        m.set("input." + label + ".sha256", sha256_file(path));
    m.save(dir + "/manifest.txt");
}

}  // namespace disendiff
