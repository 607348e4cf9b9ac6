#pragma once

/// Flat key/value run configuration with documented defaults. Keys use dotted
/// prefixes (proposer.conf_threshold, loss.gamma). Values are stored as text
/// and parsed on access.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mitodet {

struct ConfigKey {
    std::string key;
    std::string default_value;
    std::string doc;
};

class Config {
  public:
    Config();  // all defaults

    /// The full registry of known keys, their defaults and one-line docs.
    static const std::vector<ConfigKey>& registry();

    /// Loads `key = value` lines ('#' comments, blank lines allowed) over the
    /// current values. Unknown keys throw std::invalid_argument.
    void load_file(const std::string& path);

    /// Applies a single "key=value" override.
    void set_kv(const std::string& kv);
    void set(const std::string& key, const std::string& value);

    bool has(const std::string& key) const;
    std::string get_string(const std::string& key) const;
    double get_double(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    /// Comma-separated integer list.
    std::vector<std::int64_t> get_int_list(const std::string& key) const;
    std::vector<double> get_double_list(const std::string& key) const;

    /// All resolved key/value pairs, sorted by key.
    const std::map<std::string, std::string>& values() const { return values_; }

    /// Serialized `key = value` text of the fully-resolved config.
    std::string to_text() const;

  private:
    std::map<std::string, std::string> values_;
};

}  // namespace mitodet
