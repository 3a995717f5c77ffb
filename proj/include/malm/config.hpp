#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace malm {

enum class Provenance { Default, File, Flag };

const char* provenance_name(Provenance p);

/// Flat key-value configuration with a fixed key registry. Every key has a
/// type and a default; unknown keys are an error. Values arrive from three
/// layers with increasing precedence: defaults, config file, command-line
/// flags. Each key remembers where its current value came from.
class RunConfig {
public:
    enum class Type { Int, Real, Bool, Str };

    struct Entry {
        Type type;
        std::string value;  // canonical textual form
        Provenance provenance = Provenance::Default;
        std::string help;
    };

    /// Registry with all documented keys at their defaults.
    static RunConfig defaults();

    bool has(const std::string& key) const;

    int64_t get_int(const std::string& key) const;
    double get_real(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    const std::string& get_str(const std::string& key) const;

    /// Sets a key from text, validating the key exists and the value parses.
    void set(const std::string& key, const std::string& value, Provenance prov);

    /// Loads `key = value` lines ('#' starts a comment). Unknown key -> Error.
    void load_file(const std::string& path);
    void load_text(const std::string& text, const std::string& origin);

    Provenance provenance(const std::string& key) const;

    /// Full resolved dump, one `key = value` per line with provenance
    /// comments; parseable by load_text.
    std::string resolved_text() const;

    std::vector<std::string> keys() const;
    const Entry& entry(const std::string& key) const;

private:
    std::map<std::string, Entry> entries_;

    void add(const std::string& key, Type type, const std::string& value,
             const std::string& help);
    static void validate_value(Type type, const std::string& key,
                               const std::string& value);
};

/// Flag spelling (`--mask-ratio`) to key spelling (`mask_ratio`) and back.
std::string flag_to_key(const std::string& flag);
std::string key_to_flag(const std::string& key);

}  // namespace malm
