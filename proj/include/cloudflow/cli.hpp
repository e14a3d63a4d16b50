#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

namespace cloudflow::cli {

/// Resolved settings of one command: defaults, then the JSON config file, then
/// command-line overrides. Every key is checked against a fixed schema.
class RunConfig {
public:
    static RunConfig defaults(std::string command);

    /// Merges a JSON object; throws ConfigError on unknown keys or wrong types.
    void merge(const nlohmann::json& overrides, const std::string& origin);
    void merge_file(const std::filesystem::path& path);
    /// Range and consistency checks; throws ConfigError.
    void validate() const;

    const std::string& command() const { return command_; }
    const nlohmann::json& values() const { return values_; }
    nlohmann::json resolved() const;

    template <typename T>
    T get(const std::string& key) const {
        return values_.at(key).get<T>();
    }
    std::filesystem::path path(const std::string& key) const;

private:
    std::string command_;
    nlohmann::json values_;
};

/// Names of the accepted config keys.
std::vector<std::string> schema_keys();

void cmd_gen_data(const RunConfig& cfg, std::ostream& log);
void cmd_train(const RunConfig& cfg, std::ostream& log);
void cmd_predict(const RunConfig& cfg, std::ostream& log);
void cmd_eval(const RunConfig& cfg, std::ostream& log);
void cmd_residuals(const RunConfig& cfg, std::ostream& log);
void cmd_critical(const RunConfig& cfg, std::ostream& log);
void cmd_grid_search(const RunConfig& cfg, std::ostream& log);

/// Parses arguments (without the program name), runs the command and maps failures
/// to exit codes: 0 ok, 2 config, 3 data, 4 numerical. Failures print one line
/// "error class=<class> message=<json string>" to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cloudflow::cli
