#pragma once

// Checkpoint container. Layout (stable, version 1):
//
//   UBENCH-CKPT 1\n
//   <meta: one line of JSON>\n
//   <section count>\n
//   for each section:
//     <name> <value count>\n
//     <value count x 8 bytes, IEEE-754 binary64, little-endian>\n
//   END\n
//
// See docs/formats.md for the meta keys written by each producer.

#include "ubench/netcore.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace ubench {

struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<std::pair<std::string, std::vector<double>>> sections;

    void put(std::string name, std::vector<double> values);
    const std::vector<double>& get(const std::string& name) const;
    bool has(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

nlohmann::json to_json(const net::PredictorConfig& config);
net::PredictorConfig predictor_config_from_json(const nlohmann::json& j);

/// Stores config under meta[prefix] and parameters/spectral vectors as sections.
void store_predictor(Checkpoint& ckpt, const std::string& prefix, const net::Predictor& predictor);
net::Predictor load_predictor(const Checkpoint& ckpt, const std::string& prefix);

}  // namespace ubench
