#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mlang/nn.hpp"

namespace mlang {

// Flat binary parameter blob with a JSON manifest of tensor
// names/shapes/offsets. Values are little-endian float32; offsets count
// floats from the start of the .bin file.
//
// A checkpoint directory holds config.json plus one or more blob pairs
// (<stem>.bin / <stem>.json), e.g. params.bin/params.json.

using NamedTensorData =
    std::vector<std::pair<std::string, std::pair<std::vector<int>, std::vector<double>>>>;

void write_blob(const std::string& dir, const std::string& stem,
                const NamedTensorData& tensors);

std::unordered_map<std::string, std::pair<std::vector<int>, std::vector<double>>>
read_blob(const std::string& dir, const std::string& stem);

bool blob_exists(const std::string& dir, const std::string& stem);

// ParamStore round trip; load throws CorruptCheckpoint on any shape or
// name mismatch. Saving rounds the live parameters to float32 so a
// reloaded checkpoint is bit-identical to the in-memory model.
void save_params(const std::string& dir, const std::string& stem,
                 nn::ParamStore& params);
void load_params(const std::string& dir, const std::string& stem,
                 nn::ParamStore& params);

// --- json + hashing helpers -------------------------------------------------

nlohmann::json read_json_file(const std::string& path);
void write_json_file(const std::string& path, const nlohmann::json& j);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

// FNV-1a over a canonical string; stable across platforms, used for
// vocabulary and config identity stamps.
std::string fnv1a_hex(const std::string& data);

void ensure_dir(const std::string& path);
bool path_exists(const std::string& path);

}  // namespace mlang
