#pragma once

#include <filesystem>
#include <optional>

#include "json.hpp"

#include "histocase/model.hpp"

namespace histocase::model {

// Binary layout: 8-byte magic "HCNETCK1", u32 format version, u64 header length, JSON
// header (config, metadata, tensor names and sizes), then every tensor as raw
// little-endian IEEE-754 doubles: trainable tensors, running statistics, and the
// optional momentum buffers, in canonical order.
struct Checkpoint {
    NetworkConfig config;
    Parameters params;
    std::optional<Parameters> velocity;
    nlohmann::json metadata = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace histocase::model
