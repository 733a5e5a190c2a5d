#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "scale/memory.hpp"
#include "scale/networks.hpp"

namespace scale {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ScaleModel model;
  std::optional<EpisodicMemory> memory;
};

// Versioned JSON document holding the model configuration, every parameter
// group, the registered tasks, generator states and (optionally) the memory.
// Doubles are written with round-trip precision, so save/load is bit-exact.
std::string serialize_checkpoint(const ScaleModel& model, const EpisodicMemory* memory);
Checkpoint deserialize_checkpoint(const std::string& text);

void save_checkpoint(const std::filesystem::path& path, const ScaleModel& model,
                     const EpisodicMemory* memory = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Write to a sibling temporary file, then rename over `path`.
void write_atomically(const std::filesystem::path& path, const std::string& contents);

}  // namespace scale
