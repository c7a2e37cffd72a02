#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "eman/model.hpp"
#include "eman/tensor.hpp"

namespace eman {

// Binary layout, all integers little-endian:
//   "EMCK" | u32 version | u64 record count
//   per record: u32 name length | name bytes | u32 rank | u64 extents[rank] | f64 payload
// Parameters are stored as "param.<name>", buffers as "buffer.<name>.mu" and
// "buffer.<name>.sigma2".

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
    std::string name;
    Tensor value;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void write_records(const std::filesystem::path& path, const std::vector<CheckpointRecord>& records);
std::vector<CheckpointRecord> read_records(const std::filesystem::path& path);

std::vector<CheckpointRecord> to_records(const ModelState& model);

void save_checkpoint(const std::filesystem::path& path, const ModelState& model);

/// Overwrites the values of `model`; names and shapes must match exactly.
void load_checkpoint(const std::filesystem::path& path, ModelState& model);

}  // namespace eman
