// DSDF checkpoint serialization: magic "DSDF", version u32 LE, tensor count
// u32 LE, then per tensor: name length u16 LE + UTF-8 name, rank u8, dims
// u64 LE each, raw 32-bit LE floats.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "disendiff/denoiser.hpp"
#include "disendiff/tensor.hpp"

namespace disendiff {

inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Model& model);
// Loads into an existing model; every model parameter must be present with
// a matching shape.
void load_checkpoint(const std::string& path, Model& model);

// Raw named-tensor forms, for tooling and tests.
std::map<std::string, Tensor> read_checkpoint_tensors(const std::string& path);
void write_checkpoint_tensors(const std::string& path,
                              const std::vector<std::pair<std::string, Tensor>>& tensors);

std::string sha256_file(const std::string& path);
std::string sha256_bytes(const void* data, size_t len);

}  // namespace disendiff
