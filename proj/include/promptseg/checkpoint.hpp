#pragma once

#include "promptseg/model.hpp"

#include <string>

namespace promptseg {

// Serialized run state: a JSON manifest describing config, catalog, protocol
// and every tensor (name, shape, per-tensor content hash), plus one binary
// blob of little-endian float32 values. Loading verifies all hashes.

struct Checkpoint {
    ModelState state;
    TaskProtocol protocol;
    std::string config_hash;
    uint64_t model_seed = 0;
};

void save_checkpoint(const std::string& dir, const ModelState& state,
                     const TaskProtocol& protocol, const std::string& config_hash,
                     uint64_t model_seed);

Checkpoint load_checkpoint(const std::string& dir);

// Reads only the stored config hash (cheap resume compatibility probe).
std::string checkpoint_config_hash(const std::string& dir);

bool checkpoint_exists(const std::string& dir);

// FNV digest over the float64 bytes of every parameter, creation order.
// Insensitive to trainable flags; used to prove tensors did not move.
uint64_t state_digest(const ModelState& state);

}  // namespace promptseg
