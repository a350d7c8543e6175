#pragma once

#include <string>

#include "adp/model.hpp"

namespace adp {

// Checkpoint file: magic `ADPCKPT1`, an ASCII decimal byte length of the
// manifest followed by LF, manifest lines `name dim0xdim1x... offset`, then
// the raw parameter values as little-endian 64-bit IEEE-754 reals. Offsets
// count doubles from the start of the data section.
void save_checkpoint(const std::string& path, BranchedModel& model);

// Restores parameters in place. Throws std::runtime_error naming the first
// tensor whose name or shape does not match the model architecture.
void load_checkpoint(const std::string& path, BranchedModel& model);

}  // namespace adp
