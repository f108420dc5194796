#pragma once

// Binary checkpoint format (all integers little-endian):
//
//   magic        8 bytes   "CLIPACKP"
//   version      u32       1
//   digest       u64       FNV-1a of the config JSON bytes that follow
//   config_len   u32, then config_len bytes of compact JSON (ClipConfig plus
//                the current image grid)
//   count        u32       number of parameter records
//   record       name_len u32, name bytes, dtype u8 (1 = float32, 2 = float64),
//                rank u32, rank x i64 extents, raw little-endian values
//
// Parameters are written as float32 when every value is exactly representable
// in float32, otherwise as float64, so save/load is bit-exact.

#include <filesystem>
#include <stdexcept>

#include "clipa/model.hpp"

namespace clipa {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::filesystem::path& path, const ClipModel& model);
ClipModel load_checkpoint(const std::filesystem::path& path);

}  // namespace clipa
