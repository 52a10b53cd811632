#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "flowmimic/tensor.hpp"

namespace flowmimic::nn {

// Checkpoints are a JSON manifest (<prefix>.json) plus a raw blob
// (<prefix>.bin) of little-endian IEEE-754 doubles, concatenated in manifest
// order. Round-trips are bit-exact; the manifest carries an FNV hash of the
// blob so a mismatched pair is rejected at load time.

void save_tensors(const std::string& prefix,
                  const std::vector<std::pair<std::string, const Tensor*>>& items);

std::map<std::string, Tensor> load_tensors(const std::string& prefix);

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace flowmimic::nn
