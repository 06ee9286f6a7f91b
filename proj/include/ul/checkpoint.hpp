#pragma once

#include <cstdint>
#include <string>

#include "ul/config.hpp"
#include "ul/nets.hpp"

namespace ul {

// Self-describing checkpoint container: a text header with every config and
// schedule value, followed by named raw float64 parameter arrays. Values are
// written as little-endian IEEE doubles, so a load reproduces evaluation
// outputs bit-for-bit.
void save_bundle(const ModelBundle& bundle, const std::string& path);
ModelBundle load_bundle(const std::string& path);

// Stable content hash over names, shapes and raw parameter bytes; used for
// frozen-parameter guarantees and as the checkpoint id in reports.
uint64_t param_checksum(const ParamSet& ps);
uint64_t bundle_checksum(const ModelBundle& bundle);
std::string checkpoint_id(const ModelBundle& bundle);  // 16 hex digits

// Header conversion, shared with the training CLI: every non-parameter field
// of the bundle as flat config keys, and back.
ConfigMap bundle_header(const ModelBundle& bundle);
ModelBundle bundle_from_header(const ConfigMap& header);

}  // namespace ul
