#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mmclip/trainer.hpp"

namespace mmclip::cli {

/// Entry point of the mmclip binary. Returns the process exit code; errors
/// are reported on `err` prefixed with the failing stage.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Writes `dir`/manifest.json listing `files` relative to `dir`.
void write_manifest(const std::filesystem::path& dir, const std::string& command,
                    const std::vector<std::filesystem::path>& files);

/// One maskdump record as JSON text (single line).
std::string mask_record_json(const std::string& sample_id, const AttentionMaskSet& masks);

}  // namespace mmclip::cli
