#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "atc/optim.hpp"

namespace atc {

// Shared checkpoint container: magic, a kind tag, named scalar config
// entries, then named float32 weight blobs. Backbone and policy checkpoints
// both use it.
struct BlobFile {
    std::string kind;
    std::map<std::string, float> config;
    std::vector<std::pair<std::string, Tensor>> blobs;

    float get(const std::string& key) const;
    int get_int(const std::string& key) const;
};

void save_blob_file(const std::string& path, const std::string& kind,
                    const std::vector<std::pair<std::string, float>>& config,
                    const ParamSet& params);

BlobFile load_blob_file(const std::string& path, const std::string& expected_kind);

// Copies blobs into an existing ParamSet by name; shapes must match.
void apply_blobs(const BlobFile& file, ParamSet& params);

}  // namespace atc
