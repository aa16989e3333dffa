#ifndef HSAE_CONFIG_HPP
#define HSAE_CONFIG_HPP

// Flat key-value run configuration.
//
//   # comment
//   [model]          optional section header; keys must belong to it
//   k = 4
//
// Keys are unique across sections, so a file may omit headers entirely.
// Unset keys take their defaults.

#include <string>
#include <vector>

#include "hsae/datagen.hpp"
#include "hsae/trainer.hpp"

namespace hsae {

struct DataGenConfig {
    DictionarySpec dict;
    Index n_samples = 200000;
    Index n_heldout = 10000;
    Index n_pairs = 1000;
    Index shards = 1;
    bool whiten = false;
};

struct EvalSpec {
    Index top_n = 8;          ///< paired divergence set size
    Index top_m = 20;         ///< feature report list length
    Index max_rows = 20000;   ///< rows used for evaluation metrics
};

struct RunConfig {
    TrainConfig train;
    DataGenConfig data;
    EvalSpec eval;
};

/// Thrown for unknown keys, malformed lines and type mismatches; the message
/// names the key and line.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

RunConfig default_run_config();
RunConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");
RunConfig parse_config(const std::string& path);

/// Every recognised key as "section.key".
std::vector<std::string> config_keys();

}  // namespace hsae

#endif  // HSAE_CONFIG_HPP
