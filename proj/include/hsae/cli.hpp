#ifndef HSAE_CLI_HPP
#define HSAE_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

namespace hsae {

/// Entry point of the `hsae` tool. Returns the process exit status; failures
/// print a one-line diagnostic to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Training shards inside a data directory: activations.hact, or
/// activations_NNN.hact in name order.
std::vector<std::string> training_shards(const std::string& data_dir);

}  // namespace hsae

#endif  // HSAE_CLI_HPP
