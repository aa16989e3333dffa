#ifndef HSAE_CHECKPOINT_HPP
#define HSAE_CHECKPOINT_HPP

// Model file format (little-endian):
//
//   char[4] "HSAE", u32 version (1)
//   u32 d, m_top, k, a, s
//   f64 alpha, slope, beta, lambda1, lambda2
//   u8  use_bias
//   f32 row-major blocks: E, D, [b], then per expert pi_down, pi_up, E_j, D_j
//
// Float models round-trip bit-exactly.

#include <iosfwd>
#include <string>

#include "hsae/model.hpp"

namespace hsae {

inline constexpr std::uint32_t kModelVersion = 1;

void write_model(std::ostream& os, const HsaeModel<float>& model);
void write_model(const std::string& path, const HsaeModel<float>& model);

/// Reads the header and parameter blocks. With `expected`, any shape field
/// disagreement is reported by name.
HsaeModel<float> read_model(std::istream& is, const std::string& what, const HsaeConfig* expected = nullptr);
HsaeModel<float> read_model(const std::string& path, const HsaeConfig* expected = nullptr);

/// Parameter blocks only (no header), row-major f32, canonical order.
void write_param_blocks(std::ostream& os, const HsaeModel<float>& model);
void read_param_blocks(std::istream& is, HsaeModel<float>& model, const std::string& what);

}  // namespace hsae

#endif  // HSAE_CHECKPOINT_HPP
